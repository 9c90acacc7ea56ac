//! Slow, obviously-correct reference implementations.
//!
//! Each fast path in the library (FFT convolution, separable SSIM windows,
//! flattened channel attention, sparse region scatter) is checked against a
//! direct-summation twin from this module. These run nested loops with no
//! shortcuts; keep them that way.

use ndarray::{Array2, Array4, ArrayD};

use crate::image::ImageTensor;
use crate::imaging::PsfKernel;
use crate::scalar::{sc, Scalar};

/// Mirror index without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct spatial convolution with a flipped kernel and reflected boundary.
pub fn spatial_convolve<T: Scalar>(image: &ImageTensor<T>, kernel: &PsfKernel<T>) -> ImageTensor<T> {
    let (h, w, channels) = image.shape();
    let s = kernel.size();
    let r = (s / 2) as isize;
    ImageTensor::from_fn(h, w, channels, |y, x, c| {
        let mut acc = T::zero();
        for u in 0..s {
            for v in 0..s {
                // True convolution: the kernel is flipped relative to the tap offsets.
                let dy = r - u as isize;
                let dx = r - v as isize;
                let sy = reflect_index(y as isize + dy, h);
                let sx = reflect_index(x as isize + dx, w);
                acc += kernel.weights()[(u, v)] * image.get(sy, sx, c);
            }
        }
        acc
    })
    .expect("same shape as input")
}

/// Per-window structural similarity, mean over all fully-contained windows.
///
/// Every window recomputes its statistics from scratch in f64.
pub fn naive_ssim<T: Scalar>(
    a: &ImageTensor<T>,
    b: &ImageTensor<T>,
    window: &[f64],
    side: usize,
    k1: f64,
    k2: f64,
) -> f64 {
    let ga = a.to_gray();
    let gb = b.to_gray();
    let (h, w, _) = ga.shape();
    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - side) {
        for x0 in 0..=(w - side) {
            let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
            for u in 0..side {
                for v in 0..side {
                    let wt = window[u * side + v];
                    mu_a += wt * ga.get(y0 + u, x0 + v, 0).to_f64().unwrap();
                    mu_b += wt * gb.get(y0 + u, x0 + v, 0).to_f64().unwrap();
                }
            }
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for u in 0..side {
                for v in 0..side {
                    let wt = window[u * side + v];
                    let da = ga.get(y0 + u, x0 + v, 0).to_f64().unwrap() - mu_a;
                    let db = gb.get(y0 + u, x0 + v, 0).to_f64().unwrap() - mu_b;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Channel attention by explicit loops: for one batch item and one head,
/// `out[i, p] = sum_j softmax_j(q_hat[i,:] . k_hat[j,:] * beta)[j] * v[j, p]`
/// where `q_hat`, `k_hat` are L2-normalized rows of the flattened-spatial
/// Q and K matrices.
pub fn naive_channel_attention<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    beta: T,
) -> Array2<T> {
    let (c, n) = q.dim();
    assert_eq!(k.dim(), (c, n));
    assert_eq!(v.dim(), (c, n));
    let normalize = |m: &Array2<T>| -> Array2<T> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
            let denom = norm + sc::<T>(1e-12);
            for x in row.iter_mut() {
                *x = *x / denom;
            }
        }
        out
    };
    let qh = normalize(q);
    let kh = normalize(k);
    let mut out = Array2::zeros((c, n));
    for i in 0..c {
        let mut logits = vec![T::zero(); c];
        for j in 0..c {
            let mut dot = T::zero();
            for p in 0..n {
                dot += qh[(i, p)] * kh[(j, p)];
            }
            logits[j] = dot * beta;
        }
        let maxv = logits.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut weights: Vec<T> = logits.iter().map(|&l| (l - maxv).exp()).collect();
        let sum = weights.iter().fold(T::zero(), |a, &b| a + b);
        for wgt in weights.iter_mut() {
            *wgt = *wgt / sum;
        }
        for p in 0..n {
            let mut acc = T::zero();
            for j in 0..c {
                acc += weights[j] * v[(j, p)];
            }
            out[(i, p)] = acc;
        }
    }
    out
}

/// The bilinear-sampling extraction operator as an explicit matrix `E` of
/// shape `(side*side, h*w)` acting on one flattened channel plane.
/// Row `p` holds the interpolation weights for output cell `p`.
pub fn roi_extract_matrix(
    h: usize,
    w: usize,
    origin_y: f64,
    origin_x: f64,
    side: usize,
) -> Array2<f64> {
    let mut e = Array2::zeros((side * side, h * w));
    for oy in 0..side {
        for ox in 0..side {
            let sy = origin_y + oy as f64 + 0.5;
            let sx = origin_x + ox as f64 + 0.5;
            // Sample the plane at (sy, sx) where cell (i, j) has center
            // (i + 0.5, j + 0.5).
            let fy = sy - 0.5;
            let fx = sx - 0.5;
            let y0 = fy.floor();
            let x0 = fx.floor();
            let wy1 = fy - y0;
            let wx1 = fx - x0;
            let row = oy * side + ox;
            for (dy, wy) in [(0i64, 1.0 - wy1), (1, wy1)] {
                for (dx, wx) in [(0i64, 1.0 - wx1), (1, wx1)] {
                    let yy = y0 as i64 + dy;
                    let xx = x0 as i64 + dx;
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    // Out-of-range taps read zero, matching the sampler.
                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    e[(row, (yy as usize * w) + xx as usize)] += weight;
                }
            }
        }
    }
    e
}

/// Applies the extraction matrix to every batch item and channel of an NCHW
/// tensor, producing the `(n, c, side, side)` patch stack.
pub fn roi_extract_by_matrix(x: &Array4<f64>, e: &Array2<f64>, side: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, side, side));
    for b in 0..n {
        for ch in 0..c {
            for p in 0..side * side {
                let mut acc = 0.0;
                for q in 0..h * w {
                    acc += e[(p, q)] * x[(b, ch, q / w, q % w)];
                }
                out[(b, ch, p / side, p % side)] = acc;
            }
        }
    }
    out
}

/// Paste via the transpose of the extraction matrix: cells touched by any
/// nonzero weight are replaced by `E^T patch`, untouched cells keep `base`.
pub fn roi_paste_by_matrix(
    base: &Array4<f64>,
    patch: &Array4<f64>,
    e: &Array2<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = base.dim();
    let (_, _, side, _) = patch.dim();
    let mut out = base.clone();
    for b in 0..n {
        for ch in 0..c {
            for q in 0..h * w {
                let mut touched = false;
                let mut acc = 0.0;
                for p in 0..side * side {
                    if e[(p, q)] != 0.0 {
                        touched = true;
                        acc += e[(p, q)] * patch[(b, ch, p / side, p % side)];
                    }
                }
                if touched {
                    out[(b, ch, q / w, q % w)] = acc;
                }
            }
        }
    }
    out
}

/// Central finite difference of `f` with respect to every element of `x`.
pub fn finite_difference_grad<F>(x: &ArrayD<f64>, eps: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
    }
    grad
}
