//! Image quality metrics.
//!
//! All accumulation happens in f64 regardless of the image scalar type so
//! that reported values are stable across f32/f64 pipelines.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// PSNR ceiling reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// SSIM window: side length and Gaussian standard deviation.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over all channels, data range 1. Capped at
/// [`PSNR_CAP`] so identical inputs stay finite.
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x.to_f64().unwrap() - y.to_f64().unwrap();
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of length [`SSIM_WINDOW`].
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0f64; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// Full normalized 2-D window as a flat row-major vector, for oracle use.
pub fn ssim_window_2d() -> Vec<f64> {
    let taps = gaussian_taps();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = taps[i] * taps[j];
        }
    }
    w
}

/// Horizontal then vertical pass of the separable Gaussian over a plane,
/// keeping only rows/columns where the window fits entirely.
fn blur_valid(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let taps = gaussian_taps();
    let side = SSIM_WINDOW;
    let ow = w - side + 1;
    let oh = h - side + 1;
    // Horizontal pass: (h, ow)
    let mut horiz = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    // Vertical pass: (oh, ow)
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity on the channel-mean grayscale plane, data
/// range 1, Gaussian-weighted 11x11 windows, valid positions only.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let ga = a.to_gray();
    let gb = b.to_gray();
    let pa: Vec<f64> = ga.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let pb: Vec<f64> = gb.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let sq = |p: &[f64]| -> Vec<f64> { p.iter().map(|v| v * v).collect() };
    let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

    let (mu_a, oh, ow) = blur_valid(&pa, h, w);
    let (mu_b, _, _) = blur_valid(&pb, h, w);
    let (e_aa, _, _) = blur_valid(&sq(&pa), h, w);
    let (e_bb, _, _) = blur_valid(&sq(&pb), h, w);
    let (e_ab, _, _) = blur_valid(&prod, h, w);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0f64;
    for i in 0..oh * ow {
        let va = e_aa[i] - mu_a[i] * mu_a[i];
        let vb = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean Euclidean distance between paired landmark points.
pub fn landmark_distance(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "landmark counts {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("empty landmark sets".into()));
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        acc += ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt();
    }
    Ok(acc / pred.len() as f64)
}
