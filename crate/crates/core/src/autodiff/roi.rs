//! Differentiable region extraction and paste-back.
//!
//! Extraction bilinearly samples a square window: output cell `(i, j)` reads
//! the plane at `origin + (i + 0.5, j + 0.5)`, where input cell `(y, x)` has
//! its center at `(y + 0.5, x + 0.5)`. Out-of-range taps read zero. Written
//! as a sparse matrix `E`, extraction is `patch = E f`; the paste operator
//! writes `E^T patch` over every cell `E` touches and leaves the rest of the
//! base untouched, so paste-after-extract at an integer-aligned box is the
//! identity on the window.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::Tensor;
use crate::scalar::{sc, Scalar};

/// Bilinear taps of one output cell: up to four `((y, x), weight)` entries.
type Taps = Vec<((usize, usize), f64)>;

/// Taps for every cell of a `side x side` window at `origin` in an `(h, w)`
/// plane, indexed row-major.
pub(crate) fn window_taps(
    origin_y: f64,
    origin_x: f64,
    side: usize,
    h: usize,
    w: usize,
) -> Vec<Taps> {
    let mut all = Vec::with_capacity(side * side);
    for oy in 0..side {
        for ox in 0..side {
            let fy = origin_y + oy as f64 + 0.5 - 0.5;
            let fx = origin_x + ox as f64 + 0.5 - 0.5;
            let y0 = fy.floor();
            let x0 = fx.floor();
            let wy1 = fy - y0;
            let wx1 = fx - x0;
            let mut taps: Taps = Vec::with_capacity(4);
            for (dy, wy) in [(0i64, 1.0 - wy1), (1, wy1)] {
                for (dx, wx) in [(0i64, 1.0 - wx1), (1, wx1)] {
                    let weight = wy * wx;
                    if weight == 0.0 {
                        continue;
                    }
                    let yy = y0 as i64 + dy;
                    let xx = x0 as i64 + dx;
                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    taps.push(((yy as usize, xx as usize), weight));
                }
            }
            all.push(taps);
        }
    }
    all
}

/// Extracts a `side x side` window from each batch item of an NCHW tensor;
/// `origins[b]` is the window's top-left `(y, x)` in pixel units.
pub fn roi_extract<T: Scalar>(x: &Tensor<T>, origins: &[(f64, f64)], side: usize) -> Tensor<T> {
    let xv = x.value_rc();
    assert_eq!(xv.ndim(), 4, "roi_extract expects NCHW");
    let (n, c, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    assert_eq!(origins.len(), n, "one origin per batch item");
    let taps: Vec<Vec<Taps>> = origins
        .iter()
        .map(|&(oy, ox)| window_taps(oy, ox, side, h, w))
        .collect();
    let mut value = ArrayD::<T>::zeros(IxDyn(&[n, c, side, side]));
    for b in 0..n {
        for ch in 0..c {
            for (p, cell) in taps[b].iter().enumerate() {
                let mut acc = T::zero();
                for &((y, xx), wt) in cell {
                    acc += sc::<T>(wt) * xv[[b, ch, y, xx]];
                }
                value[[b, ch, p / side, p % side]] = acc;
            }
        }
    }
    let req = x.requires_grad();
    let backward = req.then(|| {
        let id = x.id();
        let shape = xv.raw_dim();
        let f: super::BackwardFn<T> = Box::new(move |g, sink| {
            let mut gx = ArrayD::<T>::zeros(shape.clone());
            for b in 0..n {
                for ch in 0..c {
                    for (p, cell) in taps[b].iter().enumerate() {
                        let go = g[[b, ch, p / side, p % side]];
                        for &((y, xx), wt) in cell {
                            gx[[b, ch, y, xx]] += sc::<T>(wt) * go;
                        }
                    }
                }
            }
            sink.add(id, gx);
        });
        f
    });
    x.tape().make_tensor(Rc::new(value), req, backward)
}

/// Pastes a patch back at `origins`: cells under the window's interpolation
/// footprint become the transposed-scatter of the patch, all other cells of
/// `base` pass through. The patch gradient is the extraction of the output
/// gradient; the base gradient is masked to the untouched complement.
pub fn roi_paste<T: Scalar>(
    base: &Tensor<T>,
    patch: &Tensor<T>,
    origins: &[(f64, f64)],
) -> Tensor<T> {
    debug_assert!(base.same_tape(patch));
    let bv = base.value_rc();
    let pv = patch.value_rc();
    assert_eq!(bv.ndim(), 4);
    assert_eq!(pv.ndim(), 4);
    let (n, c, h, w) = (
        bv.shape()[0],
        bv.shape()[1],
        bv.shape()[2],
        bv.shape()[3],
    );
    assert_eq!(pv.shape()[0], n);
    assert_eq!(pv.shape()[1], c);
    let side = pv.shape()[2];
    assert_eq!(pv.shape()[3], side, "patch must be square");
    assert_eq!(origins.len(), n);
    let taps: Vec<Vec<Taps>> = origins
        .iter()
        .map(|&(oy, ox)| window_taps(oy, ox, side, h, w))
        .collect();
    // Touched masks per batch item, shared by forward and backward.
    let touched: Vec<Vec<bool>> = taps
        .iter()
        .map(|cells| {
            let mut m = vec![false; h * w];
            for cell in cells {
                for &((y, xx), _) in cell {
                    m[y * w + xx] = true;
                }
            }
            m
        })
        .collect();

    let mut value = (*bv).clone();
    for b in 0..n {
        for ch in 0..c {
            for (yx, hit) in touched[b].iter().enumerate() {
                if *hit {
                    value[[b, ch, yx / w, yx % w]] = T::zero();
                }
            }
            for (p, cell) in taps[b].iter().enumerate() {
                let pvv = pv[[b, ch, p / side, p % side]];
                for &((y, xx), wt) in cell {
                    value[[b, ch, y, xx]] += sc::<T>(wt) * pvv;
                }
            }
        }
    }
    let req = base.requires_grad() || patch.requires_grad();
    let backward = req.then(|| {
        let (bid, pid) = (base.id(), patch.id());
        let (breq, preq) = (base.requires_grad(), patch.requires_grad());
        let bshape = bv.raw_dim();
        let pshape = pv.raw_dim();
        let f: super::BackwardFn<T> = Box::new(move |g, sink| {
            if breq {
                let mut gb = g.clone();
                for b in 0..n {
                    for ch in 0..c {
                        for (yx, hit) in touched[b].iter().enumerate() {
                            if *hit {
                                gb[[b, ch, yx / w, yx % w]] = T::zero();
                            }
                        }
                    }
                }
                debug_assert_eq!(gb.raw_dim(), bshape);
                sink.add(bid, gb);
            }
            if preq {
                let mut gp = ArrayD::<T>::zeros(pshape.clone());
                for b in 0..n {
                    for ch in 0..c {
                        for (p, cell) in taps[b].iter().enumerate() {
                            let mut acc = T::zero();
                            for &((y, xx), wt) in cell {
                                acc += sc::<T>(wt) * g[[b, ch, y, xx]];
                            }
                            gp[[b, ch, p / side, p % side]] = acc;
                        }
                    }
                }
                sink.add(pid, gp);
            }
        });
        f
    });
    base.tape().make_tensor(Rc::new(value), req, backward)
}
