//! Differentiable convolutions on NCHW tensors.
//!
//! `conv2d` is cross-correlation with zero padding, lowered to a matrix
//! product over im2col patches. `conv_transpose2d` is its exact adjoint with
//! stride equal to the kernel side (the non-overlapping upsampling case), so
//! its forward pass reuses the conv input-gradient routine. The depthwise
//! 3x3 path is direct loops; its channel count times nine weights never
//! justifies patch lowering.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};

use super::Tensor;
use crate::scalar::Scalar;

fn out_side(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "kernel {k} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Lowers one batch item `(c, h, w)` to a `(c*kh*kw, oh*ow)` patch matrix.
fn im2col<T: Scalar>(
    x: &ArrayViewD<'_, T>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut col = Array2::<T>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        col[(row, oy * ow + ox)] = x[[b, ch, y as usize, xx as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto the image.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    out: &mut ArrayD<T>,
    b: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        out[[b, ch, y as usize, xx as usize]] += col[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
}

/// Weight as a `(cout, cin*kh*kw)` matrix view over owned data.
fn weight_mat<T: Scalar>(w: &ArrayD<T>) -> Array2<T> {
    let (cout, cin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    Array2::from_shape_vec((cout, cin * kh * kw), w.iter().cloned().collect())
        .expect("weight is contiguous")
}

pub(crate) fn conv2d_fwd_raw<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (n, cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wc, "conv2d channel mismatch");
    let oh = out_side(h, kh, stride, pad);
    let ow = out_side(ww, kw, stride, pad);
    let wm = weight_mat(w);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, cout, oh, ow]));
    for b in 0..n {
        let col = im2col(&x.view(), b, kh, kw, stride, pad, oh, ow);
        let y = wm.dot(&col); // (cout, oh*ow)
        for co in 0..cout {
            for p in 0..oh * ow {
                out[[b, co, p / ow, p % ow]] = y[(co, p)];
            }
        }
    }
    out
}

pub(crate) fn conv2d_bwd_input_raw<T: Scalar>(
    gy: &ArrayD<T>,
    w: &ArrayD<T>,
    stride: usize,
    pad: usize,
    input_shape: &[usize],
) -> ArrayD<T> {
    let (n, cout) = (gy.shape()[0], gy.shape()[1]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let wm = weight_mat(w); // (cout, cin*kh*kw)
    let mut gx = ArrayD::<T>::zeros(IxDyn(input_shape));
    for b in 0..n {
        let gmat = Array2::from_shape_vec(
            (cout, oh * ow),
            gy.index_axis(Axis(0), b).iter().cloned().collect(),
        )
        .expect("contiguous grad");
        let gcol = wm.t().dot(&gmat); // (cin*kh*kw, oh*ow)
        col2im(&gcol, &mut gx, b, kh, kw, stride, pad, oh, ow);
    }
    gx
}

pub(crate) fn conv2d_bwd_weight_raw<T: Scalar>(
    gy: &ArrayD<T>,
    x: &ArrayD<T>,
    stride: usize,
    pad: usize,
    weight_shape: &[usize],
) -> ArrayD<T> {
    let (n, cout) = (gy.shape()[0], gy.shape()[1]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let (kh, kw) = (weight_shape[2], weight_shape[3]);
    let cin = weight_shape[1];
    let mut gw = Array2::<T>::zeros((cout, cin * kh * kw));
    for b in 0..n {
        let col = im2col(&x.view(), b, kh, kw, stride, pad, oh, ow);
        let gmat = Array2::from_shape_vec(
            (cout, oh * ow),
            gy.index_axis(Axis(0), b).iter().cloned().collect(),
        )
        .expect("contiguous grad");
        gw = gw + gmat.dot(&col.t());
    }
    ArrayD::from_shape_vec(IxDyn(weight_shape), gw.into_iter().collect())
        .expect("weight shape matches")
}

/// Cross-correlation of `x (n, cin, h, w)` with `weight (cout, cin, kh, kw)`,
/// zero padding `pad`, square stride.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    debug_assert!(x.same_tape(weight));
    let xv = x.value_rc();
    let wv = weight.value_rc();
    let value = conv2d_fwd_raw(&xv, &wv, stride, pad);
    let req = x.requires_grad() || weight.requires_grad();
    let backward = req.then(|| {
        let (xid, wid) = (x.id(), weight.id());
        let (xreq, wreq) = (x.requires_grad(), weight.requires_grad());
        let (xr, wr) = (Rc::clone(&xv), Rc::clone(&wv));
        let f: super::BackwardFn<T> = Box::new(move |g, sink| {
            if xreq {
                sink.add(xid, conv2d_bwd_input_raw(g, &wr, stride, pad, xr.shape()));
            }
            if wreq {
                sink.add(wid, conv2d_bwd_weight_raw(g, &xr, stride, pad, wr.shape()));
            }
        });
        f
    });
    x.tape().make_tensor(Rc::new(value), req, backward)
}

/// Transposed convolution with kernel side equal to `stride` and no padding:
/// `x (n, cin, h, w)` with `weight (cin, cout, s, s)` gives
/// `(n, cout, h*s, w*s)`. Exact adjoint of [`conv2d`] with the same geometry.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Tensor<T> {
    debug_assert!(x.same_tape(weight));
    let xv = x.value_rc();
    let wv = weight.value_rc();
    let (n, cin, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    assert_eq!(wv.shape()[0], cin, "conv_transpose2d channel mismatch");
    assert_eq!(wv.shape()[2], stride);
    assert_eq!(wv.shape()[3], stride);
    let cout = wv.shape()[1];
    let out_shape = [n, cout, h * stride, w * stride];
    // Viewing the weight as a (cin, cout, s, s) conv kernel, the transposed
    // conv forward is that conv's input gradient.
    let value = conv2d_bwd_input_raw(&xv, &wv, stride, 0, &out_shape);
    let req = x.requires_grad() || weight.requires_grad();
    let backward = req.then(|| {
        let (xid, wid) = (x.id(), weight.id());
        let (xreq, wreq) = (x.requires_grad(), weight.requires_grad());
        let (xr, wr) = (Rc::clone(&xv), Rc::clone(&wv));
        let f: super::BackwardFn<T> = Box::new(move |g, sink| {
            if xreq {
                sink.add(xid, conv2d_fwd_raw(g, &wr, stride, 0));
            }
            if wreq {
                // Bilinear in (x, w): the weight gradient is the conv weight
                // gradient with the roles of input and output grad swapped.
                sink.add(wid, conv2d_bwd_weight_raw(&xr, g, stride, 0, wr.shape()));
            }
        });
        f
    });
    x.tape().make_tensor(Rc::new(value), req, backward)
}

/// Depthwise 3x3 cross-correlation, stride 1, zero padding 1; weight is
/// `(c, 3, 3)`.
pub fn conv2d_depthwise3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    debug_assert!(x.same_tape(weight));
    let xv = x.value_rc();
    let wv = weight.value_rc();
    let (n, c, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    assert_eq!(wv.shape(), &[c, 3, 3], "depthwise weight must be (c, 3, 3)");
    let mut value = ArrayD::<T>::zeros(xv.raw_dim());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for ky in 0..3usize {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += wv[[ch, ky, kx]] * xv[[b, ch, sy as usize, sx as usize]];
                        }
                    }
                    value[[b, ch, y, xx]] = acc;
                }
            }
        }
    }
    let req = x.requires_grad() || weight.requires_grad();
    let backward = req.then(|| {
        let (xid, wid) = (x.id(), weight.id());
        let (xreq, wreq) = (x.requires_grad(), weight.requires_grad());
        let (xr, wr) = (Rc::clone(&xv), Rc::clone(&wv));
        let f: super::BackwardFn<T> = Box::new(move |g, sink| {
            if xreq {
                let mut gx = ArrayD::<T>::zeros(xr.raw_dim());
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let go = g[[b, ch, y, xx]];
                                for ky in 0..3usize {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        gx[[b, ch, sy as usize, sx as usize]] +=
                                            go * wr[[ch, ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(xid, gx);
            }
            if wreq {
                let mut gw = ArrayD::<T>::zeros(wr.raw_dim());
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let go = g[[b, ch, y, xx]];
                                for ky in 0..3usize {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        gw[[ch, ky, kx]] +=
                                            go * xr[[b, ch, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(wid, gw);
            }
        });
        f
    });
    x.tape().make_tensor(Rc::new(value), req, backward)
}
