//! Differentiable tensor operations.
//!
//! Binary elementwise ops broadcast the right operand toward the left: both
//! sides must have the same rank and every right dimension is either equal
//! to the left one or 1. Gradients for broadcast axes are summed back.

use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Zip};

use super::{GradSink, Tensor};
use crate::scalar::{sc, Scalar};

fn assert_bcast(lhs: &[usize], rhs: &[usize]) {
    assert_eq!(
        lhs.len(),
        rhs.len(),
        "broadcast requires equal rank: {lhs:?} vs {rhs:?}"
    );
    for (l, r) in lhs.iter().zip(rhs) {
        assert!(
            r == l || *r == 1,
            "shape {rhs:?} does not broadcast to {lhs:?}"
        );
    }
}

/// Sums `g` over every axis where `shape` is 1 but `g` is wider, restoring
/// `shape`. The reduction adjoint of broadcasting.
fn reduce_to_shape<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut out = g.clone();
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] > 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, kind: BinKind) -> Tensor<T> {
        debug_assert!(self.same_tape(rhs), "operands from different tapes");
        assert_bcast(self.shape(), rhs.shape());
        let a = self.value_rc();
        let b = rhs.value_rc();
        let bb = b.broadcast(a.raw_dim()).expect("checked broadcast");
        let value = match kind {
            BinKind::Add => &*a + &bb,
            BinKind::Sub => &*a - &bb,
            BinKind::Mul => &*a * &bb,
        };
        let req = self.requires_grad() || rhs.requires_grad();
        let backward = req.then(|| {
            let (aid, bid) = (self.id(), rhs.id());
            let (areq, breq) = (self.requires_grad(), rhs.requires_grad());
            let bshape: Vec<usize> = rhs.shape().to_vec();
            let (av, bv) = (Rc::clone(&a), Rc::clone(&b));
            let f: super::BackwardFn<T> = Box::new(move |g, sink: &mut GradSink<T>| {
                match kind {
                    BinKind::Add => {
                        if areq {
                            sink.add(aid, g.clone());
                        }
                        if breq {
                            sink.add(bid, reduce_to_shape(g, &bshape));
                        }
                    }
                    BinKind::Sub => {
                        if areq {
                            sink.add(aid, g.clone());
                        }
                        if breq {
                            sink.add(bid, reduce_to_shape(&(-g.clone()), &bshape));
                        }
                    }
                    BinKind::Mul => {
                        if areq {
                            let bb = bv.broadcast(g.raw_dim()).unwrap();
                            sink.add(aid, g * &bb);
                        }
                        if breq {
                            let ga = g * &*av;
                            sink.add(bid, reduce_to_shape(&ga, &bshape));
                        }
                    }
                }
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, BinKind::Mul)
    }

    /// Elementwise unary op from a value map and a derivative in terms of
    /// input and output values.
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.value_rc();
        let y = Rc::new(x.mapv(f));
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let (xv, yv) = (Rc::clone(&x), Rc::clone(&y));
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(&*xv).and(&*yv).for_each(|d, &xi, &yi| {
                    *d = *d * df(xi, yi);
                });
                sink.add(id, dx);
            });
            f
        });
        self.tape().make_tensor(y, req, backward)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(T::zero())
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| sc::<T>(2.0) * x)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Tensor<T> {
        self.unary(|x| x.recip(), |_, y| -y * y)
    }

    /// 1 / sqrt(x + eps).
    pub fn rsqrt_eps(&self, eps: T) -> Tensor<T> {
        self.unary(
            move |x| (x + eps).sqrt().recip(),
            |_, y| sc::<T>(-0.5) * y * y * y,
        )
    }

    /// Clamp to [0, 1]; the gradient passes inside the range (boundaries
    /// included) and is zero outside.
    pub fn clamp01(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()).min(T::one()),
            |x, _| {
                if x >= T::zero() && x <= T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Mean over every element, producing shape `[1]`.
    pub fn mean_all(&self) -> Tensor<T> {
        let x = self.value_rc();
        let n = x.len();
        let inv = T::from_usize(n).unwrap().recip();
        let v = x.iter().fold(T::zero(), |a, &b| a + b) * inv;
        let value = Rc::new(ArrayD::from_elem(IxDyn(&[1]), v));
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let shape = x.raw_dim();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let gv = g[[0]] * inv;
                sink.add(id, ArrayD::from_elem(shape.clone(), gv));
            });
            f
        });
        self.tape().make_tensor(value, req, backward)
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_lastdim(&self) -> Tensor<T> {
        let x = self.value_rc();
        let last = Axis(x.ndim() - 1);
        let value = Rc::new(x.sum_axis(last).insert_axis(last));
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let shape = x.raw_dim();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                sink.add(id, g.broadcast(shape.clone()).unwrap().to_owned());
            });
            f
        });
        self.tape().make_tensor(value, req, backward)
    }

    /// Mean over the two spatial axes of an NCHW tensor, keeping them as 1.
    pub fn spatial_mean(&self) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(x.ndim(), 4, "spatial_mean expects NCHW");
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let inv = T::from_usize(h * w).unwrap().recip();
        let value = Rc::new(
            x.sum_axis(Axis(3))
                .sum_axis(Axis(2))
                .insert_axis(Axis(2))
                .insert_axis(Axis(3))
                .mapv(|v| v * inv),
        );
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let shape = x.raw_dim();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let spread = g.broadcast(shape.clone()).unwrap().mapv(|v| v * inv);
                sink.add(id, spread);
            });
            f
        });
        self.tape().make_tensor(value, req, backward)
    }

    /// Per-pixel channel statistics of an NCHW tensor: output channel 0 is
    /// the mean over channels, channel 1 the max (first index wins ties).
    pub fn channel_mean_max(&self) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(x.ndim(), 4, "channel_mean_max expects NCHW");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = T::from_usize(c).unwrap().recip();
        let mut value = ArrayD::<T>::zeros(IxDyn(&[n, 2, h, w]));
        let mut argmax = vec![0usize; n * h * w];
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    let mut best = x[[b, 0, y, xx]];
                    let mut best_c = 0usize;
                    for ch in 0..c {
                        let v = x[[b, ch, y, xx]];
                        acc += v;
                        if v > best {
                            best = v;
                            best_c = ch;
                        }
                    }
                    value[[b, 0, y, xx]] = acc * inv;
                    value[[b, 1, y, xx]] = best;
                    argmax[(b * h + y) * w + xx] = best_c;
                }
            }
        }
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let shape = x.raw_dim();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut dx = ArrayD::<T>::zeros(shape.clone());
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let gm = g[[b, 0, y, xx]] * inv;
                            for ch in 0..c {
                                dx[[b, ch, y, xx]] += gm;
                            }
                            let mc = argmax[(b * h + y) * w + xx];
                            dx[[b, mc, y, xx]] += g[[b, 1, y, xx]];
                        }
                    }
                }
                sink.add(id, dx);
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Tensor<T> {
        let x = self.value_rc();
        let last = Axis(x.ndim() - 1);
        let mut y = (*x).clone();
        for mut lane in y.lanes_mut(last) {
            let maxv = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        let y = Rc::new(y);
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let yv = Rc::clone(&y);
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let last = Axis(yv.ndim() - 1);
                let gy = g * &*yv;
                let s = gy.sum_axis(last).insert_axis(last);
                let dx = gy - &*yv * &s;
                sink.add(id, dx);
            });
            f
        });
        self.tape().make_tensor(y, req, backward)
    }

    /// Row-major reshape to a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            x.shape()
        );
        let value = ArrayD::from_shape_vec(IxDyn(shape), x.iter().cloned().collect())
            .expect("element count checked");
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let orig = x.raw_dim();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let back = ArrayD::from_shape_vec(orig.clone(), g.iter().cloned().collect())
                    .expect("same element count");
                sink.add(id, back);
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// Axis permutation (inverse applied on the way back).
    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(axes.len(), x.ndim());
        let value = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                sink.add(id, back);
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape().clone();
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes");
        let req = parts.iter().any(|p| p.requires_grad());
        let backward = req.then(|| {
            let meta: Vec<(usize, bool, usize)> = parts
                .iter()
                .map(|p| (p.id(), p.requires_grad(), p.shape()[axis]))
                .collect();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut start = 0usize;
                for &(id, preq, width) in &meta {
                    if preq {
                        let part = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + width))
                            .to_owned();
                        sink.add(id, part);
                    }
                    start += width;
                }
            });
            f
        });
        tape.make_tensor(Rc::new(value), req, backward)
    }

    /// Pads the bottom and right spatial edges of an NCHW tensor by
    /// replicating the last row/column.
    pub fn pad_edge_bottom_right(&self, ph: usize, pw: usize) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(x.ndim(), 4, "pad expects NCHW");
        if ph == 0 && pw == 0 {
            return self.clone();
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let value = ArrayD::from_shape_fn(IxDyn(&[n, c, h + ph, w + pw]), |ix| {
            x[[ix[0], ix[1], ix[2].min(h - 1), ix[3].min(w - 1)]]
        });
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..h + ph {
                            for xx in 0..w + pw {
                                dx[[b, ch, y.min(h - 1), xx.min(w - 1)]] += g[[b, ch, y, xx]];
                            }
                        }
                    }
                }
                sink.add(id, dx);
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// Spatial crop of an NCHW tensor: rows `y0..y0+oh`, cols `x0..x0+ow`.
    pub fn crop_hw(&self, y0: usize, oh: usize, x0: usize, ow: usize) -> Tensor<T> {
        let x = self.value_rc();
        assert_eq!(x.ndim(), 4, "crop expects NCHW");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert!(y0 + oh <= h && x0 + ow <= w, "crop out of range");
        let value = x
            .slice(ndarray::s![.., .., y0..y0 + oh, x0..x0 + ow])
            .to_owned()
            .into_dyn();
        let req = self.requires_grad();
        let backward = req.then(|| {
            let id = self.id();
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
                dx.slice_mut(ndarray::s![.., .., y0..y0 + oh, x0..x0 + ow])
                    .assign(g);
                sink.add(id, dx);
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// 2-D matrix product with optional transposes: `op(self) . op(rhs)`.
    pub fn matmul2(&self, rhs: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
        debug_assert!(self.same_tape(rhs));
        let a = self.value_rc();
        let b = rhs.value_rc();
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 2);
        let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let av = if ta { a2.t() } else { a2.view() };
        let bv = if tb { b2.t() } else { b2.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul2 inner dims");
        let value = av.dot(&bv).into_dyn();
        let req = self.requires_grad() || rhs.requires_grad();
        let backward = req.then(|| {
            let (aid, bid) = (self.id(), rhs.id());
            let (areq, breq) = (self.requires_grad(), rhs.requires_grad());
            let (ar, br) = (Rc::clone(&a), Rc::clone(&b));
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a2 = ar.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = br.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let av = if ta { a2.t() } else { a2.view() };
                let bv = if tb { b2.t() } else { b2.view() };
                if areq {
                    // d(op_a(A)) = G . op_b(B)^T, undone through the transpose.
                    let da_eff = g2.dot(&bv.t());
                    let da = if ta { da_eff.t().to_owned() } else { da_eff };
                    sink.add(aid, da.into_dyn());
                }
                if breq {
                    let db_eff = av.t().dot(&g2);
                    let db = if tb { db_eff.t().to_owned() } else { db_eff };
                    sink.add(bid, db.into_dyn());
                }
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }

    /// Batched matrix product on rank-4 tensors `(b0, b1, m, k)`, with
    /// optional transposes of the trailing two axes.
    pub fn bmm(&self, rhs: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
        debug_assert!(self.same_tape(rhs));
        let a = self.value_rc();
        let b = rhs.value_rc();
        assert_eq!(a.ndim(), 4);
        assert_eq!(b.ndim(), 4);
        assert_eq!(a.shape()[0], b.shape()[0]);
        assert_eq!(a.shape()[1], b.shape()[1]);
        let (b0, b1) = (a.shape()[0], a.shape()[1]);
        let (am, ak) = if ta {
            (a.shape()[3], a.shape()[2])
        } else {
            (a.shape()[2], a.shape()[3])
        };
        let (bk, bn) = if tb {
            (b.shape()[3], b.shape()[2])
        } else {
            (b.shape()[2], b.shape()[3])
        };
        assert_eq!(ak, bk, "bmm inner dims");
        let mut value = ArrayD::<T>::zeros(IxDyn(&[b0, b1, am, bn]));
        for i in 0..b0 {
            for j in 0..b1 {
                let a2 = a
                    .index_axis(Axis(0), i)
                    .index_axis_move(Axis(0), j)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let b2 = b
                    .index_axis(Axis(0), i)
                    .index_axis_move(Axis(0), j)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let av = if ta { a2.t() } else { a2.view() };
                let bv = if tb { b2.t() } else { b2.view() };
                let prod = av.dot(&bv);
                value
                    .index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), j)
                    .assign(&prod);
            }
        }
        let req = self.requires_grad() || rhs.requires_grad();
        let backward = req.then(|| {
            let (aid, bid) = (self.id(), rhs.id());
            let (areq, breq) = (self.requires_grad(), rhs.requires_grad());
            let (ar, br) = (Rc::clone(&a), Rc::clone(&b));
            let f: super::BackwardFn<T> = Box::new(move |g, sink| {
                let mut da = areq.then(|| ArrayD::<T>::zeros(ar.raw_dim()));
                let mut db = breq.then(|| ArrayD::<T>::zeros(br.raw_dim()));
                for i in 0..b0 {
                    for j in 0..b1 {
                        let g2 = g
                            .index_axis(Axis(0), i)
                            .index_axis_move(Axis(0), j)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let a2 = ar
                            .index_axis(Axis(0), i)
                            .index_axis_move(Axis(0), j)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let b2 = br
                            .index_axis(Axis(0), i)
                            .index_axis_move(Axis(0), j)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let av = if ta { a2.t() } else { a2.view() };
                        let bv = if tb { b2.t() } else { b2.view() };
                        if let Some(da) = da.as_mut() {
                            let da_eff = g2.dot(&bv.t());
                            let part = if ta { da_eff.t().to_owned() } else { da_eff };
                            da.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), j)
                                .assign(&part);
                        }
                        if let Some(db) = db.as_mut() {
                            let db_eff = av.t().dot(&g2);
                            let part = if tb { db_eff.t().to_owned() } else { db_eff };
                            db.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), j)
                                .assign(&part);
                        }
                    }
                }
                if let Some(da) = da {
                    sink.add(aid, da);
                }
                if let Some(db) = db {
                    sink.add(bid, db);
                }
            });
            f
        });
        self.tape().make_tensor(Rc::new(value), req, backward)
    }
}
