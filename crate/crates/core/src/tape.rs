//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a define-by-run graph of f64 tensor operations. Calling
//! [`Tape::backward`] on a scalar node accumulates gradients for every
//! recorded node that was created with [`Tape::var`]; nodes created with
//! [`Tape::constant`] are treated as frozen and never receive gradients,
//! which also prunes their entire backward computation.
//!
//! The op set is deliberately small: elementwise arithmetic with NumPy-style
//! broadcasting, reductions, 2-D matmul, shape surgery, 1-D/2-D convolution,
//! and a symmetric eigendecomposition with a custom backward rule. That is
//! exactly what the generator, the denoiser, and the loss terms need.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use crate::linalg;

type BackFn = Box<dyn Fn(&[ArrayD<f64>], &ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

struct Inner {
    values: Vec<ArrayD<f64>>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<BackFn>>,
}

/// A recording tape. Create nodes with [`Tape::var`] / [`Tape::constant`],
/// combine them through [`Var`] methods, then call [`Tape::backward`].
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`]. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` was on the
    /// path and required gradients.
    pub fn wrt(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                needs_grad: Vec::new(),
                backs: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.needs_grad.push(needs_grad);
        inner.backs.push(back);
        Var {
            tape: self,
            idx: inner.values.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, true, None)
    }

    /// A frozen leaf. Gradients never flow into it and subgraphs that depend
    /// only on constants are skipped during backward.
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, false, None)
    }

    /// Accumulate gradients of the scalar node `root` with respect to every
    /// differentiable node.
    ///
    /// Panics if `root` is not 0-dimensional.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[root.idx].ndim(),
            0,
            "backward root must be a scalar node"
        );
        let n = root.idx + 1;
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.idx] = Some(ArrayD::ones(IxDyn(&[])));
        for i in (0..n).rev() {
            if inner.backs[i].is_none() || grads[i].is_none() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let upstream = upper[0].as_ref().expect("grad present");
            (inner.backs[i].as_ref().expect("back fn present"))(&inner.values, upstream, lower);
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, contribution: ArrayD<f64>) {
    match slot {
        Some(g) => *g += &contribution,
        None => *slot = Some(contribution),
    }
}

/// NumPy-style broadcast shape of two shapes, right-aligned.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} and {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `target` shape, undoing broadcasting.
fn reduce_to_shape(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = grad.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if out.shape()[ax] != target[ax] {
            debug_assert_eq!(target[ax], 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn broadcast_view<'a>(a: &'a ArrayD<f64>, shape: &[usize]) -> ArrayViewD<'a, f64> {
    a.broadcast(IxDyn(shape))
        .expect("broadcast checked by broadcast_shape")
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    /// Clone the node's current value off the tape.
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    /// Value of a 0-dimensional node as a plain f64.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let v = &inner.values[self.idx];
        debug_assert_eq!(v.ndim(), 0);
        *v.first().expect("scalar node")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.idx].shape().to_vec()
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().needs_grad[self.idx]
    }

    fn binary(
        &self,
        other: Var<'t>,
        forward: impl Fn(&ArrayViewD<f64>, &ArrayViewD<f64>) -> ArrayD<f64>,
        back_a: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
        back_b: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var<'t> {
        let (a, b) = (self.idx, other.idx);
        let inner = self.tape.inner.borrow();
        let sh = broadcast_shape(inner.values[a].shape(), inner.values[b].shape());
        let out = forward(
            &broadcast_view(&inner.values[a], &sh),
            &broadcast_view(&inner.values[b], &sh),
        );
        let na = inner.needs_grad[a];
        let nb = inner.needs_grad[b];
        drop(inner);
        let needs = na || nb;
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                if na {
                    let full = back_a(upstream, &values[a], &values[b]);
                    accumulate(&mut grads[a], reduce_to_shape(&full, values[a].shape()));
                }
                if nb {
                    let full = back_b(upstream, &values[a], &values[b]);
                    accumulate(&mut grads[b], reduce_to_shape(&full, values[b].shape()));
                }
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a + b,
            |g, _, _| g.clone(),
            |g, _, _| g.clone(),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a - b,
            |g, _, _| g.clone(),
            |g, _, _| -g.clone(),
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a * b,
            |g, _, vb| {
                let sh = broadcast_shape(g.shape(), vb.shape());
                g * &broadcast_view(vb, &sh)
            },
            |g, va, _| {
                let sh = broadcast_shape(g.shape(), va.shape());
                g * &broadcast_view(va, &sh)
            },
        )
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a / b,
            |g, _, vb| {
                let sh = broadcast_shape(g.shape(), vb.shape());
                g / &broadcast_view(vb, &sh)
            },
            |g, va, vb| {
                let sh = broadcast_shape(g.shape(), va.shape());
                let sh = broadcast_shape(&sh, vb.shape());
                let a = broadcast_view(va, &sh);
                let b = broadcast_view(vb, &sh);
                let mut out = g * &a;
                out.zip_mut_with(&(&b * &b).view(), |x, d| *x = -*x / d);
                out
            },
        )
    }

    fn unary(
        &self,
        forward: impl Fn(f64) -> f64,
        // derivative as a function of (input, output)
        derivative: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let out = inner.values[a].mapv(forward);
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            let cached = self.tape.inner.borrow().values[a].clone();
            let out_cache = out.clone();
            Some(Box::new(move |_, upstream, grads| {
                let mut contribution = upstream.clone();
                ndarray::Zip::from(&mut contribution)
                    .and(&cached)
                    .and(&out_cache)
                    .for_each(|g, &x, &y| *g *= derivative(x, y));
                accumulate(&mut grads[a], contribution);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// x * sigmoid(x); the smooth activation used by the denoiser and the
    /// feature extractors.
    pub fn silu(&self) -> Var<'t> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powi(&self, n: i32) -> Var<'t> {
        self.unary(move |x| x.powi(n), move |x, _| f64::from(n) * x.powi(n - 1))
    }

    /// Elementwise max(x, c). Gradient passes only where x > c, which makes
    /// it usable as a differentiable floor.
    pub fn maximum_scalar(&self, c: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(c),
            move |x, _| if x > c { 1.0 } else { 0.0 },
        )
    }

    pub fn sum_all(&self) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let s = inner.values[a].sum();
        let shape = inner.values[a].shape().to_vec();
        let needs = inner.needs_grad[a];
        drop(inner);
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |_, upstream, grads| {
                let g = *upstream.first().expect("scalar upstream");
                accumulate(&mut grads[a], ArrayD::from_elem(IxDyn(&shape), g));
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.shape().iter().product::<usize>().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let out = inner.values[a].sum_axis(Axis(axis));
        let len = inner.values[a].shape()[axis];
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                let expanded = upstream.clone().insert_axis(Axis(axis));
                let full = expanded
                    .broadcast(values[a].raw_dim())
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                let _ = len;
                accumulate(&mut grads[a], full);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'t> {
        let len = self.shape()[axis];
        self.sum_axis(axis).mul_scalar(1.0 / len as f64)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.idx, other.idx);
        let inner = self.tape.inner.borrow();
        let va = inner.values[a]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-D");
        let vb = inner.values[b]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-D");
        let out = va.dot(&vb).into_dyn();
        let na = inner.needs_grad[a];
        let nb = inner.needs_grad[b];
        drop(inner);
        let needs = na || nb;
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                let g = upstream
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("matmul upstream 2-D");
                if na {
                    let vb = values[b]
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-D");
                    accumulate(&mut grads[a], g.dot(&vb.t()).into_dyn());
                }
                if nb {
                    let va = values[a]
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-D");
                    accumulate(&mut grads[b], va.t().dot(&g).into_dyn());
                }
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    /// Transpose of a 2-D node.
    pub fn t2(&self) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let out = inner.values[a].t().to_owned();
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |_, upstream, grads| {
                accumulate(&mut grads[a], upstream.t().to_owned());
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let a = self.idx;
        let target = shape.to_vec();
        let inner = self.tape.inner.borrow();
        let orig = inner.values[a].shape().to_vec();
        let out = inner.values[a]
            .clone()
            .into_shape_clone(IxDyn(&target))
            .expect("reshape size mismatch");
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |_, upstream, grads| {
                let g = upstream
                    .clone()
                    .into_shape_clone(IxDyn(&orig))
                    .expect("reshape backward");
                accumulate(&mut grads[a], g);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let out = inner.values[a]
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                let mut full = ArrayD::zeros(values[a].raw_dim());
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(upstream);
                accumulate(&mut grads[a], full);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    /// Gather the given indices along `axis` (duplicates allowed).
    pub fn select(&self, axis: usize, indices: &[usize]) -> Var<'t> {
        let a = self.idx;
        let idxs = indices.to_vec();
        let inner = self.tape.inner.borrow();
        let out = inner.values[a].select(Axis(axis), &idxs);
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                let mut full = ArrayD::zeros(values[a].raw_dim());
                for (pos, &src) in idxs.iter().enumerate() {
                    let g = upstream.index_axis(Axis(axis), pos);
                    let mut dst = full.index_axis_mut(Axis(axis), src);
                    dst += &g;
                }
                accumulate(&mut grads[a], full);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }

    /// Nearest-neighbour upsampling of the last axis by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Var<'t> {
        let a = self.idx;
        let inner = self.tape.inner.borrow();
        let v = &inner.values[a];
        let last = v.ndim() - 1;
        let mut shape = v.shape().to_vec();
        let in_len = shape[last];
        shape[last] = in_len * factor;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (mut lane_out, lane_in) in out
            .lanes_mut(Axis(last))
            .into_iter()
            .zip(v.lanes(Axis(last)))
        {
            for i in 0..in_len * factor {
                lane_out[i] = lane_in[i / factor];
            }
        }
        let needs = inner.needs_grad[a];
        drop(inner);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |values, upstream, grads| {
                let mut full = ArrayD::zeros(values[a].raw_dim());
                let last = full.ndim() - 1;
                for (mut lane_g, lane_up) in full
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(upstream.lanes(Axis(last)))
                {
                    for i in 0..lane_up.len() {
                        lane_g[i / factor] += lane_up[i];
                    }
                }
                accumulate(&mut grads[a], full);
            }))
        } else {
            None
        };
        self.tape.push(out, needs, back)
    }
}

/// Concatenate nodes along `axis`.
pub fn concat<'t>(tape: &'t Tape, axis: usize, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let inner = tape.inner.borrow();
    let views: Vec<ArrayViewD<f64>> = idxs.iter().map(|&i| inner.values[i].view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let lens: Vec<usize> = idxs.iter().map(|&i| inner.values[i].shape()[axis]).collect();
    let needs_each: Vec<bool> = idxs.iter().map(|&i| inner.needs_grad[i]).collect();
    let needs = needs_each.iter().any(|&n| n);
    drop(inner);
    let back: Option<BackFn> = if needs {
        Some(Box::new(move |_, upstream, grads| {
            let mut offset = 0usize;
            for (pos, &i) in idxs.iter().enumerate() {
                let len = lens[pos];
                if needs_each[pos] {
                    let g = upstream
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    accumulate(&mut grads[i], g);
                }
                offset += len;
            }
        }))
    } else {
        None
    };
    tape.push(out, needs, back)
}

fn conv1d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    debug_assert_eq!(_wcin, cin);
    let lout = (len + 2 * pad - k) / stride + 1;
    let mut out = ArrayD::zeros(IxDyn(&[batch, cout, lout]));
    for b in 0..batch {
        for co in 0..cout {
            for lo in 0..lout {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for kk in 0..k {
                        let li = lo * stride + kk;
                        if li < pad || li - pad >= len {
                            continue;
                        }
                        acc += x[[b, ci, li - pad]] * w[[co, ci, kk]];
                    }
                }
                out[[b, co, lo]] = acc;
            }
        }
    }
    out
}

/// 1-D convolution: input (B, Cin, L), weight (Cout, Cin, K), bias (Cout).
/// Zero padding on both ends.
pub fn conv1d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    stride: usize,
    pad: usize,
) -> Var<'t> {
    let tape = x.tape;
    let (xi, wi, bi) = (x.idx, weight.idx, bias.idx);
    let inner = tape.inner.borrow();
    let out = conv1d_forward(&inner.values[xi], &inner.values[wi], &inner.values[bi], stride, pad);
    let (nx, nw, nb) = (
        inner.needs_grad[xi],
        inner.needs_grad[wi],
        inner.needs_grad[bi],
    );
    drop(inner);
    let needs = nx || nw || nb;
    let back: Option<BackFn> = if needs {
        Some(Box::new(move |values, upstream, grads| {
            let x = &values[xi];
            let w = &values[wi];
            let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let lout = upstream.shape()[2];
            if nx {
                let mut gx = ArrayD::zeros(x.raw_dim());
                for b in 0..batch {
                    for co in 0..cout {
                        for lo in 0..lout {
                            let g = upstream[[b, co, lo]];
                            for ci in 0..cin {
                                for kk in 0..k {
                                    let li = lo * stride + kk;
                                    if li < pad || li - pad >= len {
                                        continue;
                                    }
                                    gx[[b, ci, li - pad]] += g * w[[co, ci, kk]];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[xi], gx);
            }
            if nw {
                let mut gw = ArrayD::zeros(w.raw_dim());
                for b in 0..batch {
                    for co in 0..cout {
                        for lo in 0..lout {
                            let g = upstream[[b, co, lo]];
                            for ci in 0..cin {
                                for kk in 0..k {
                                    let li = lo * stride + kk;
                                    if li < pad || li - pad >= len {
                                        continue;
                                    }
                                    gw[[co, ci, kk]] += g * x[[b, ci, li - pad]];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[wi], gw);
            }
            if nb {
                let gb = upstream.sum_axis(Axis(2)).sum_axis(Axis(0));
                accumulate(&mut grads[bi], gb.into_dyn());
            }
        }))
    } else {
        None
    };
    tape.push(out, needs, back)
}

fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (batch, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (wid + 2 * pad - kw) / stride + 1;
    let mut out = ArrayD::zeros(IxDyn(&[batch, cout, hout, wout]));
    for b in 0..batch {
        for co in 0..cout {
            for ho in 0..hout {
                for wo in 0..wout {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let hi = ho * stride + ky;
                            if hi < pad || hi - pad >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let wi = wo * stride + kx;
                                if wi < pad || wi - pad >= wid {
                                    continue;
                                }
                                acc += x[[b, ci, hi - pad, wi - pad]] * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[b, co, ho, wo]] = acc;
                }
            }
        }
    }
    out
}

/// 2-D convolution: input (B, Cin, H, W), weight (Cout, Cin, Kh, Kw).
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
    stride: usize,
    pad: usize,
) -> Var<'t> {
    let tape = x.tape;
    let (xi, wi, bi) = (x.idx, weight.idx, bias.idx);
    let inner = tape.inner.borrow();
    let out = conv2d_forward(&inner.values[xi], &inner.values[wi], &inner.values[bi], stride, pad);
    let (nx, nw, nb) = (
        inner.needs_grad[xi],
        inner.needs_grad[wi],
        inner.needs_grad[bi],
    );
    drop(inner);
    let needs = nx || nw || nb;
    let back: Option<BackFn> = if needs {
        Some(Box::new(move |values, upstream, grads| {
            let x = &values[xi];
            let w = &values[wi];
            let (batch, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let (hout, wout) = (upstream.shape()[2], upstream.shape()[3]);
            if nx {
                let mut gx = ArrayD::zeros(x.raw_dim());
                for b in 0..batch {
                    for co in 0..cout {
                        for ho in 0..hout {
                            for wo in 0..wout {
                                let g = upstream[[b, co, ho, wo]];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let hi = ho * stride + ky;
                                        if hi < pad || hi - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let wi2 = wo * stride + kx;
                                            if wi2 < pad || wi2 - pad >= wid {
                                                continue;
                                            }
                                            gx[[b, ci, hi - pad, wi2 - pad]] +=
                                                g * w[[co, ci, ky, kx]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[xi], gx);
            }
            if nw {
                let mut gw = ArrayD::zeros(w.raw_dim());
                for b in 0..batch {
                    for co in 0..cout {
                        for ho in 0..hout {
                            for wo in 0..wout {
                                let g = upstream[[b, co, ho, wo]];
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let hi = ho * stride + ky;
                                        if hi < pad || hi - pad >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let wi2 = wo * stride + kx;
                                            if wi2 < pad || wi2 - pad >= wid {
                                                continue;
                                            }
                                            gw[[co, ci, ky, kx]] +=
                                                g * x[[b, ci, hi - pad, wi2 - pad]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[wi], gw);
            }
            if nb {
                let gb = upstream
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0));
                accumulate(&mut grads[bi], gb.into_dyn());
            }
        }))
    } else {
        None
    };
    tape.push(out, needs, back)
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvectors as columns. The backward rule is the standard symmetric
/// eigendecomposition adjoint; couplings between (near-)degenerate
/// eigenvalues are dropped, so gradients are only trustworthy away from
/// repeated eigenvalues.
pub fn eigh_sym<'t>(input: Var<'t>) -> (Var<'t>, Var<'t>) {
    let tape = input.tape;
    let ai = input.idx;
    let inner = tape.inner.borrow();
    let m = inner.values[ai]
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("eigh input must be 2-D");
    let (evals, evecs) = linalg::eigh_jacobi(&m.to_owned());
    let needs = inner.needs_grad[ai];
    drop(inner);
    let n = evals.len();
    let shared = Rc::new((evals.clone(), evecs.clone()));

    let back_vals: Option<BackFn> = if needs {
        let cache = Rc::clone(&shared);
        Some(Box::new(move |_, upstream, grads| {
            let (_, u) = &*cache;
            // dA = U diag(g_lambda) U^T
            let mut scaled = u.clone();
            for (j, mut col) in scaled.axis_iter_mut(Axis(1)).enumerate() {
                col *= upstream[j];
            }
            let da = scaled.dot(&u.t());
            accumulate(&mut grads[ai], da.into_dyn());
        }))
    } else {
        None
    };
    let vals_var = tape.push(evals.into_dyn(), needs, back_vals);

    let back_vecs: Option<BackFn> = if needs {
        let cache = Rc::clone(&shared);
        Some(Box::new(move |_, upstream, grads| {
            let (lam, u) = &*cache;
            let gu = upstream
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("eigvec grad 2-D");
            let mut f = u.t().dot(&gu);
            for i in 0..n {
                for j in 0..n {
                    let gap = lam[j] - lam[i];
                    if i == j || gap.abs() < 1e-9 {
                        f[[i, j]] = 0.0;
                    } else {
                        f[[i, j]] /= gap;
                    }
                }
            }
            let da = u.dot(&f).dot(&u.t());
            // symmetrize: input is symmetric by construction
            let das = (&da + &da.t()).mapv(|x| 0.5 * x);
            accumulate(&mut grads[ai], das.into_dyn());
        }))
    } else {
        None
    };
    let vecs_var = tape.push(shared.1.clone().into_dyn(), needs, back_vecs);
    (vals_var, vecs_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// Central finite-difference check of `loss` at `points`, comparing the
    /// analytic gradient of the recorded graph against numeric estimates.
    fn gradcheck(
        build: impl Fn(&Tape, &[ArrayD<f64>]) -> usize,
        inputs: &[ArrayD<f64>],
        eps: f64,
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let root_idx = build(&tape, inputs);
        let root = Var { tape: &tape, idx: root_idx };
        let grads = tape.backward(root);
        for (vi, input) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[vi]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for (flat, _) in input.iter().enumerate() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[flat] += eps;
                minus[vi].as_slice_mut().unwrap()[flat] -= eps;
                let f = |ins: &[ArrayD<f64>]| -> f64 {
                    let t = Tape::new();
                    let idx = build(&t, ins);
                    Var { tape: &t, idx }.scalar_value()
                };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
                let analytic = g.as_slice().unwrap()[flat];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < tol,
                    "grad mismatch input {vi} flat {flat}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    fn rand_array(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_broadcast_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4], &mut rng);
        gradcheck(
            |t, ins| {
                let a = t.var(ins[0].clone());
                let b = t.var(ins[1].clone());
                a.mul(b).add(a).sum_all().index()
            },
            &[a, b],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn div_and_unary_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = rand_array(&[2, 3], &mut rng).mapv(|x| x + 2.0);
        let b = rand_array(&[2, 3], &mut rng).mapv(|x| x + 3.0);
        gradcheck(
            |t, ins| {
                let a = t.var(ins[0].clone());
                let b = t.var(ins[1].clone());
                let r = a.div(b).tanh().exp().sqrt().ln();
                r.mul(r.sigmoid()).mean_all().index()
            },
            &[a, b],
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn matmul_reshape_narrow_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4, 5], &mut rng);
        gradcheck(
            |t, ins| {
                let a = t.var(ins[0].clone());
                let b = t.var(ins[1].clone());
                let c = a.matmul(b); // 3x5
                let sl = c.narrow(1, 1, 3); // 3x3
                sl.t2().reshape(&[9]).square().sum_all().index()
            },
            &[a, b],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn select_concat_upsample_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let a = rand_array(&[2, 3, 4], &mut rng);
        gradcheck(
            |t, ins| {
                let a = t.var(ins[0].clone());
                let g = a.select(0, &[1, 0, 1]);
                let up = g.upsample_nearest(2);
                let c = concat(t, 1, &[up, up]);
                c.silu().sum_all().index()
            },
            &[a],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn conv1d_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = rand_array(&[2, 3, 6], &mut rng);
        let w = rand_array(&[4, 3, 3], &mut rng);
        let b = rand_array(&[4], &mut rng);
        gradcheck(
            |t, ins| {
                let x = t.var(ins[0].clone());
                let w = t.var(ins[1].clone());
                let b = t.var(ins[2].clone());
                conv1d(x, w, b, 2, 1).square().sum_all().index()
            },
            &[x, w, b],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = rand_array(&[1, 2, 5, 5], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        gradcheck(
            |t, ins| {
                let x = t.var(ins[0].clone());
                let w = t.var(ins[1].clone());
                let b = t.var(ins[2].clone());
                conv2d(x, w, b, 2, 1).tanh().sum_all().index()
            },
            &[x, w, b],
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn eigh_grads_through_gram_matrix() {
        // f(D) built from the eigendecomposition of D D^T must match finite
        // differences; eigenvalue gaps are generic for random input.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let d = rand_array(&[4, 6], &mut rng);
        gradcheck(
            |t, ins| {
                let d = t.var(ins[0].clone());
                let gram = d.matmul(d.t2());
                let (vals, vecs) = eigh_sym(gram);
                let weights = t.constant(arr1(&[0.3, -0.7, 1.1, 0.4]).into_dyn());
                let vec_part = vecs.square().matmul(weights.reshape(&[4, 1])).sum_all();
                vals.sqrt().sum_all().add(vec_part).index()
            },
            &[d],
            1e-6,
            2e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.var(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let c = tape.constant(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let loss = a.mul(c).sum_all();
        let grads = tape.backward(loss);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(a).unwrap(), &c.value());
    }

    #[test]
    fn maximum_scalar_floors_and_gates_gradient() {
        let tape = Tape::new();
        let a = tape.var(arr1(&[-1.0, 0.5, 2.0]).into_dyn());
        let out = a.maximum_scalar(0.0);
        assert_eq!(out.value(), arr1(&[0.0, 0.5, 2.0]).into_dyn());
        let grads = tape.backward(out.sum_all());
        assert_eq!(grads.wrt(a).unwrap(), &arr1(&[0.0, 1.0, 1.0]).into_dyn());
    }

    #[test]
    fn backward_seeds_scalar_root() {
        let tape = Tape::new();
        let a = tape.var(arr0(3.0).into_dyn());
        let out = a.square();
        let grads = tape.backward(out);
        assert_eq!(grads.wrt(a).unwrap(), &arr0(6.0).into_dyn());
    }
}
