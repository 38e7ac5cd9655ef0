//! Minimal reverse-mode automatic differentiation engine.
//!
//! A [`Tensor`] is a dense n-dimensional `f64` array together with an
//! optional gradient buffer. Applying an operation records the inputs and a
//! backward closure on the output node, so a later [`Tensor::backward`] call
//! can replay the chain rule in reverse topological order. Everything is
//! single-threaded and allocation order is fixed, which makes forward values
//! and gradients bit-reproducible for a given seed.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch at dim {dim}: {lhs} vs {rhs}")]
    DimMismatch {
        op: &'static str,
        dim: usize,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("batch norm in eval mode requires running statistics")]
    MissingRunningStats,
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn = Box<dyn FnOnce(&Node)>;

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense real array with an optional gradient accumulator.
///
/// Cloning a `Tensor` clones the handle, not the storage; all clones share
/// the same node. This is what lets model parameters live both in a named
/// registry and inside layer structs.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with graph recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape, vec![0.0; n], false)
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape, vec![v; n], false)
    }

    /// Leaf with `requires_grad` set; gradients accumulate here on backward.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Self::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn with_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                data,
                shape,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Records an op output. Parents and the backward closure are kept only
    /// when grad recording is on and some input participates in a graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.wants_grad());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                data,
                shape,
                grad: None,
                requires_grad: false,
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the stored values in place. Shape must match.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if n.data.len() != data.len() {
            return Err(TensorError::BadShape {
                shape: n.shape.clone(),
                len: data.len(),
            });
        }
        n.data.copy_from_slice(data);
        Ok(())
    }

    /// A grad-free copy of the values (cuts the graph).
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::leaf(n.shape.clone(), n.data.clone(), false)
    }

    fn wants_grad(&self) -> bool {
        let n = self.inner.borrow();
        n.requires_grad || !n.parents.is_empty()
    }

    pub(crate) fn accum_grad(&self, delta: &[f64]) {
        if !self.wants_grad() {
            return;
        }
        let mut n = self.inner.borrow_mut();
        let g = n.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Like `accum_grad` but hands the buffer to a closure so ops can scatter
    /// without building a temporary.
    pub(crate) fn accum_grad_with(&self, len: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants_grad() {
            return;
        }
        let mut n = self.inner.borrow_mut();
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(g.len(), len);
        f(g);
    }

    fn ptr(&self) -> *const Node {
        self.inner.as_ptr()
    }

    /// Reverse-mode sweep from a scalar output. Each recorded node is visited
    /// exactly once; interior gradients and graph edges are released as soon
    /// as they have been consumed, so peak memory is the forward data plus
    /// the gradient frontier.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape()));
        }
        let order = self.topo_order();
        self.inner.borrow_mut().grad = Some(vec![1.0]);
        for t in order.iter().rev() {
            let bw = t.inner.borrow_mut().backward.take();
            if let Some(f) = bw {
                let has_grad = t.inner.borrow().grad.is_some();
                if has_grad {
                    f(&t.inner.borrow());
                }
            }
            let mut n = t.inner.borrow_mut();
            if !n.requires_grad {
                n.grad = None;
            }
            n.parents.clear();
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        visited.insert(self.ptr());
        stack.push((self.clone(), 0));
        while let Some((node, idx)) = stack.pop() {
            let parent = node.inner.borrow().parents.get(idx).cloned();
            match parent {
                Some(p) => {
                    stack.push((node, idx + 1));
                    if visited.insert(p.ptr()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            n.shape,
            n.requires_grad,
            if n.grad.is_some() { "yes" } else { "no" }
        )
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives. Layer-level ops live in `ops`.
// ---------------------------------------------------------------------------

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.len() != sb.len() {
        return Err(TensorError::RankMismatch {
            op,
            expected: sa.len(),
            got: sb,
        });
    }
    for (d, (x, y)) in sa.iter().zip(sb.iter()).enumerate() {
        if x != y {
            return Err(TensorError::DimMismatch {
                op,
                dim: d,
                lhs: *x,
                rhs: *y,
            });
        }
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                pa.accum_grad(g);
                pb.accum_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                pa.accum_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accum_grad(&neg);
            }),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                {
                    let bd = pb.data();
                    let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, b)| gi * b).collect();
                    drop(bd);
                    pa.accum_grad(&da);
                }
                {
                    let ad = pa.data();
                    let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, a)| gi * a).collect();
                    drop(ad);
                    pb.accum_grad(&db);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accum_grad(&d);
            }),
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                let xd = p.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xd.iter().zip(out.data.iter()))
                    .map(|(gi, (&x, &y))| gi * dfdx(x, y))
                    .collect();
                drop(xd);
                p.accum_grad(&d);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh_act(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation. The forward tanh values are kept for the
    /// backward pass instead of being recomputed.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.data();
        let n = x.len();
        let mut y = vec![0.0; n];
        let mut tanh_u = vec![0.0; n];
        for i in 0..n {
            let xi = x[i];
            let t = (C * (xi + A * xi * xi * xi)).tanh();
            tanh_u[i] = t;
            y[i] = 0.5 * xi * (1.0 + t);
        }
        drop(x);
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            y,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap();
                let mut d = vec![0.0; tanh_u.len()];
                {
                    let xd = p.data();
                    for i in 0..d.len() {
                        let (xi, t) = (xd[i], tanh_u[i]);
                        d[i] = g[i]
                            * (0.5 * (1.0 + t)
                                + 0.5 * xi * (1.0 - t * t) * C * (1.0 + 3.0 * A * xi * xi));
                    }
                }
                p.accum_grad(&d);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.unary(
            move |x| x.max(lo),
            move |x, _| if x > lo { 1.0 } else { 0.0 },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap()[0];
                p.accum_grad_with(n, |buf| {
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.grad.as_ref().unwrap()[0] / n as f64;
                p.accum_grad_with(n, |buf| {
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                });
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward() {
        let a = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::param(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let s = a.add(&b).unwrap().sum_all();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mul_gradients() {
        let a = Tensor::param(vec![2], vec![2.0, -3.0]).unwrap();
        let b = Tensor::param(vec![2], vec![5.0, 7.0]).unwrap();
        let s = a.mul(&b).unwrap().sum_all();
        s.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn reused_input_accumulates() {
        // y = x*x + x => dy/dx = 2x + 1
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(
            y.backward(),
            Err(TensorError::NonScalarBackward(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dim 1"), "{msg}");
        assert!(msg.contains("3 vs 4"), "{msg}");
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(3.0).sum_all());
        assert!(y.backward().is_ok());
        assert!(x.grad().is_none());
    }

    #[test]
    fn mean_all_scales_gradient() {
        let x = Tensor::param(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = x.mean_all();
        assert_eq!(m.item(), 2.5);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
