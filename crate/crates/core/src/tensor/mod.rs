//! Reverse-mode automatic differentiation over `ndarray` f64 tensors.
//!
//! A [`Graph`] is a tape of nodes; each op pushes its output value plus a
//! backward closure. [`Var`] is a cheap handle (graph + node id). Gradients
//! are computed by a single reverse sweep from a scalar loss; node ids are
//! already a topological order because ops can only reference earlier nodes.
//!
//! Everything is f64. Graphs built with [`Graph::eval`] skip backward
//! closures entirely (inference mode).

mod gradcheck;
mod linalg;
mod params;
mod shape;

pub use gradcheck::{directional_fd, entrywise_fd, max_rel_err, rel_err};
pub use params::{xavier_uniform, ParamStore, Session};

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn};

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub back: Option<BackOp>,
}

/// Backward closure: receives the node's output gradient (via the context)
/// and sinks contributions into parent node ids it captured at build time.
pub(crate) type BackOp = BackFn;

pub(crate) struct BackCtx<'a> {
    pub nodes: &'a [Node],
    pub this: usize,
    pub grad: &'a ArrayD<f64>,
}

impl<'a> BackCtx<'a> {
    pub fn value(&self, id: usize) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn out(&self) -> &ArrayD<f64> {
        &self.nodes[self.this].value
    }
}

type BackFn = Box<dyn Fn(&BackCtx, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Handle on a tape of tensor operations.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Tape>>,
}

impl Graph {
    /// Gradient-recording graph.
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// Inference graph: values only, no backward closures.
    pub fn eval() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                grad_enabled: false,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf tensor (input or parameter).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Inserts a scalar leaf of shape [].
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    pub(crate) fn push(&self, value: ArrayD<f64>, back: Option<BackOp>) -> Var {
        let shape = value.shape().to_vec();
        let mut tape = self.inner.borrow_mut();
        let back = if tape.grad_enabled { back } else { None };
        tape.nodes.push(Node { value, back });
        Var {
            graph: self.clone(),
            id: tape.nodes.len() - 1,
            shape,
        }
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: &Var) -> Gradients {
        assert!(
            self.grad_enabled(),
            "backward on an inference graph"
        );
        assert_eq!(root.numel(), 1, "backward root must be a scalar");
        let tape = self.inner.borrow();
        let n = tape.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::ones(tape.nodes[root.id].value.raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(run) = tape.nodes[id].back.as_ref() else {
                continue;
            };
            // interior node grads are consumed exactly once
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackCtx {
                nodes: &tape.nodes,
                this: id,
                grad: &grad,
            };
            let mut sink = |parent: usize, contribution: ArrayD<f64>| {
                match &mut grads[parent] {
                    Some(acc) => *acc += &contribution,
                    slot => *slot = Some(contribution),
                }
            };
            run(&ctx, &mut sink);
        }
        Gradients { by_id: grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a backward sweep, indexed by node id.
pub struct Gradients {
    by_id: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&ArrayD<f64>> {
        self.by_id.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros when the loss does not depend on it.
    pub fn of(&self, var: &Var) -> ArrayD<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&var.shape)))
    }
}

/// Handle on one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Clones the value out of the tape.
    pub fn value(&self) -> ArrayD<f64> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        *self.graph.inner.borrow().nodes[self.id]
            .value
            .iter()
            .next()
            .unwrap()
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].value)
    }

    /// Re-inserts the value as a fresh leaf, cutting the gradient.
    pub fn detach(&self) -> Var {
        self.graph.leaf(self.value())
    }

    // ---- elementwise binary ops (NumPy-style broadcasting) ----

    pub fn add(&self, other: &Var) -> Var {
        binary(self, other, |a, b| a + b, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Var) -> Var {
        binary(self, other, |a, b| a - b, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Var) -> Var {
        binary(self, other, |a, b| a * b, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Var) -> Var {
        binary(self, other, |a, b| a / b, BinaryKind::Div)
    }

    // ---- scalar ops ----

    pub fn add_scalar(&self, c: f64) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a + c);
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, ctx.grad.clone()))),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a * c);
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, ctx.grad * c))),
        )
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    // ---- elementwise unary ops ----

    pub fn exp(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::exp));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, ctx.grad * ctx.out()))),
        )
    }

    pub fn ln(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::ln));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, ctx.grad / ctx.value(id)))),
        )
    }

    pub fn sqrt(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::sqrt));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| sink(id, 0.5 * ctx.grad / ctx.out()))),
        )
    }

    pub fn sin(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::sin));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, ctx.grad * &ctx.value(id).mapv(f64::cos))
                })),
        )
    }

    pub fn cos(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::cos));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, -(ctx.grad * &ctx.value(id).mapv(f64::sin)))
                })),
        )
    }

    pub fn tanh(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::tanh));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, ctx.grad * &ctx.out().mapv(|y| 1.0 - y * y))
                })),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, ctx.grad * &ctx.out().mapv(|y| y * (1.0 - y)))
                })),
        )
    }

    /// GELU, tanh approximation (the derivative matches the approximation).
    pub fn gelu(&self) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        let id = self.id;
        let value = self.with_value(|a| {
            a.mapv(|x| 0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh()))
        });
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let d = ctx.value(id).mapv(|x| {
                        let t = (K * (x + C * x * x * x)).tanh();
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x)
                    });
                    sink(id, ctx.grad * &d)
                })),
        )
    }

    /// SiLU: x * sigmoid(x).
    pub fn silu(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(|x| x / (1.0 + (-x).exp())));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let d = ctx.value(id).mapv(|x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        s * (1.0 + x * (1.0 - s))
                    });
                    sink(id, ctx.grad * &d)
                })),
        )
    }

    pub fn abs(&self) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(f64::abs));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, ctx.grad * &ctx.value(id).mapv(f64::signum))
                })),
        )
    }

    /// Clamp with zero gradient outside [lo, hi].
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let id = self.id;
        let value = self.with_value(|a| a.mapv(|x| x.clamp(lo, hi)));
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let mask = ctx.value(id).mapv(|x| f64::from(x >= lo && x <= hi));
                    sink(id, ctx.grad * &mask)
                })),
        )
    }

    /// Elementwise Huber: x^2/2 for |x| <= delta, else delta*(|x| - delta/2).
    pub fn huber(&self, delta: f64) -> Var {
        assert!(delta > 0.0, "huber delta must be positive");
        let id = self.id;
        let value = self.with_value(|a| {
            a.mapv(|x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            })
        });
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    sink(id, ctx.grad * &ctx.value(id).mapv(|x| x.clamp(-delta, delta)))
                })),
        )
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var {
        let id = self.id;
        let shape = self.shape.clone();
        let value = self.with_value(|a| ndarray::arr0(a.sum()).into_dyn());
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let g = *ctx.grad.iter().next().unwrap();
                    sink(id, ArrayD::from_elem(IxDyn(&shape), g))
                })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over one axis, keeping it as size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let id = self.id;
        let shape = self.shape.clone();
        let value = self.with_value(|a| {
            let mut v = a.sum_axis(Axis(axis));
            v.insert_axis_inplace(Axis(axis));
            v
        });
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let g = ctx
                        .grad
                        .broadcast(IxDyn(&shape))
                        .expect("keepdims grad broadcasts to parent")
                        .to_owned();
                    sink(id, g)
                })),
        )
    }

    /// Mean over one axis, keeping it as size 1.
    pub fn mean_axis_keep(&self, axis: usize) -> Var {
        let n = self.shape[axis] as f64;
        self.sum_axis_keep(axis).mul_scalar(1.0 / n)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let id = self.id;
        let last = self.ndim() - 1;
        let value = self.with_value(|a| {
            let mut out = a.to_owned();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum: f64 = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out
        });
        self.graph.push(
            value,
            Some(Box::new(move |ctx, sink| {
                    let y = ctx.out();
                    let gy = ctx.grad * y;
                    let mut s = gy.sum_axis(Axis(last));
                    s.insert_axis_inplace(Axis(last));
                    let dx = y * &(ctx.grad - &s.broadcast(y.raw_dim()).unwrap());
                    sink(id, dx)
                })),
        )
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast {a:?} with {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `g` down to `target` shape (inverse of broadcasting).
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &t) in target.iter().enumerate() {
        if t == 1 && out.shape()[axis] > 1 {
            let mut s = out.sum_axis(Axis(axis));
            s.insert_axis_inplace(Axis(axis));
            out = s;
        }
    }
    out
}

fn binary(
    a: &Var,
    b: &Var,
    f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    kind: BinaryKind,
) -> Var {
    let out_shape = broadcast_shape(&a.shape, &b.shape);
    let (aid, bid) = (a.id, b.id);
    let (ashape, bshape) = (a.shape.clone(), b.shape.clone());
    let value = {
        let tape = a.graph.inner.borrow();
        let av = &tape.nodes[aid].value;
        let bv = &tape.nodes[bid].value;
        if ashape == bshape {
            f(av, bv)
        } else {
            let ab = av.broadcast(IxDyn(&out_shape)).expect("lhs broadcast");
            let bb = bv.broadcast(IxDyn(&out_shape)).expect("rhs broadcast");
            f(&ab.to_owned(), &bb.to_owned())
        }
    };
    let run: BackFn = match kind {
        BinaryKind::Add => Box::new(move |ctx, sink| {
            sink(aid, reduce_to_shape(ctx.grad, &ashape));
            sink(bid, reduce_to_shape(ctx.grad, &bshape));
        }),
        BinaryKind::Sub => Box::new(move |ctx, sink| {
            sink(aid, reduce_to_shape(ctx.grad, &ashape));
            sink(bid, reduce_to_shape(&(-ctx.grad), &bshape));
        }),
        BinaryKind::Mul => Box::new(move |ctx, sink| {
            let out_dim = ctx.grad.raw_dim();
            let av = ctx.value(aid).broadcast(out_dim.clone()).unwrap().to_owned();
            let bv = ctx.value(bid).broadcast(out_dim).unwrap().to_owned();
            sink(aid, reduce_to_shape(&(ctx.grad * &bv), &ashape));
            sink(bid, reduce_to_shape(&(ctx.grad * &av), &bshape));
        }),
        BinaryKind::Div => Box::new(move |ctx, sink| {
            let out_dim = ctx.grad.raw_dim();
            let av = ctx.value(aid).broadcast(out_dim.clone()).unwrap().to_owned();
            let bv = ctx.value(bid).broadcast(out_dim).unwrap().to_owned();
            sink(aid, reduce_to_shape(&(ctx.grad / &bv), &ashape));
            let gb = ctx.grad * &av / &(&bv * &bv);
            sink(bid, reduce_to_shape(&(-gb), &bshape));
        }),
    };
    a.graph.push(value, Some(run))
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}

impl std::ops::Div for &Var {
    type Output = Var;
    fn div(self, rhs: &Var) -> Var {
        Var::div(self, rhs)
    }
}

impl std::ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}
