//! Arena tape and differentiable handles.
//!
//! Every backward pass records its own adjoint computations on the tape, so a
//! gradient is itself a differentiable [`Var`] and can be differentiated again.

use std::cell::RefCell;
use std::rc::Rc;

use super::{AdError, Array};
use crate::logistic;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    ScalarMul(usize, usize),
    ScalarAdd(usize, usize),
    Expand(usize),
    MatVec(usize, usize),
    VecMat(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Outer(usize, usize),
    Dot(usize, usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    SigmoidPrime(usize),
    Tanh(usize),
    Square(usize),
    Sqrt(usize),
    Logistic(usize),
    LogisticPrime(usize),
    Sum(usize),
    RowLogSumExp(usize),
    RowSum(usize),
    ColSum(usize),
    ExpandCols(usize),
    ExpandRows(usize),
    Pick(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScalarMul(a, b) | ScalarAdd(a, b)
            | MatVec(a, b) | VecMat(a, b) | MatMul(a, b) | Outer(a, b) | Dot(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a) | Scale(a, _) | Shift(a) | Expand(a) | Transpose(a) | Exp(a) | Log(a)
            | Sigmoid(a) | SigmoidPrime(a) | Tanh(a) | Square(a) | Sqrt(a) | Logistic(a)
            | LogisticPrime(a) | Sum(a) | RowLogSumExp(a) | RowSum(a) | ColSum(a)
            | ExpandCols(a) | ExpandRows(a) | Pick(a, _) | Scatter(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    stop_gradient: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value. Cheap to copy; valid for the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("value", &self.value()).finish()
    }
}

/// Gradient values keyed by the parameters that were requested.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: Vec<(usize, Array)>,
}

impl GradMap {
    pub fn get(&self, param: Var<'_>) -> Option<&Array> {
        self.entries.iter().find(|(id, _)| *id == param.id).map(|(_, a)| a)
    }

    /// Gradient of the `i`-th requested parameter.
    pub fn at(&self, i: usize) -> &Array {
        &self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_arrays(self) -> Vec<Array> {
        self.entries.into_iter().map(|(_, a)| a).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Array) -> Var<'_> {
        self.push_node(value, Op::Leaf, true, false)
    }

    /// A value that never carries gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_node(value, Op::Constant, false, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::scalar(v))
    }

    /// `sg(x)`: same value, zero derivative to everything downstream.
    pub fn stop_gradient<'t>(&'t self, x: Var<'t>) -> Var<'t> {
        let value = x.value();
        self.push_node(value, Op::Constant, false, true)
    }

    fn push_node(&self, value: Array, op: Op, requires_grad: bool, stop_gradient: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, stop_gradient });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Array, op: Op) -> Var<'_> {
        let rg = {
            let nodes = self.nodes.borrow();
            op.parents().iter().flatten().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, rg, false)
    }

    fn check<'t>(&'t self, v: Var<'t>) -> Result<(), AdError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignTape)
        }
    }

    /// Reverse-mode derivatives of a scalar `out` with respect to `params`,
    /// returned as differentiable handles. Parameters that `out` does not
    /// depend on receive zeros of matching shape.
    pub fn gradients<'t>(&'t self, out: Var<'t>, params: &[Var<'t>]) -> Result<Vec<Var<'t>>, AdError> {
        self.check(out)?;
        for &p in params {
            self.check(p)?;
        }
        let out_shape = out.shape();
        if out.len() != 1 {
            return Err(AdError::NonScalarOutput { shape: out_shape });
        }
        let n0 = out.id + 1;
        let mut want = vec![false; n0];
        for p in params {
            if p.id < n0 {
                want[p.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n0 {
                if !want[i] && nodes[i].requires_grad {
                    want[i] = nodes[i].op.parents().iter().flatten().any(|&p| want[p]);
                }
            }
        }
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n0];
        if want[out.id] {
            adj[out.id] = Some(self.constant(Array::filled(&out_shape, 1.0)));
        }
        for i in (0..n0).rev() {
            let Some(g) = adj[i] else { continue };
            if !want[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (p, contrib) in self.vjp(i, &op, g, &want)? {
                adj[p] = Some(match adj[p] {
                    Some(acc) => acc.add(contrib)?,
                    None => contrib,
                });
            }
        }
        params
            .iter()
            .map(|p| match (p.id < n0).then(|| adj[p.id]).flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Array::zeros(&p.shape()))),
            })
            .collect()
    }

    /// Gradient values of `out` with respect to `params`.
    pub fn grad<'t>(&'t self, out: Var<'t>, params: &[Var<'t>]) -> Result<GradMap, AdError> {
        let gs = self.gradients(out, params)?;
        Ok(GradMap { entries: params.iter().zip(gs).map(|(p, g)| (p.id, g.value())).collect() })
    }

    /// Mixed derivative `∂(Σ_k probe_kᵀ ∂out/∂first_k)/∂second` with the probes
    /// held constant.
    pub fn grad_of_grad<'t>(
        &'t self,
        out: Var<'t>,
        first: &[Var<'t>],
        probes: &[Array],
        second: &[Var<'t>],
    ) -> Result<GradMap, AdError> {
        if first.len() != probes.len() {
            return Err(AdError::Arity { op: "grad_of_grad", expected: first.len(), got: probes.len() });
        }
        let gs = self.gradients(out, first)?;
        let mut total: Option<Var<'t>> = None;
        for (g, probe) in gs.iter().zip(probes) {
            let v = self.constant(probe.clone());
            let term = v.dot(*g)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        let total = total.unwrap_or_else(|| self.scalar(0.0));
        self.grad(total, second)
    }

    fn vjp<'t>(&'t self, i: usize, op: &Op, g: Var<'t>, want: &[bool]) -> Result<Vec<(usize, Var<'t>)>, AdError> {
        use Op::*;
        let y = Var { tape: self, id: i };
        let v = |id: usize| Var { tape: self, id };
        let mut out = Vec::with_capacity(2);
        let mut put = |p: usize, f: &dyn Fn() -> Result<Var<'t>, AdError>| -> Result<(), AdError> {
            if want[p] {
                out.push((p, f()?));
            }
            Ok(())
        };
        match *op {
            Leaf | Constant => {}
            Add(a, b) => {
                put(a, &|| Ok(g))?;
                put(b, &|| Ok(g))?;
            }
            Sub(a, b) => {
                put(a, &|| Ok(g))?;
                put(b, &|| g.neg())?;
            }
            Mul(a, b) => {
                put(a, &|| g.mul(v(b)))?;
                put(b, &|| g.mul(v(a)))?;
            }
            Div(a, b) => {
                put(a, &|| g.div(v(b)))?;
                put(b, &|| g.mul(y)?.div(v(b))?.neg())?;
            }
            Neg(a) => put(a, &|| g.neg())?,
            Scale(a, c) => put(a, &|| g.scale(c))?,
            Shift(a) => put(a, &|| Ok(g))?,
            ScalarMul(s, x) => {
                put(s, &|| g.dot(v(x)))?;
                put(x, &|| v(s).smul(g))?;
            }
            ScalarAdd(s, x) => {
                put(s, &|| g.sum())?;
                put(x, &|| Ok(g))?;
            }
            Expand(s) => put(s, &|| g.sum())?,
            MatVec(a, x) => {
                put(a, &|| g.outer(v(x)))?;
                put(x, &|| g.vecmat(v(a)))?;
            }
            VecMat(x, a) => {
                put(x, &|| v(a).matvec(g))?;
                put(a, &|| v(x).outer(g))?;
            }
            MatMul(a, b) => {
                put(a, &|| g.matmul(v(b).t()?))?;
                put(b, &|| v(a).t()?.matmul(g))?;
            }
            Transpose(a) => put(a, &|| g.t())?,
            Outer(a, b) => {
                put(a, &|| v(b).matvec_of(g))?;
                put(b, &|| v(a).vecmat(g))?;
            }
            Dot(a, b) => {
                put(a, &|| g.smul(v(b)))?;
                put(b, &|| g.smul(v(a)))?;
            }
            Exp(a) => put(a, &|| g.mul(y))?,
            Log(a) => put(a, &|| g.div(v(a)))?,
            Sigmoid(a) => put(a, &|| g.mul(v(a).sigmoid_prime()?))?,
            SigmoidPrime(a) => put(a, &|| {
                let slope = v(a).scale(0.5)?.tanh()?.neg()?;
                g.mul(y.mul(slope)?)
            })?,
            Tanh(a) => put(a, &|| g.mul(y.square()?.neg()?.shift(1.0)?))?,
            Square(a) => put(a, &|| g.mul(v(a).scale(2.0)?))?,
            Sqrt(a) => put(a, &|| g.scale(0.5)?.div(y))?,
            Logistic(a) => put(a, &|| g.mul(v(a).logistic_prime()?))?,
            LogisticPrime(a) => put(a, &|| g.mul(v(a).sigmoid_prime()?))?,
            Sum(a) => put(a, &|| g.expand(&v(a).shape()))?,
            RowLogSumExp(a) => put(a, &|| {
                let k = v(a).shape()[1];
                let soft = v(a).sub(y.expand_cols(k)?)?.exp()?;
                g.expand_cols(k)?.mul(soft)
            })?,
            RowSum(a) => put(a, &|| g.expand_cols(v(a).shape()[1]))?,
            ColSum(a) => put(a, &|| g.expand_rows(v(a).shape()[0]))?,
            ExpandCols(a) => put(a, &|| g.row_sum())?,
            ExpandRows(a) => put(a, &|| g.col_sum())?,
            Pick(a, ref labels) => put(a, &|| g.scatter_rc(labels.clone(), v(a).shape()[1]))?,
            Scatter(a, ref labels) => put(a, &|| g.pick_rc(labels.clone()))?,
        }
        Ok(out)
    }
}

fn finite(op: &'static str, a: Array) -> Result<Array, AdError> {
    match a.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(AdError::NonFinite { op, index }),
        None => Ok(a),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value; first element for larger arrays.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn is_stop_gradient(&self) -> bool {
        self.tape.nodes.borrow()[self.id].stop_gradient
    }

    pub fn detach(self) -> Var<'t> {
        self.tape.stop_gradient(self)
    }

    fn same_tape(&self, other: Var<'t>) -> Result<(), AdError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignTape)
        }
    }

    fn unary(self, op: Op, name: &'static str, f: impl Fn(&Array) -> Array) -> Result<Var<'t>, AdError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)
        };
        Ok(self.tape.push(finite(name, value)?, op))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        check: impl Fn(&[usize], &[usize]) -> bool,
        f: impl Fn(&Array, &Array) -> Array,
    ) -> Result<Var<'t>, AdError> {
        self.same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !check(a.shape(), b.shape()) {
                return Err(AdError::Shape { op: name, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
            }
            f(a, b)
        };
        Ok(self.tape.push(finite(name, value)?, op))
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<Vec<usize>, AdError> {
        let shape = self.shape();
        if shape.len() != rank {
            let expected = match rank {
                0 => "scalar",
                1 => "vector",
                _ => "matrix",
            };
            return Err(AdError::Rank { op, expected, got: shape });
        }
        Ok(shape)
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(o, Op::Add(self.id, o.id), "add", |a, b| a == b, |a, b| a.zip(b, |x, y| x + y))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(o, Op::Sub(self.id, o.id), "sub", |a, b| a == b, |a, b| a.zip(b, |x, y| x - y))
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(o, Op::Mul(self.id, o.id), "mul", |a, b| a == b, |a, b| a.zip(b, |x, y| x * y))
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(o, Op::Div(self.id, o.id), "div", |a, b| a == b, |a, b| a.zip(b, |x, y| x / y))
    }

    pub fn neg(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Neg(self.id), "neg", |a| a.map(|x| -x))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>, AdError> {
        self.unary(Op::Scale(self.id, c), "scale", |a| a.map(|x| c * x))
    }

    /// Addition of a fixed constant.
    pub fn shift(self, c: f64) -> Result<Var<'t>, AdError> {
        self.unary(Op::Shift(self.id), "shift", |a| a.map(|x| x + c))
    }

    /// `s * x` where `self` is a scalar node and `x` any array.
    pub fn smul(self, x: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(x, Op::ScalarMul(self.id, x.id), "smul", |s, _| s.is_empty(), |s, x| {
            let c = s.item();
            x.map(|v| c * v)
        })
    }

    /// `s + x` where `self` is a scalar node and `x` any array.
    pub fn sadd(self, x: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(x, Op::ScalarAdd(self.id, x.id), "sadd", |s, _| s.is_empty(), |s, x| {
            let c = s.item();
            x.map(|v| c + v)
        })
    }

    /// Broadcast a scalar node to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>, AdError> {
        self.expect_rank("expand", 0)?;
        let shape = shape.to_vec();
        self.unary(Op::Expand(self.id), "expand", move |s| Array::filled(&shape, s.item()))
    }

    /// `A x` with `self = A` of shape `[m, n]`.
    pub fn matvec(self, x: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(
            x,
            Op::MatVec(self.id, x.id),
            "matvec",
            |a, x| a.len() == 2 && x.len() == 1 && a[1] == x[0],
            |a, x| Array::vector(a.matvec(x.data())),
        )
    }

    /// `matvec` with the operands in argument order `(self = x, a)`: `A x`.
    fn matvec_of(self, a: Var<'t>) -> Result<Var<'t>, AdError> {
        a.matvec(self)
    }

    /// `Aᵀ v` with `self = v` of length `m` and `a` of shape `[m, n]`.
    pub fn vecmat(self, a: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(
            a,
            Op::VecMat(self.id, a.id),
            "vecmat",
            |v, a| v.len() == 1 && a.len() == 2 && a[0] == v[0],
            |v, a| Array::vector(a.vecmat(v.data())),
        )
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(
            o,
            Op::MatMul(self.id, o.id),
            "matmul",
            |a, b| a.len() == 2 && b.len() == 2 && a[1] == b[0],
            |a, b| a.matmul(b),
        )
    }

    pub fn t(self) -> Result<Var<'t>, AdError> {
        self.expect_rank("transpose", 2)?;
        self.unary(Op::Transpose(self.id), "transpose", |a| a.transpose())
    }

    pub fn outer(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(
            o,
            Op::Outer(self.id, o.id),
            "outer",
            |a, b| a.len() == 1 && b.len() == 1,
            |a, b| {
                let mut data = Vec::with_capacity(a.len() * b.len());
                for &x in a.data() {
                    data.extend(b.data().iter().map(|&y| x * y));
                }
                Array::raw(vec![a.len(), b.len()], data)
            },
        )
    }

    /// Full contraction of two arrays of equal shape.
    pub fn dot(self, o: Var<'t>) -> Result<Var<'t>, AdError> {
        self.binary(o, Op::Dot(self.id, o.id), "dot", |a, b| a == b, |a, b| Array::scalar(a.dot(b)))
    }

    pub fn exp(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Exp(self.id), "exp", |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Log(self.id), "log", |a| a.map(f64::ln))
    }

    pub fn sigmoid(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", |a| a.map(logistic::sigmoid))
    }

    /// `σ(x)σ(-x)`.
    pub fn sigmoid_prime(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::SigmoidPrime(self.id), "sigmoid_prime", |a| a.map(logistic::sigmoid_prime))
    }

    pub fn tanh(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Tanh(self.id), "tanh", |a| a.map(f64::tanh))
    }

    pub fn square(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Square(self.id), "square", |a| a.map(|x| x * x))
    }

    pub fn sqrt(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sqrt(self.id), "sqrt", |a| a.map(f64::sqrt))
    }

    /// Elementwise logistic loss `log(1 + e^{-x})`.
    pub fn logistic(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Logistic(self.id), "logistic", |a| a.map(logistic::loss))
    }

    /// Elementwise `-σ(-x)`, the derivative of the logistic loss.
    pub fn logistic_prime(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::LogisticPrime(self.id), "logistic_prime", |a| a.map(logistic::loss_prime))
    }

    pub fn sum(self) -> Result<Var<'t>, AdError> {
        self.unary(Op::Sum(self.id), "sum", |a| Array::scalar(a.sum()))
    }

    pub fn mean(self) -> Result<Var<'t>, AdError> {
        let n = self.len();
        if n == 0 {
            return Err(AdError::Empty { op: "mean" });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn norm_sq(self) -> Result<Var<'t>, AdError> {
        self.dot(self)
    }

    /// Row-wise `log Σ_j exp(x_ij)` of a matrix.
    pub fn row_logsumexp(self) -> Result<Var<'t>, AdError> {
        self.expect_rank("row_logsumexp", 2)?;
        self.unary(Op::RowLogSumExp(self.id), "row_logsumexp", |a| {
            let c = a.cols();
            let out = a
                .data()
                .chunks_exact(c)
                .map(|row| {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Array::vector(out)
        })
    }

    pub fn row_sum(self) -> Result<Var<'t>, AdError> {
        self.expect_rank("row_sum", 2)?;
        self.unary(Op::RowSum(self.id), "row_sum", |a| {
            Array::vector(a.data().chunks_exact(a.cols()).map(|r| r.iter().sum()).collect())
        })
    }

    pub fn col_sum(self) -> Result<Var<'t>, AdError> {
        self.expect_rank("col_sum", 2)?;
        self.unary(Op::ColSum(self.id), "col_sum", |a| {
            let mut out = vec![0.0; a.cols()];
            for row in a.data().chunks_exact(a.cols()) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Array::vector(out)
        })
    }

    /// Repeat a length-`n` vector into `k` identical columns: `[n, k]`.
    pub fn expand_cols(self, k: usize) -> Result<Var<'t>, AdError> {
        self.expect_rank("expand_cols", 1)?;
        self.unary(Op::ExpandCols(self.id), "expand_cols", |a| {
            let data = a.data().iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect();
            Array::raw(vec![a.len(), k], data)
        })
    }

    /// Repeat a length-`k` vector into `n` identical rows: `[n, k]`.
    pub fn expand_rows(self, n: usize) -> Result<Var<'t>, AdError> {
        self.expect_rank("expand_rows", 1)?;
        self.unary(Op::ExpandRows(self.id), "expand_rows", |a| {
            let mut data = Vec::with_capacity(n * a.len());
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Array::raw(vec![n, a.len()], data)
        })
    }

    /// `out_i = x[i, labels_i]`.
    pub fn pick(self, labels: &[usize]) -> Result<Var<'t>, AdError> {
        self.pick_rc(labels.into())
    }

    fn pick_rc(self, labels: Rc<[usize]>) -> Result<Var<'t>, AdError> {
        let shape = self.expect_rank("pick", 2)?;
        check_labels("pick", &labels, shape[0], shape[1])?;
        let l = labels.clone();
        self.unary(Op::Pick(self.id, labels), "pick", move |a| {
            Array::vector(l.iter().enumerate().map(|(i, &c)| a.get2(i, c)).collect())
        })
    }

    /// Inverse of [`Var::pick`]: places `v_i` at `[i, labels_i]` of a zero `[n, k]` matrix.
    pub fn scatter(self, labels: &[usize], k: usize) -> Result<Var<'t>, AdError> {
        self.scatter_rc(labels.into(), k)
    }

    fn scatter_rc(self, labels: Rc<[usize]>, k: usize) -> Result<Var<'t>, AdError> {
        let shape = self.expect_rank("scatter", 1)?;
        check_labels("scatter", &labels, shape[0], k)?;
        let l = labels.clone();
        self.unary(Op::Scatter(self.id, labels), "scatter", move |a| {
            let mut data = vec![0.0; a.len() * k];
            for (i, (&c, &x)) in l.iter().zip(a.data()).enumerate() {
                data[i * k + c] = x;
            }
            Array::raw(vec![a.len(), k], data)
        })
    }

    /// Per-row softmax cross-entropy of logits `[n, k]` against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>, AdError> {
        self.row_logsumexp()?.sub(self.pick(labels)?)
    }
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<(), AdError> {
    if labels.len() != rows {
        return Err(AdError::Shape { op, lhs: vec![rows], rhs: vec![labels.len()] });
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(AdError::Label { op, label: bad, classes });
    }
    Ok(())
}
