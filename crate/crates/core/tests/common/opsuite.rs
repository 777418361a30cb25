//! Finite-difference checks for every registered tape op.
//!
//! Each case wraps the op as `f(x, s) = cᵀ op(s·x₁, x₂, …)` with random
//! constant `c` and a scalar parameter `s`, so first derivatives with respect
//! to the inputs and mixed second derivatives through `s` are both exercised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_risk::autodiff::{AdError, Array, Tape, Var};

pub type Build = for<'t> fn(&[Var<'t>], &Extra) -> Result<Var<'t>, AdError>;

#[derive(Clone, Debug)]
pub struct Extra {
    pub labels: Vec<usize>,
    pub k: usize,
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: fn(&mut ChaCha8Rng) -> (Vec<Vec<usize>>, Extra),
    /// Inputs drawn from [0.5, 2] instead of [-2, 2].
    pub positive: bool,
    pub build: Build,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4))
}

fn none() -> Extra {
    Extra { labels: vec![], k: 0 }
}

fn same2(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Extra) {
    let (n, m, _) = dims(rng);
    let shape = if rng.random_bool(0.5) { vec![n] } else { vec![n, m] };
    (vec![shape.clone(), shape], none())
}

fn one(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Extra) {
    let (n, m, _) = dims(rng);
    let shape = if rng.random_bool(0.5) { vec![n] } else { vec![n, m] };
    (vec![shape], none())
}

fn mat1(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Extra) {
    let (n, m, _) = dims(rng);
    (vec![vec![n, m]], none())
}

fn labelled(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Extra) {
    let (n, k, _) = dims(rng);
    let k = k + 1;
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (vec![vec![n, k]], Extra { labels, k })
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: same2, positive: false, build: |v, _| v[0].add(v[1]) },
        OpCase { name: "sub", shapes: same2, positive: false, build: |v, _| v[0].sub(v[1]) },
        OpCase { name: "mul", shapes: same2, positive: false, build: |v, _| v[0].mul(v[1]) },
        OpCase { name: "div", shapes: same2, positive: true, build: |v, _| v[0].div(v[1]) },
        OpCase { name: "neg", shapes: one, positive: false, build: |v, _| v[0].neg() },
        OpCase { name: "scale", shapes: one, positive: false, build: |v, _| v[0].scale(-1.7) },
        OpCase { name: "shift", shapes: one, positive: false, build: |v, _| v[0].shift(0.3) },
        OpCase {
            name: "smul",
            shapes: |r| {
                let (mut s, e) = one(r);
                s.insert(0, vec![]);
                (s, e)
            },
            positive: false,
            build: |v, _| v[0].smul(v[1]),
        },
        OpCase {
            name: "sadd",
            shapes: |r| {
                let (mut s, e) = one(r);
                s.insert(0, vec![]);
                (s, e)
            },
            positive: false,
            build: |v, _| v[0].sadd(v[1]),
        },
        OpCase {
            name: "expand",
            shapes: |r| {
                let (n, m, _) = dims(r);
                (vec![vec![]], Extra { labels: vec![n, m], k: 0 })
            },
            positive: false,
            build: |v, e| v[0].expand(&e.labels),
        },
        OpCase {
            name: "matvec",
            shapes: |r| {
                let (n, m, _) = dims(r);
                (vec![vec![n, m], vec![m]], none())
            },
            positive: false,
            build: |v, _| v[0].matvec(v[1]),
        },
        OpCase {
            name: "vecmat",
            shapes: |r| {
                let (n, m, _) = dims(r);
                (vec![vec![n], vec![n, m]], none())
            },
            positive: false,
            build: |v, _| v[0].vecmat(v[1]),
        },
        OpCase {
            name: "matmul",
            shapes: |r| {
                let (n, m, p) = dims(r);
                (vec![vec![n, m], vec![m, p]], none())
            },
            positive: false,
            build: |v, _| v[0].matmul(v[1]),
        },
        OpCase { name: "transpose", shapes: mat1, positive: false, build: |v, _| v[0].t() },
        OpCase {
            name: "outer",
            shapes: |r| {
                let (n, m, _) = dims(r);
                (vec![vec![n], vec![m]], none())
            },
            positive: false,
            build: |v, _| v[0].outer(v[1]),
        },
        OpCase { name: "dot", shapes: same2, positive: false, build: |v, _| v[0].dot(v[1]) },
        OpCase { name: "exp", shapes: one, positive: false, build: |v, _| v[0].exp() },
        OpCase { name: "log", shapes: one, positive: true, build: |v, _| v[0].ln() },
        OpCase { name: "sigmoid", shapes: one, positive: false, build: |v, _| v[0].sigmoid() },
        OpCase { name: "sigmoid_prime", shapes: one, positive: false, build: |v, _| v[0].sigmoid_prime() },
        OpCase { name: "tanh", shapes: one, positive: false, build: |v, _| v[0].tanh() },
        OpCase { name: "square", shapes: one, positive: false, build: |v, _| v[0].square() },
        OpCase { name: "sqrt", shapes: one, positive: true, build: |v, _| v[0].sqrt() },
        OpCase { name: "logistic", shapes: one, positive: false, build: |v, _| v[0].logistic() },
        OpCase { name: "logistic_prime", shapes: one, positive: false, build: |v, _| v[0].logistic_prime() },
        OpCase { name: "sum", shapes: one, positive: false, build: |v, _| v[0].sum() },
        OpCase { name: "mean", shapes: one, positive: false, build: |v, _| v[0].mean() },
        OpCase { name: "norm_sq", shapes: one, positive: false, build: |v, _| v[0].norm_sq() },
        OpCase { name: "row_logsumexp", shapes: mat1, positive: false, build: |v, _| v[0].row_logsumexp() },
        OpCase { name: "row_sum", shapes: mat1, positive: false, build: |v, _| v[0].row_sum() },
        OpCase { name: "col_sum", shapes: mat1, positive: false, build: |v, _| v[0].col_sum() },
        OpCase {
            name: "expand_cols",
            shapes: |r| {
                let (n, k, _) = dims(r);
                (vec![vec![n]], Extra { labels: vec![], k })
            },
            positive: false,
            build: |v, e| v[0].expand_cols(e.k),
        },
        OpCase {
            name: "expand_rows",
            shapes: |r| {
                let (n, k, _) = dims(r);
                (vec![vec![k]], Extra { labels: vec![], k: n })
            },
            positive: false,
            build: |v, e| v[0].expand_rows(e.k),
        },
        OpCase { name: "pick", shapes: labelled, positive: false, build: |v, e| v[0].pick(&e.labels) },
        OpCase {
            name: "scatter",
            shapes: |r| {
                let (s, e) = labelled(r);
                (vec![vec![s[0][0]]], e)
            },
            positive: false,
            build: |v, e| v[0].scatter(&e.labels, e.k),
        },
        OpCase {
            name: "softmax_cross_entropy",
            shapes: labelled,
            positive: false,
            build: |v, e| v[0].softmax_cross_entropy(&e.labels),
        },
    ]
}

/// Random instance of one case: inputs, scalar multiplier, projection, probes.
pub struct Instance {
    pub inputs: Vec<Array>,
    pub s: f64,
    pub proj: Array,
    pub probes: Vec<Array>,
    pub extra: Extra,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn instance(case: &OpCase, rng: &mut ChaCha8Rng) -> Instance {
    let (shapes, extra) = (case.shapes)(rng);
    let (lo, hi) = if case.positive { (0.5, 2.0) } else { (-2.0, 2.0) };
    let inputs: Vec<Array> = shapes.iter().map(|s| uniform(rng, s, lo, hi)).collect();
    let probes = shapes.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect();
    let s = rng.random_range(0.8..1.2);
    let out_shape = {
        let t = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|a| t.constant(a.clone())).collect();
        (case.build)(&vars, &extra).expect("op builds").shape()
    };
    let proj = uniform(rng, &out_shape, -1.0, 1.0);
    Instance { inputs, s, proj, probes, extra }
}

/// Builds `cᵀ op(s·x₁, x₂, …)` on `t` from parameter values.
fn objective<'t>(
    t: &'t Tape,
    case: &OpCase,
    inst: &Instance,
    xs: &[Var<'t>],
    s: Var<'t>,
) -> Result<Var<'t>, AdError> {
    let mut args = xs.to_vec();
    args[0] = s.smul(xs[0])?;
    let out = (case.build)(&args, &inst.extra)?;
    t.constant(inst.proj.clone()).dot(out)
}

fn value_at(case: &OpCase, inst: &Instance, inputs: &[Array], s: f64) -> f64 {
    let t = Tape::new();
    let xs: Vec<_> = inputs.iter().map(|a| t.constant(a.clone())).collect();
    let sv = t.constant(Array::scalar(s));
    objective(&t, case, inst, &xs, sv).unwrap().item()
}

/// Σ_k probe_kᵀ ∇_{x_k} f at the given parameter values.
fn probed_grad_at(case: &OpCase, inst: &Instance, inputs: &[Array], s: f64) -> f64 {
    let t = Tape::new();
    let xs: Vec<_> = inputs.iter().map(|a| t.var(a.clone())).collect();
    let sv = t.var(Array::scalar(s));
    let f = objective(&t, case, inst, &xs, sv).unwrap();
    let g = t.grad(f, &xs).unwrap();
    (0..xs.len()).map(|k| g.at(k).dot(&inst.probes[k])).sum()
}

/// Central differences of a scalar function over all coordinates of `(x, s)`.
fn central_diff(
    inputs: &[Array],
    s: f64,
    h: f64,
    f: impl Fn(&[Array], f64) -> f64,
) -> (Vec<Array>, f64) {
    let mut grads = Vec::new();
    for k in 0..inputs.len() {
        let mut gk = inputs[k].clone();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            minus[k].data_mut()[i] -= h;
            gk.data_mut()[i] = (f(&plus, s) - f(&minus, s)) / (2.0 * h);
        }
        grads.push(gk);
    }
    let gs = (f(inputs, s + h) - f(inputs, s - h)) / (2.0 * h);
    (grads, gs)
}

fn rel_err(ad: &[Array], ad_s: f64, fd: &[Array], fd_s: f64) -> f64 {
    let mut diff = (ad_s - fd_s).powi(2);
    let mut norm = fd_s.powi(2);
    for (a, b) in ad.iter().zip(fd) {
        diff += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        norm += b.norm_sq();
    }
    diff.sqrt() / norm.sqrt().max(1.0)
}

/// Relative error of first-order gradients against central differences.
pub fn first_order_error(case: &OpCase, inst: &Instance) -> f64 {
    let t = Tape::new();
    let xs: Vec<_> = inst.inputs.iter().map(|a| t.var(a.clone())).collect();
    let sv = t.var(Array::scalar(inst.s));
    let f = objective(&t, case, inst, &xs, sv).unwrap();
    let mut params = xs.clone();
    params.push(sv);
    let g = t.grad(f, &params).unwrap().into_arrays();
    let (ad, ad_s) = (&g[..xs.len()], g[xs.len()].item());
    let (fd, fd_s) = central_diff(&inst.inputs, inst.s, 1e-5, |x, s| value_at(case, inst, x, s));
    rel_err(ad, ad_s, &fd, fd_s)
}

/// Relative error of `grad_of_grad` against differences of probed gradients.
pub fn second_order_error(case: &OpCase, inst: &Instance) -> f64 {
    let t = Tape::new();
    let xs: Vec<_> = inst.inputs.iter().map(|a| t.var(a.clone())).collect();
    let sv = t.var(Array::scalar(inst.s));
    let f = objective(&t, case, inst, &xs, sv).unwrap();
    let mut second = xs.clone();
    second.push(sv);
    let g = t.grad_of_grad(f, &xs, &inst.probes, &second).unwrap().into_arrays();
    let (ad, ad_s) = (&g[..xs.len()], g[xs.len()].item());
    let (fd, fd_s) = central_diff(&inst.inputs, inst.s, 1e-5, |x, s| probed_grad_at(case, inst, x, s));
    rel_err(ad, ad_s, &fd, fd_s)
}

/// Worst first- and second-order errors over `n` seeded instances of a case.
pub fn worst_errors(case: &OpCase, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..n {
        let inst = instance(case, &mut rng);
        worst.0 = worst.0.max(first_order_error(case, &inst));
        worst.1 = worst.1.max(second_order_error(case, &inst));
    }
    worst
}
