//! Per-environment optimal predictors and inverse-Hessian-vector products.
//!
//! Risks here are weighted empirical risks of a linear predictor on fixed
//! features `F` (rows `f_i`, weights `p_i`):
//!
//! * binary labels `y_i = ±1`, `w ∈ R^k`: `Σ p_i ℓ(y_i wᵀf_i)`;
//! * class labels, `W ∈ R^{k×K}` (row-major): `Σ p_i CE(softmax(f_iᵀW), y_i)`.
//!
//! Predictors carry no intercept; every feature map in this crate is odd in
//! `x`, matching the symmetric label model.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::autodiff::Array;
use crate::envgen::{EnvData, Labels};
use crate::logistic;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InnerError {
    #[error("predictor transfer undefined for single-class group")]
    SingleClass,
    #[error("feature/label mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at Neumann step {step}")]
    NeumannNonFinite { step: usize },
    #[error("non-finite risk, gradient or Hessian during the Newton solve")]
    NonFinite,
    #[error("invalid Neumann configuration: {0}")]
    Config(String),
}

/// Fixed features of one environment together with labels and weights.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub features: &'a Array,
    pub labels: &'a Labels,
    pub weights: &'a [f64],
    /// Treat the batch as containing both classes even if all labels are `+1`
    /// (sign-folded populations).
    pub folded: bool,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a Array, labels: &'a Labels, weights: &'a [f64]) -> Self {
        Self { features, labels, weights, folded: false }
    }

    /// An environment's raw features.
    pub fn of(env: &'a EnvData) -> Self {
        Self::with_features(env, &env.features)
    }

    /// An environment's labels and weights with transformed features `Φ(x)`.
    pub fn with_features(env: &'a EnvData, features: &'a Array) -> Self {
        Self { features, labels: &env.labels, weights: &env.weights, folded: env.sign_folded }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn k(&self) -> usize {
        self.features.cols()
    }

    /// Number of predictor parameters.
    pub fn param_dim(&self) -> usize {
        match self.labels {
            Labels::Binary(_) => self.k(),
            Labels::Classes { classes, .. } => self.k() * classes,
        }
    }

    pub fn predictor_shape(&self) -> Vec<usize> {
        match self.labels {
            Labels::Binary(_) => vec![self.k()],
            Labels::Classes { classes, .. } => vec![self.k(), *classes],
        }
    }

    fn check(&self) -> Result<(), InnerError> {
        if self.features.rank() != 2 || self.features.rows() != self.labels.len() || self.labels.len() != self.weights.len() {
            return Err(InnerError::Shape(format!(
                "features {:?}, {} labels, {} weights",
                self.features.shape(),
                self.labels.len(),
                self.weights.len()
            )));
        }
        let single = match self.labels {
            Labels::Binary(y) => {
                !self.folded && {
                    let pos = y.iter().zip(self.weights).any(|(y, w)| *y > 0.0 && *w > 0.0);
                    let neg = y.iter().zip(self.weights).any(|(y, w)| *y < 0.0 && *w > 0.0);
                    !(pos && neg)
                }
            }
            Labels::Classes { y, .. } => {
                let mut it = y.iter().zip(self.weights).filter(|(_, w)| **w > 0.0).map(|(c, _)| c);
                let first = it.next();
                it.all(|c| Some(c) == first)
            }
        };
        if single {
            return Err(InnerError::SingleClass);
        }
        Ok(())
    }

    /// Weighted risk at flat parameters `w`.
    pub fn risk(&self, w: &[f64]) -> f64 {
        match self.labels {
            Labels::Binary(y) => {
                let s = self.features.matvec(w);
                s.iter().zip(y).zip(self.weights).map(|((s, y), p)| p * logistic::loss(y * s)).sum()
            }
            Labels::Classes { y, classes } => {
                let k = self.k();
                let mut total = 0.0;
                for i in 0..self.len() {
                    let logits = class_logits(self.features.row(i), w, k, *classes);
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                    total += self.weights[i] * (lse - logits[y[i]]);
                }
                total
            }
        }
    }

    /// Risk gradient with respect to flat parameters.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let k = self.k();
        match self.labels {
            Labels::Binary(y) => {
                let s = self.features.matvec(w);
                let coef: Vec<f64> =
                    (0..self.len()).map(|i| self.weights[i] * logistic::loss_prime(y[i] * s[i]) * y[i]).collect();
                self.features.vecmat(&coef)
            }
            Labels::Classes { y, classes } => {
                let kk = *classes;
                let mut g = vec![0.0; k * kk];
                for i in 0..self.len() {
                    let f = self.features.row(i);
                    let mut p = softmax(&class_logits(f, w, k, kk));
                    p[y[i]] -= 1.0;
                    for a in 0..k {
                        for c in 0..kk {
                            g[a * kk + c] += self.weights[i] * f[a] * p[c];
                        }
                    }
                }
                g
            }
        }
    }

    /// Dense risk Hessian with respect to flat parameters.
    pub fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let k = self.k();
        match self.labels {
            Labels::Binary(y) => {
                let s = self.features.matvec(w);
                let mut h = DMatrix::zeros(k, k);
                for i in 0..self.len() {
                    let c = self.weights[i] * logistic::loss_second(y[i] * s[i]);
                    let f = self.features.row(i);
                    for a in 0..k {
                        for b in a..k {
                            h[(a, b)] += c * f[a] * f[b];
                        }
                    }
                }
                symmetrize_upper(&mut h);
                h
            }
            Labels::Classes { classes, .. } => {
                let kk = *classes;
                let dim = k * kk;
                let mut h = DMatrix::zeros(dim, dim);
                for i in 0..self.len() {
                    let f = self.features.row(i);
                    let p = softmax(&class_logits(f, w, k, kk));
                    for a in 0..k {
                        for b in a..k {
                            let ff = self.weights[i] * f[a] * f[b];
                            for c in 0..kk {
                                for c2 in 0..kk {
                                    let curv = if c == c2 { p[c] - p[c] * p[c2] } else { -p[c] * p[c2] };
                                    h[(a * kk + c, b * kk + c2)] += ff * curv;
                                }
                            }
                        }
                    }
                }
                // Blocks were filled for a <= b; mirror the lower blocks.
                for r in 0..dim {
                    for c in 0..dim {
                        if r / kk > c / kk {
                            h[(r, c)] = h[(c, r)];
                        }
                    }
                }
                h
            }
        }
    }

    /// Largest squared feature-row norm (`max_i ‖f_i‖²`).
    pub fn max_row_norm_sq(&self) -> f64 {
        (0..self.len()).map(|i| self.features.row(i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Weighted mean squared feature-row norm (`Σ p_i ‖f_i‖²`).
    pub fn mean_row_norm_sq(&self) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * self.features.row(i).iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

fn symmetrize_upper(h: &mut DMatrix<f64>) {
    let n = h.nrows();
    for a in 0..n {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
}

fn class_logits(f: &[f64], w: &[f64], k: usize, kk: usize) -> Vec<f64> {
    let mut z = vec![0.0; kk];
    for a in 0..k {
        for c in 0..kk {
            z[c] += f[a] * w[a * kk + c];
        }
    }
    z
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Newton solver settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Stop when the risk-gradient norm falls to this level.
    pub tol: f64,
    pub max_iters: usize,
    /// Trust-region cap on `‖w‖`.
    pub max_norm: f64,
    /// Ridge added to the Newton system when the Hessian is near singular.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 100, max_norm: 1e3, damping: 1e-4 }
    }
}

/// Result of one predictor solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    /// Shape `[k]` (binary) or `[k, K]`.
    pub predictor: Array,
    pub iterations: usize,
    pub grad_norm: f64,
    pub risk: f64,
    pub converged: bool,
    /// The trust-region cap was active at some iterate.
    pub capped: bool,
    /// Damping was needed to factor the Newton system.
    pub damped: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `w(Q) = argmin_w E_Q[ℓ(w∘Φ)]` by damped Newton with backtracking.
pub fn solve_optimal_predictor(batch: &Batch<'_>, cfg: &SolverConfig, warm: Option<&[f64]>) -> Result<SolveReport, InnerError> {
    batch.check()?;
    let dim = batch.param_dim();
    let mut w: Vec<f64> = match warm {
        Some(w0) if w0.len() == dim && w0.iter().all(|v| v.is_finite()) => w0.to_vec(),
        _ => vec![0.0; dim],
    };
    if norm(&w) > cfg.max_norm {
        let s = cfg.max_norm / norm(&w);
        w.iter_mut().for_each(|v| *v *= s);
    }
    let (mut capped, mut damped) = (false, false);
    let mut f = batch.risk(&w);
    let mut g = batch.gradient(&w);
    let mut iterations = 0;
    while norm(&g) > cfg.tol && iterations < cfg.max_iters {
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(InnerError::NonFinite);
        }
        iterations += 1;
        let h = batch.hessian(&w);
        let (step, used_damping) = newton_direction(h, &g, cfg.damping);
        damped |= used_damping;
        let slope: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = w.iter().zip(&step).map(|(w, d)| w + t * d).collect();
            let n = norm(&trial);
            let hit_cap = n > cfg.max_norm;
            if hit_cap {
                trial.iter_mut().for_each(|v| *v *= cfg.max_norm / n);
            }
            let ft = batch.risk(&trial);
            if ft <= f + 1e-4 * t * slope || (hit_cap && ft <= f) {
                accepted = Some((trial, ft, hit_cap));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ft, hit_cap)) = accepted else { break };
        capped |= hit_cap;
        let progress = f - ft;
        w = trial;
        f = ft;
        g = batch.gradient(&w);
        if hit_cap && progress <= 0.0 {
            break;
        }
    }
    let grad_norm = norm(&g);
    Ok(SolveReport {
        predictor: Array::new(&batch.predictor_shape(), w).map_err(|_| InnerError::NonFinite)?,
        iterations,
        grad_norm,
        risk: f,
        converged: grad_norm <= cfg.tol,
        capped,
        damped,
    })
}

/// Solves `(H + δI) d = -g`, adding the ridge only if `H` is not safely positive definite.
fn newton_direction(h: DMatrix<f64>, g: &[f64], damping: f64) -> (Vec<f64>, bool) {
    let n = g.len();
    let rhs = DVector::from_iterator(n, g.iter().map(|v| -v));
    let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
    let mut ridge = if min_eig > damping { 0.0 } else { damping - min_eig.min(0.0) };
    loop {
        let m = &h + DMatrix::identity(n, n) * ridge;
        if let Some(ch) = m.cholesky() {
            return (ch.solve(&rhs).iter().copied().collect(), ridge > 0.0);
        }
        ridge = if ridge == 0.0 { damping } else { ridge * 10.0 };
    }
}

/// Symmetric positive semidefinite operator `H + damping·I`.
pub struct HessianOperator {
    kind: HessianKind,
    dim: usize,
    damping: f64,
    damped: bool,
    /// `max_i ‖f_i‖²` and `Σ p_i ‖f_i‖²` of the batch the operator is bound to.
    row_norms: Option<(f64, f64)>,
}

enum HessianKind {
    Explicit(DMatrix<f64>),
    MatrixFree(Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for HessianOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match &self.kind {
            HessianKind::Explicit(m) => format!("Explicit({m:?})"),
            HessianKind::MatrixFree(_) => "MatrixFree".to_string(),
        };
        f.debug_struct("HessianOperator").field("kind", &kind).field("damping", &self.damping).finish()
    }
}

impl HessianOperator {
    pub fn explicit(matrix: DMatrix<f64>) -> Self {
        let dim = matrix.nrows();
        Self { kind: HessianKind::Explicit(matrix), dim, damping: 0.0, damped: false, row_norms: None }
    }

    pub fn matrix_free(dim: usize, hvp: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { kind: HessianKind::MatrixFree(Box::new(hvp)), dim, damping: 0.0, damped: false, row_norms: None }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// Whether damping was switched on to repair a near-singular Hessian.
    pub fn was_damped(&self) -> bool {
        self.damped
    }

    /// Undamped explicit matrix, if available.
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            HessianKind::Explicit(m) => Some(m),
            HessianKind::MatrixFree(_) => None,
        }
    }

    /// `(H + damping·I) v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = match &self.kind {
            HessianKind::Explicit(m) => (m * DVector::from_column_slice(v)).iter().copied().collect(),
            HessianKind::MatrixFree(f) => f(v),
        };
        if self.damping != 0.0 {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += self.damping * x);
        }
        out
    }

    /// Exact `(H + damping·I)⁻¹ v`: dense factorization, or conjugate gradients
    /// for matrix-free operators.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>, InnerError> {
        match &self.kind {
            HessianKind::Explicit(m) => {
                let a = m + DMatrix::identity(self.dim, self.dim) * self.damping;
                let b = DVector::from_column_slice(v);
                let x = match a.clone().cholesky() {
                    Some(ch) => ch.solve(&b),
                    None => a.lu().solve(&b).ok_or(InnerError::NonFinite)?,
                };
                Ok(x.iter().copied().collect())
            }
            HessianKind::MatrixFree(_) => Ok(conjugate_gradient(|x| self.apply(x), v, 1e-14, 10 * self.dim + 100)),
        }
    }
}

fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let stop = tol * tol * rr.max(f64::MIN_POSITIVE);
    for _ in 0..max_iter {
        if rr <= stop {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Explicit Hessian of the batch risk at `w`; damping `ε` is switched on when
/// the smallest eigenvalue falls below it.
pub fn hessian_at(predictor: &Array, batch: &Batch<'_>, epsilon: f64) -> HessianOperator {
    let h = batch.hessian(predictor.data());
    let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
    let mut op = HessianOperator::explicit(h);
    if min_eig < epsilon {
        op.damping = epsilon;
        op.damped = true;
    }
    op.row_norms = Some((batch.max_row_norm_sq(), batch.mean_row_norm_sq()));
    op
}

/// Matrix-free Hessian of a binary-label batch: `v ↦ Σ p_i ℓ''(m_i) f_i f_iᵀ v`.
pub fn hvp_operator(predictor: &Array, batch: &Batch<'_>) -> Result<HessianOperator, InnerError> {
    let Labels::Binary(y) = batch.labels else {
        return Err(InnerError::Shape("matrix-free operator supports binary labels".into()));
    };
    let s = batch.features.matvec(predictor.data());
    let curvature: Vec<f64> =
        (0..batch.len()).map(|i| batch.weights[i] * logistic::loss_second(y[i] * s[i])).collect();
    let features = batch.features.clone();
    let k = batch.k();
    let mut op = HessianOperator::matrix_free(k, move |v| {
        let fv = features.matvec(v);
        let c: Vec<f64> = fv.iter().zip(&curvature).map(|(a, b)| a * b).collect();
        features.vecmat(&c)
    });
    op.row_norms = Some((batch.max_row_norm_sq(), batch.mean_row_norm_sq()));
    Ok(op)
}

/// How the Neumann series is scaled so that `‖I − cH′‖ < 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeumannScaling {
    Fixed(f64),
    /// `c = 1/(¼·max_i ‖f_i‖² + ε)`.
    MaxRowNorm,
    /// `c = 1/(¼·Σ_i p_i ‖f_i‖² + ε)`, from `λ_max(H) ≤ tr(H) ≤ ¼ Σ p_i ‖f_i‖²`.
    MeanRowNorm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeumannConfig {
    /// Highest power `j` in `c·Σ_{i=0}^{j} (I − cH′)^i v`.
    pub steps: usize,
    pub scaling: NeumannScaling,
    /// `ε` in `H′ = H + εI`.
    pub epsilon: f64,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        Self { steps: 10, scaling: NeumannScaling::MeanRowNorm, epsilon: 1e-4 }
    }
}

impl NeumannConfig {
    pub fn validate(&self) -> Result<(), InnerError> {
        if self.steps == 0 {
            return Err(InnerError::Config("steps must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(InnerError::Config("epsilon must be non-negative".into()));
        }
        if let NeumannScaling::Fixed(c) = self.scaling {
            if !(c > 0.0 && c.is_finite()) {
                return Err(InnerError::Config(format!("scale must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

fn neumann_scale(h: &HessianOperator, cfg: &NeumannConfig) -> Result<f64, InnerError> {
    match cfg.scaling {
        NeumannScaling::Fixed(c) => Ok(c),
        NeumannScaling::MaxRowNorm | NeumannScaling::MeanRowNorm => {
            let (max, mean) = h.row_norms.ok_or_else(|| {
                InnerError::Config("automatic scaling needs an operator built from a batch".into())
            })?;
            let bound = if cfg.scaling == NeumannScaling::MaxRowNorm { max } else { mean };
            Ok(1.0 / (0.25 * bound + cfg.epsilon))
        }
    }
}

/// Truncated Neumann series `c·Σ_{i=0}^{j} (I − cH′)^i v` with `H′ = H + εI`.
/// The operator's own repair damping is part of `H`.
pub fn neumann_inv_hvp(h: &HessianOperator, v: &[f64], cfg: &NeumannConfig) -> Result<Vec<f64>, InnerError> {
    cfg.validate()?;
    if v.len() != h.dim() {
        return Err(InnerError::Shape(format!("vector of length {} for operator of dim {}", v.len(), h.dim())));
    }
    let c = neumann_scale(h, cfg)?;
    let mut term = v.to_vec();
    let mut acc = v.to_vec();
    for step in 1..=cfg.steps {
        let hv = h.apply(&term);
        for i in 0..term.len() {
            term[i] -= c * (hv[i] + cfg.epsilon * term[i]);
            acc[i] += term[i];
        }
        if term.iter().chain(&acc).any(|x| !x.is_finite()) {
            return Err(InnerError::NeumannNonFinite { step });
        }
    }
    Ok(acc.into_iter().map(|a| c * a).collect())
}

/// How `v_Q = H⁻¹ g` is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InverseHvp {
    Neumann(NeumannConfig),
    Exact,
}

impl Default for InverseHvp {
    fn default() -> Self {
        InverseHvp::Neumann(NeumannConfig::default())
    }
}

/// `v_Q = H⁻¹ ∂L_P/∂w(Q)`, by truncated series or exact solve.
pub fn transfer_vector(h: &HessianOperator, grad_transfer: &[f64], mode: &InverseHvp) -> Result<Vec<f64>, InnerError> {
    match mode {
        InverseHvp::Neumann(cfg) => neumann_inv_hvp(h, grad_transfer, cfg),
        InverseHvp::Exact => h.solve(grad_transfer),
    }
}
