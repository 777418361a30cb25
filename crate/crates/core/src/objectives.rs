//! Risk functionals: ERM, IRMv1, REx, GroupDRO weighting, transfer risk and
//! the per-environment TRM objective.
//!
//! Objective builders record on a caller-supplied [`Tape`] and return the
//! scalar total together with a [`RiskReport`] of its components; the plain
//! `*_risk` functions only evaluate.

use std::io::Write;

use thiserror::Error;

use crate::autodiff::{AdError, Array, Tape, Var};
use crate::envgen::{EnvData, Labels};
use crate::inner::{self, Batch, HessianOperator, InnerError, InverseHvp, SolveReport, SolverConfig};
use crate::model::{Model, ModelVars};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("{what} needs at least {min} environments, got {got}")]
    TooFewEnvironments { what: &'static str, min: usize, got: usize },
    #[error("invalid simplex weights: {0}")]
    Simplex(String),
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ObjectiveError>;

/// Components of an objective; `total = erm_term + penalty + transfer_term + grad_match_term`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RiskReport {
    /// Per-environment losses of the objective's predictor (see each builder).
    pub per_env: Vec<f64>,
    pub erm_term: f64,
    /// Coefficient-scaled regularizer (IRMv1 or REx).
    pub penalty: f64,
    pub transfer_term: f64,
    pub grad_match_term: f64,
    pub total: f64,
    /// Sample-size-weighted mean of `per_env`.
    pub pooled: f64,
}

impl RiskReport {
    fn finish(mut self, sizes: &[usize]) -> Self {
        self.total = self.erm_term + self.penalty + self.transfer_term + self.grad_match_term;
        let n: usize = sizes.iter().sum();
        self.pooled = if n == 0 {
            f64::NAN
        } else {
            self.per_env.iter().zip(sizes).map(|(l, s)| l * *s as f64).sum::<f64>() / n as f64
        };
        self
    }

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("erm_term", self.erm_term),
            ("penalty", self.penalty),
            ("transfer_term", self.transfer_term),
            ("grad_match_term", self.grad_match_term),
            ("total", self.total),
        ]
    }

    /// Rows `iteration,env,component,value`; aggregate components use env `all`.
    pub fn write_csv_rows(&self, iteration: usize, out: &mut impl Write) -> std::io::Result<()> {
        for (e, l) in self.per_env.iter().enumerate() {
            writeln!(out, "{iteration},{e},loss,{l}")?;
        }
        for (name, v) in self.components() {
            writeln!(out, "{iteration},all,{name},{v}")?;
        }
        Ok(())
    }
}

/// Records `Σ_i p_i ℓ_i` for the environment's labels.
pub fn risk_var<'t>(feats: Var<'t>, env: &EnvData, w: Var<'t>) -> std::result::Result<Var<'t>, AdError> {
    let tape = feats.tape();
    let p = tape.constant(Array::vector(env.weights.clone()));
    match &env.labels {
        Labels::Binary(y) => feats.matvec(w)?.mul(tape.constant(Array::vector(y.clone())))?.logistic()?.dot(p),
        Labels::Classes { y, .. } => feats.matmul(w)?.softmax_cross_entropy(y)?.dot(p),
    }
}

/// Records `Φ(x)` for one environment.
pub fn features_var<'t>(model: &Model, vars: &ModelVars<'t>, env: &EnvData) -> std::result::Result<Var<'t>, AdError> {
    let tape = vars.w_all.tape();
    model.phi.forward(&vars.phi, tape.constant(env.features.clone()))
}

/// A recorded objective.
#[derive(Clone, Debug)]
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub report: RiskReport,
}

impl<'t> Objective<'t> {
    /// Gradients with respect to the feature-map parameters followed by `w_all`.
    pub fn gradient(&self, vars: &ModelVars<'t>) -> Result<Vec<Array>> {
        Ok(self.total.tape().grad(self.total, &vars.all())?.into_arrays())
    }
}

fn sum_vars<'t>(tape: &'t Tape, vars: impl IntoIterator<Item = Var<'t>>) -> std::result::Result<Var<'t>, AdError> {
    let mut acc: Option<Var<'t>> = None;
    for v in vars {
        acc = Some(match acc {
            Some(a) => a.add(v)?,
            None => v,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.scalar(0.0)))
}

fn sizes(envs: &[EnvData]) -> Vec<usize> {
    envs.iter().map(EnvData::len).collect()
}

fn env_losses<'t>(model: &Model, vars: &ModelVars<'t>, envs: &[EnvData]) -> Result<Vec<Var<'t>>> {
    envs.iter().map(|e| Ok(risk_var(features_var(model, vars, e)?, e, vars.w_all)?)).collect()
}

/// `Σ_P E_P[ℓ(w_all∘Φ)]`; `per_env` holds each `E_P`.
pub fn erm_objective<'t>(model: &Model, vars: &ModelVars<'t>, envs: &[EnvData]) -> Result<Objective<'t>> {
    let tape = vars.w_all.tape();
    let losses = env_losses(model, vars, envs)?;
    let total = sum_vars(tape, losses.iter().copied())?;
    let report = RiskReport { per_env: losses.iter().map(|l| l.item()).collect(), erm_term: total.item(), ..Default::default() };
    Ok(Objective { total, report: report.finish(&sizes(envs)) })
}

/// `Σ_P E_P[ℓ] + λ Σ_P ‖∇_w E_P[ℓ]‖²`, with the penalty differentiable in `(Φ, w)`.
pub fn irmv1_objective<'t>(model: &Model, vars: &ModelVars<'t>, envs: &[EnvData], lambda: f64) -> Result<Objective<'t>> {
    let tape = vars.w_all.tape();
    let losses = env_losses(model, vars, envs)?;
    let erm = sum_vars(tape, losses.iter().copied())?;
    let mut pens = Vec::with_capacity(losses.len());
    for l in &losses {
        pens.push(tape.gradients(*l, &[vars.w_all])?[0].norm_sq()?);
    }
    let pen = sum_vars(tape, pens)?;
    let total = if lambda == 0.0 { erm } else { erm.add(pen.scale(lambda)?)? };
    let report = RiskReport {
        per_env: losses.iter().map(|l| l.item()).collect(),
        erm_term: erm.item(),
        penalty: lambda * pen.item(),
        ..Default::default()
    };
    Ok(Objective { total, report: report.finish(&sizes(envs)) })
}

/// `Σ_P E_P[ℓ] + β·Var_P(E_P[ℓ])` with the population variance.
pub fn rex_objective<'t>(model: &Model, vars: &ModelVars<'t>, envs: &[EnvData], beta: f64) -> Result<Objective<'t>> {
    if envs.len() < 2 {
        return Err(ObjectiveError::TooFewEnvironments { what: "REx", min: 2, got: envs.len() });
    }
    let tape = vars.w_all.tape();
    let losses = env_losses(model, vars, envs)?;
    let erm = sum_vars(tape, losses.iter().copied())?;
    let e = envs.len() as f64;
    let mean = erm.scale(1.0 / e)?;
    let mut devs = Vec::with_capacity(losses.len());
    for l in &losses {
        devs.push(l.sub(mean)?.square()?);
    }
    let var = sum_vars(tape, devs)?.scale(1.0 / e)?;
    let total = if beta == 0.0 { erm } else { erm.add(var.scale(beta)?)? };
    let report = RiskReport {
        per_env: losses.iter().map(|l| l.item()).collect(),
        erm_term: erm.item(),
        penalty: beta * var.item(),
        ..Default::default()
    };
    Ok(Objective { total, report: report.finish(&sizes(envs)) })
}

/// `Σ_P q_P E_P[ℓ]` for GroupDRO group weights `q`.
pub fn groupdro_objective<'t>(model: &Model, vars: &ModelVars<'t>, envs: &[EnvData], q: &SimplexWeights) -> Result<Objective<'t>> {
    if q.len() != envs.len() {
        return Err(ObjectiveError::Simplex(format!("{} weights for {} environments", q.len(), envs.len())));
    }
    let tape = vars.w_all.tape();
    let losses = env_losses(model, vars, envs)?;
    let mut terms = Vec::with_capacity(losses.len());
    for (l, w) in losses.iter().zip(q.weights()) {
        terms.push(l.scale(*w)?);
    }
    let total = sum_vars(tape, terms)?;
    let report = RiskReport { per_env: losses.iter().map(|l| l.item()).collect(), erm_term: total.item(), ..Default::default() };
    Ok(Objective { total, report: report.finish(&sizes(envs)) })
}

fn evaluate(model: &Model, build: impl for<'t> FnOnce(&ModelVars<'t>) -> Result<Objective<'t>>) -> Result<RiskReport> {
    let tape = Tape::new();
    let vars = model.vars(&tape);
    Ok(build(&vars)?.report)
}

pub fn erm_risk(model: &Model, envs: &[EnvData]) -> Result<RiskReport> {
    evaluate(model, |v| erm_objective(model, v, envs))
}

pub fn irmv1_risk(model: &Model, envs: &[EnvData], lambda: f64) -> Result<RiskReport> {
    evaluate(model, |v| irmv1_objective(model, v, envs, lambda))
}

pub fn rex_risk(model: &Model, envs: &[EnvData], beta: f64) -> Result<RiskReport> {
    evaluate(model, |v| rex_objective(model, v, envs, beta))
}

/// `Σ_P ‖∇_w E_P[ℓ(w_all∘Φ)]‖²`, evaluated without a tape.
pub fn irmv1_penalty(model: &Model, envs: &[EnvData]) -> f64 {
    envs.iter()
        .map(|e| {
            let f = model.phi.apply(&e.features);
            Batch::with_features(e, &f).gradient(model.w_all.data()).iter().map(|g| g * g).sum::<f64>()
        })
        .sum()
}

/// Mixture weights over environments.
///
/// For TRM the weights belong to an owner `Q` and live on `Ω∖{Q}`; they are
/// stored over all environments with the owner's entry pinned at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights {
    owner: Option<usize>,
    weights: Vec<f64>,
}

impl SimplexWeights {
    /// Uniform weights over all environments, or over all but `owner`.
    pub fn uniform(envs: usize, owner: Option<usize>) -> Self {
        let active = envs - usize::from(owner.is_some_and(|o| o < envs));
        let weights = (0..envs).map(|i| if Some(i) == owner { 0.0 } else { 1.0 / active as f64 }).collect();
        Self { owner, weights }
    }

    pub fn new(weights: Vec<f64>, owner: Option<usize>) -> Result<Self> {
        let s = Self { owner, weights };
        s.validate(1e-9)?;
        Ok(s)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if let Some(o) = self.owner {
            if o >= self.weights.len() {
                return Err(ObjectiveError::Simplex(format!("owner {o} out of range")));
            }
            if self.weights[o] != 0.0 {
                return Err(ObjectiveError::Simplex(format!("owner {o} carries weight {}", self.weights[o])));
            }
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(ObjectiveError::Simplex(format!("entry {w} is not a finite non-negative weight")));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(ObjectiveError::Simplex(format!("weights sum to {s}")));
        }
        Ok(())
    }

    pub fn owner(&self) -> Option<usize> {
        self.owner
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Exponentiated-gradient ascent: `α_i ← α_i·exp(η·loss_i) / Z`.
///
/// The owner's loss is ignored. Exponents are shifted by the largest loss on
/// the support, so `Z` never underflows to zero.
pub fn eg_update(alpha: &SimplexWeights, losses: &[f64], eta: f64) -> Result<SimplexWeights> {
    if losses.len() != alpha.len() {
        return Err(ObjectiveError::Simplex(format!("{} losses for {} weights", losses.len(), alpha.len())));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ObjectiveError::Invalid(format!("EG step size must be finite and non-negative, got {eta}")));
    }
    let active = |i: usize| Some(i) != alpha.owner;
    if let Some(i) = (0..losses.len()).find(|&i| active(i) && !losses[i].is_finite()) {
        return Err(ObjectiveError::Invalid(format!("non-finite loss for environment {i}")));
    }
    let shift = (0..losses.len())
        .filter(|&i| active(i) && alpha.weights[i] > 0.0)
        .map(|i| losses[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let t: Vec<f64> = (0..losses.len())
        .map(|i| if active(i) && alpha.weights[i] > 0.0 { alpha.weights[i] * (eta * (losses[i] - shift)).exp() } else { 0.0 })
        .collect();
    let z: f64 = t.iter().sum();
    if !(z > 0.0) {
        return Err(ObjectiveError::Simplex("no environment carries weight".into()));
    }
    Ok(SimplexWeights { owner: alpha.owner, weights: t.into_iter().map(|v| v / z).collect() })
}

/// GroupDRO's group-weight step: [`eg_update`] over all environments.
pub fn groupdro_weights_update(q: &SimplexWeights, losses: &[f64], eta: f64) -> Result<SimplexWeights> {
    if q.owner.is_some() {
        return Err(ObjectiveError::Simplex("GroupDRO weights cover all environments".into()));
    }
    eg_update(q, losses, eta)
}

/// Which transfer-risk variant to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// `Σ_Q sup_{P ∈ Conv(Ω∖Q)} E_P[ℓ(w(Q)∘Φ)]`.
    SumSup,
    /// `Σ_Q Σ_{P≠Q} E_P[ℓ(w(Q)∘Φ)]`.
    SumSum,
}

/// How the sup over mixtures is evaluated in the sum-sup metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerMax {
    /// The worst single environment (ties go to the lowest id).
    ExactWorst,
    /// The current EG mixture `α(Q)`.
    EgState,
}

/// Transfer losses `L[Q][P] = E_P[ℓ(w(Q)∘Φ)]`; the diagonal is NaN.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub losses: Vec<Vec<f64>>,
    /// `w(Q)` solves; `None` for skipped single-class environments.
    pub predictors: Vec<Option<SolveReport>>,
    pub skipped: Vec<usize>,
}

impl TransferMatrix {
    fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.losses.len()).filter(|q| !self.skipped.contains(q))
    }

    /// Worst environment per `Q` (lowest id on ties).
    pub fn worst(&self) -> Vec<Option<usize>> {
        (0..self.losses.len())
            .map(|q| {
                if self.skipped.contains(&q) {
                    return None;
                }
                let mut best: Option<usize> = None;
                for p in (0..self.losses.len()).filter(|&p| p != q) {
                    if best.is_none_or(|b| self.losses[q][p] > self.losses[q][b]) {
                        best = Some(p);
                    }
                }
                best
            })
            .collect()
    }

    /// Per-`Q` sum-sup contributions with the exact inner max.
    pub fn sum_sup_terms(&self) -> Vec<f64> {
        self.worst().iter().enumerate().map(|(q, p)| p.map_or(0.0, |p| self.losses[q][p])).collect()
    }

    pub fn sum_sup(&self) -> f64 {
        self.sum_sup_terms().iter().sum()
    }

    pub fn sum_sum_terms(&self) -> Vec<f64> {
        (0..self.losses.len())
            .map(|q| {
                if self.skipped.contains(&q) {
                    0.0
                } else {
                    (0..self.losses.len()).filter(|&p| p != q).map(|p| self.losses[q][p]).sum()
                }
            })
            .collect()
    }

    pub fn sum_sum(&self) -> f64 {
        self.sum_sum_terms().iter().sum()
    }

    /// Per-`Q` contributions `Σ_P α_P(Q) L[Q][P]`.
    pub fn eg_state_terms(&self, alphas: &[SimplexWeights]) -> Result<Vec<f64>> {
        if alphas.len() != self.losses.len() {
            return Err(ObjectiveError::Simplex(format!("{} EG states for {} environments", alphas.len(), self.losses.len())));
        }
        let rows: Vec<usize> = self.rows().collect();
        Ok((0..self.losses.len())
            .map(|q| {
                if !rows.contains(&q) {
                    return 0.0;
                }
                alphas[q].weights.iter().enumerate().filter(|(p, _)| *p != q).map(|(p, a)| a * self.losses[q][p]).sum()
            })
            .collect())
    }

    pub fn eg_state(&self, alphas: &[SimplexWeights]) -> Result<f64> {
        Ok(self.eg_state_terms(alphas)?.iter().sum())
    }
}

/// Solves every `w(Q)` on `Φ` features and tabulates the transfer losses.
///
/// With `strict` a single-class environment is an error; otherwise it is
/// skipped and listed in `skipped`.
pub fn transfer_matrix(
    model: &Model,
    envs: &[EnvData],
    solver: &SolverConfig,
    warm: Option<&[Array]>,
    strict: bool,
) -> Result<TransferMatrix> {
    let feats: Vec<Array> = envs.iter().map(|e| model.phi.apply(&e.features)).collect();
    let e = envs.len();
    let mut losses = vec![vec![f64::NAN; e]; e];
    let mut predictors = Vec::with_capacity(e);
    let mut skipped = Vec::new();
    for q in 0..e {
        let w0 = warm.and_then(|w| w.get(q)).map(|a| a.data());
        match inner::solve_optimal_predictor(&Batch::with_features(&envs[q], &feats[q]), solver, w0) {
            Ok(rep) => {
                for p in (0..e).filter(|&p| p != q) {
                    losses[q][p] = Batch::with_features(&envs[p], &feats[p]).risk(rep.predictor.data());
                }
                predictors.push(Some(rep));
            }
            Err(InnerError::SingleClass) if !strict => {
                skipped.push(q);
                predictors.push(None);
            }
            Err(err) => return Err(err.into()),
        }
    }
    Ok(TransferMatrix { losses, predictors, skipped })
}

/// Transfer risk as a metric; `per_env` holds the per-`Q` contributions.
pub fn transfer_risk(
    model: &Model,
    envs: &[EnvData],
    variant: Variant,
    inner: InnerMax,
    alphas: Option<&[SimplexWeights]>,
    solver: &SolverConfig,
) -> Result<RiskReport> {
    if envs.len() < 2 {
        return Err(ObjectiveError::TooFewEnvironments { what: "transfer risk", min: 2, got: envs.len() });
    }
    let m = transfer_matrix(model, envs, solver, None, false)?;
    let terms = match (variant, inner) {
        (Variant::SumSum, _) => m.sum_sum_terms(),
        (Variant::SumSup, InnerMax::ExactWorst) => m.sum_sup_terms(),
        (Variant::SumSup, InnerMax::EgState) => {
            let alphas = alphas.ok_or_else(|| ObjectiveError::Invalid("EG-state transfer risk needs α(Q)".into()))?;
            m.eg_state_terms(alphas)?
        }
    };
    let transfer_term = terms.iter().sum();
    let report = RiskReport { per_env: terms, transfer_term, ..Default::default() };
    Ok(report.finish(&sizes(envs)))
}

/// Differentiable `Σ_Q Σ_P α_P(Q) E_P[ℓ(sg(w(Q))∘Φ)]` with solved predictors held fixed.
pub fn transfer_objective<'t>(
    model: &Model,
    vars: &ModelVars<'t>,
    envs: &[EnvData],
    matrix: &TransferMatrix,
    alphas: &[SimplexWeights],
) -> Result<Objective<'t>> {
    let tape = vars.w_all.tape();
    let feats: Vec<Var<'t>> = envs.iter().map(|e| features_var(model, vars, e)).collect::<std::result::Result<_, _>>()?;
    let mut terms = Vec::new();
    let mut per_q = vec![0.0; envs.len()];
    for (q, rep) in matrix.predictors.iter().enumerate() {
        let Some(rep) = rep else { continue };
        let wq = tape.constant(rep.predictor.clone());
        for (p, a) in alphas[q].weights.iter().enumerate() {
            if p == q || *a == 0.0 {
                continue;
            }
            let t = risk_var(feats[p], &envs[p], wq)?.scale(*a)?;
            per_q[q] += t.item();
            terms.push(t);
        }
    }
    let total = sum_vars(tape, terms)?;
    let report = RiskReport { per_env: per_q, transfer_term: total.item(), ..Default::default() };
    Ok(Objective { total, report: report.finish(&sizes(envs)) })
}

/// TRM hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrmHyper {
    /// Gradient-matching coefficient `λ`.
    pub lambda: f64,
    /// How `v_Q = H⁻¹ g` is computed.
    pub inverse: InverseHvp,
    pub variant: Variant,
}

impl Default for TrmHyper {
    fn default() -> Self {
        Self { lambda: 0.1, inverse: InverseHvp::default(), variant: Variant::SumSup }
    }
}

/// `w(Q)` at the current `Φ` with the Hessian of `E_Q[ℓ]` there.
#[derive(Debug)]
pub struct SolvedPredictor {
    pub solve: SolveReport,
    pub hessian: HessianOperator,
}

/// Solves `w(Q)` on `env` (typically the full environment) and binds its Hessian.
pub fn solve_predictor(model: &Model, env: &EnvData, solver: &SolverConfig, warm: Option<&[f64]>) -> Result<SolvedPredictor> {
    let f = model.phi.apply(&env.features);
    let batch = Batch::with_features(env, &f);
    let solve = inner::solve_optimal_predictor(&batch, solver, warm)?;
    let hessian = inner::hessian_at(&solve.predictor, &batch, solver.damping);
    Ok(SolvedPredictor { solve, hessian })
}

/// A recorded TRM step.
#[derive(Clone, Debug)]
pub struct TrmStep<'t> {
    pub objective: Objective<'t>,
    /// `v_Q`; empty when `λ = 0`.
    pub v_q: Vec<f64>,
    /// `E_P[ℓ(w(Q)∘Φ)]` for every `P`; entry `Q` is NaN.
    pub transfer_losses: Vec<f64>,
}

/// Per-environment TRM objective
///
/// `E_Q[ℓ(w_all∘Φ)] + E_{P(Q)}[ℓ(w(Q)∘Φ)] − λ·sg(v_Q)ᵀ ∂E_Q[ℓ(w(Q)∘Φ)]/∂w(Q)`.
///
/// `w(Q)` is a separate leaf, so it carries no derivative into `Φ`; the last
/// term supplies the implicit part of `dw(Q)/dΦ` through its mixed second
/// derivative. `P(Q)` is `α(Q)` for sum-sup and the uniform mixture over
/// `Ω∖Q` for sum-sum. `batches` supply the data for all three terms; the
/// Hessian comes from `solved`. `report.per_env` holds the transfer losses
/// with entry `Q` replaced by `E_Q[ℓ(w(Q)∘Φ)]`.
pub fn trm_step_objective<'t>(
    model: &Model,
    vars: &ModelVars<'t>,
    batches: &[EnvData],
    q: usize,
    alpha: &SimplexWeights,
    hyper: &TrmHyper,
    solved: &SolvedPredictor,
) -> Result<TrmStep<'t>> {
    let e = batches.len();
    if e < 2 {
        return Err(ObjectiveError::TooFewEnvironments { what: "TRM", min: 2, got: e });
    }
    if q >= e {
        return Err(ObjectiveError::Invalid(format!("environment {q} out of range")));
    }
    if !(hyper.lambda >= 0.0) {
        return Err(ObjectiveError::Invalid(format!("λ must be non-negative, got {}", hyper.lambda)));
    }
    let mix = match hyper.variant {
        Variant::SumSup => {
            if alpha.owner != Some(q) || alpha.len() != e {
                return Err(ObjectiveError::Simplex(format!("α does not belong to environment {q}")));
            }
            alpha.weights.clone()
        }
        Variant::SumSum => SimplexWeights::uniform(e, Some(q)).weights,
    };
    let tape = vars.w_all.tape();
    let feats: Vec<Var<'t>> = batches.iter().map(|b| features_var(model, vars, b)).collect::<std::result::Result<_, _>>()?;
    let erm = risk_var(feats[q], &batches[q], vars.w_all)?;
    let wq = tape.var(solved.solve.predictor.clone());
    let mut transfer_losses = vec![f64::NAN; e];
    let mut terms = Vec::with_capacity(e - 1);
    for p in (0..e).filter(|&p| p != q) {
        let l = risk_var(feats[p], &batches[p], wq)?;
        transfer_losses[p] = l.item();
        if mix[p] != 0.0 {
            terms.push(l.scale(mix[p])?);
        }
    }
    let transfer = sum_vars(tape, terms)?;
    let inner_q = risk_var(feats[q], &batches[q], wq)?;
    let mut total = erm.add(transfer)?;
    let (mut grad_match, mut v_q) = (0.0, Vec::new());
    if hyper.lambda != 0.0 {
        let g_p = tape.grad(transfer, &[wq])?.into_arrays().remove(0);
        v_q = inner::transfer_vector(&solved.hessian, g_p.data(), &hyper.inverse)?;
        let g_q = tape.gradients(inner_q, &[wq])?[0];
        let v = tape.constant(Array::new(g_p.shape(), v_q.clone())?);
        let gm = v.dot(g_q)?.scale(-hyper.lambda)?;
        grad_match = gm.item();
        total = total.add(gm)?;
    }
    let mut per_env = transfer_losses.clone();
    per_env[q] = inner_q.item();
    let report = RiskReport {
        per_env,
        erm_term: erm.item(),
        transfer_term: transfer.item(),
        grad_match_term: grad_match,
        ..Default::default()
    };
    Ok(TrmStep { objective: Objective { total, report: report.finish(&sizes(batches)) }, v_q, transfer_losses })
}
