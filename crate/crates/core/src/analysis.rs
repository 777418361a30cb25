//! Weight-ratio analysis of the 2-d linear case and the counterexample harness.
//!
//! * [`bruteforce_ratio`] scans `Φ(θ) = (cos θ, sin θ)` on a uniform grid and
//!   is the independent oracle for trained ratios.
//! * [`ratio_sweep`] trains ERM, IRMv1 and TRM over a μ_c or E axis.
//! * [`build_counterexample`] / [`certify_counterexample`] construct the
//!   piecewise classifier with near-optimal IRMv1 loss and high transfer risk
//!   and certify it by Monte Carlo.
//!
//! The analytic approximations of the ratios are not implemented; only
//! empirical ratios are reported.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::envgen::{env_rng, make_suite, EnvData, EnvError, Labels, Materialize, SuiteConfig};
use crate::inner::InverseHvp;
use crate::logistic::{loss, loss_prime};
use crate::model::Model;
use crate::objectives::{ObjectiveError, TrmHyper, Variant};
use crate::trainer::{self, Algorithm, TrainConfig, TrainError};

pub const SWEEP_VERSION: &str = "# transfer-risk ratio sweep v1";
pub const CERTIFICATE_VERSION: &str = "# transfer-risk certificate v1";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("construction geometry violated: {}", .0.join("; "))]
    Geometry(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error("{clause}: 95% CI half-width {achieved:.3e} still covers the threshold (needs < {target:.3e}) after {samples} samples per environment")]
    Precision { clause: String, achieved: f64, target: f64, samples: usize },
}

type Result<T> = std::result::Result<T, AnalysisError>;

/// `|b/a|`; `a = 0` gives the `+∞` sentinel.
pub fn weight_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        f64::INFINITY
    } else {
        (b / a).abs()
    }
}

/// Objectives the brute-force oracle can scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioObjective {
    /// `min_w Σ_P E_P[ℓ(wΦ)]`.
    Erm,
    /// `min_w Σ_P (E_P[ℓ(wΦ)] + λ (∂_w E_P[ℓ(wΦ)])²)`.
    Irmv1 { lambda: f64 },
    /// TRM's expected per-step objective: `min_w mean_Q E_Q[ℓ(wΦ)]`
    /// plus `mean_Q` of the sum-sum mean or sum-sup max of `E_P[ℓ(w(Q)Φ)]`.
    Trm { variant: Variant },
}

/// Closed-form `w(Q) = 2(aμ_c + bμ_Q)/(a²σ_c² + b²σ_e²)` for Gaussian populations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub mu_c: f64,
    pub means: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_e: f64,
}

impl ClosedForm {
    pub fn predictor(&self, a: f64, b: f64, env: usize) -> f64 {
        2.0 * (a * self.mu_c + b * self.means[env]) / (a * a * self.sigma_c.powi(2) + b * b * self.sigma_e.powi(2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub thetas: Vec<f64>,
    pub values: Vec<f64>,
    /// First grid index attaining the minimum.
    pub argmin: usize,
    pub theta: f64,
    pub ratio: f64,
    /// Grid spacing `2π / grid`.
    pub step: f64,
}

impl BruteForce {
    /// `atan(ratio)`, the minimizer's angle folded into `[0, π/2]`.
    pub fn angle(&self) -> f64 {
        self.ratio.atan()
    }
}

/// `y·x` rows of a binary 2-d environment, with probability weights.
struct Margins {
    u1: Vec<f64>,
    u2: Vec<f64>,
    p: Vec<f64>,
}

impl Margins {
    fn new(env: &EnvData) -> Result<Self> {
        let Labels::Binary(y) = &env.labels else {
            return Err(AnalysisError::Invalid("the 2-d analysis needs binary labels".into()));
        };
        if env.dim() != 2 {
            return Err(AnalysisError::Invalid(format!("the 2-d analysis needs 2 input features, got {}", env.dim())));
        }
        let (mut u1, mut u2) = (Vec::with_capacity(y.len()), Vec::with_capacity(y.len()));
        for (i, yi) in y.iter().enumerate() {
            let r = env.features.row(i);
            u1.push(yi * r[0]);
            u2.push(yi * r[1]);
        }
        Ok(Self { u1, u2, p: env.weights.clone() })
    }

    fn project(&self, a: f64, b: f64) -> Vec<f64> {
        self.u1.iter().zip(&self.u2).map(|(x, z)| a * x + b * z).collect()
    }
}

/// `(L, L', L'', L''')` of `w ↦ Σ p ℓ(w z)`; one exponential per point.
fn moments(z: &[f64], p: &[f64], w: f64) -> [f64; 4] {
    let mut m = [0.0; 4];
    for (zi, pi) in z.iter().zip(p) {
        let x = w * zi;
        let e = (-x.abs()).exp();
        let s_abs = 1.0 / (1.0 + e);
        let sig = if x >= 0.0 { s_abs } else { e * s_abs };
        let l2 = e * s_abs * s_abs;
        m[0] += pi * (e.ln_1p() + (-x).max(0.0));
        m[1] += pi * (sig - 1.0) * zi;
        m[2] += pi * l2 * zi * zi;
        m[3] += pi * l2 * (1.0 - 2.0 * sig) * zi * zi * zi;
    }
    m
}

/// Safeguarded Newton on a scalar function given `(f, f', f'')`.
fn minimize_1d(f: impl Fn(f64) -> (f64, f64, f64), w0: f64) -> f64 {
    const CAP: f64 = 1e3;
    let mut w = w0;
    let (mut fw, mut g, mut h) = f(w);
    for _ in 0..200 {
        if g.abs() <= 1e-13 {
            break;
        }
        let d = if h > 0.0 { -g / h } else { -g };
        if d.abs() <= 1e-12 * w.abs().max(1.0) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = (w + t * d).clamp(-CAP, CAP);
            let (fc, gc, hc) = f(cand);
            // Near the optimum `f` is flat to rounding, so a step that halves
            // the gradient without raising `f` beyond rounding also counts.
            let flat = fc <= fw + 1e-13 * fw.abs().max(1.0) && gc.abs() < 0.5 * g.abs();
            if fc <= fw + 1e-4 * t * g * d || flat {
                moved = cand != w;
                w = cand;
                (fw, g, h) = (fc, gc, hc);
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    w
}

fn pooled_w(zs: &[Vec<f64>], ps: &[&[f64]], w0: f64) -> f64 {
    minimize_1d(
        |w| {
            let mut acc = (0.0, 0.0, 0.0);
            for (z, p) in zs.iter().zip(ps) {
                let m = moments(z, p, w);
                acc = (acc.0 + m[0], acc.1 + m[1], acc.2 + m[2]);
            }
            acc
        },
        w0,
    )
}

/// Newton starting points carried from one grid angle to the next.
struct Warm {
    pool: f64,
    irm: f64,
    per_env: Vec<f64>,
}

fn objective_at(envs: &[Margins], objective: RatioObjective, closed: Option<&ClosedForm>, theta: f64, warm: &mut Warm) -> f64 {
    let (a, b) = (theta.cos(), theta.sin());
    let zs: Vec<Vec<f64>> = envs.iter().map(|m| m.project(a, b)).collect();
    let ps: Vec<&[f64]> = envs.iter().map(|m| m.p.as_slice()).collect();
    let e = envs.len();
    let w_pool = pooled_w(&zs, &ps, warm.pool);
    warm.pool = w_pool;
    let risk = |i: usize, w: f64| moments(&zs[i], ps[i], w)[0];
    match objective {
        RatioObjective::Erm => (0..e).map(|i| risk(i, w_pool)).sum(),
        RatioObjective::Irmv1 { lambda } => {
            let f = |w: f64| {
                let mut acc = (0.0, 0.0, 0.0);
                for i in 0..e {
                    let [l, g, h, t] = moments(&zs[i], ps[i], w);
                    acc.0 += l + lambda * g * g;
                    acc.1 += g + 2.0 * lambda * g * h;
                    acc.2 += h + 2.0 * lambda * (h * h + g * t);
                }
                acc
            };
            let w = minimize_1d(f, if warm.irm.is_nan() { w_pool } else { warm.irm });
            warm.irm = w;
            f(w).0
        }
        RatioObjective::Trm { variant } => {
            let erm: f64 = (0..e).map(|i| risk(i, w_pool)).sum::<f64>() / e as f64;
            let mut transfer = 0.0;
            for q in 0..e {
                let wq = match closed {
                    Some(c) => c.predictor(a, b, q),
                    None => minimize_1d(
                        |w| {
                            let m = moments(&zs[q], ps[q], w);
                            (m[0], m[1], m[2])
                        },
                        warm.per_env[q],
                    ),
                };
                warm.per_env[q] = wq;
                let others = (0..e).filter(|&p| p != q).map(|p| risk(p, wq));
                transfer += match variant {
                    Variant::SumSum => others.sum::<f64>() / (e - 1) as f64,
                    Variant::SumSup => others.fold(f64::NEG_INFINITY, f64::max),
                };
            }
            erm + transfer / e as f64
        }
    }
}

/// Scans `θ_i = 2πi/grid` and returns `|tan θ*|` at the first grid minimizer.
pub fn bruteforce_ratio(envs: &[EnvData], objective: RatioObjective, grid: usize, closed_form: Option<&ClosedForm>) -> Result<BruteForce> {
    if grid < 4 {
        return Err(AnalysisError::Invalid(format!("angle grid needs at least 4 points, got {grid}")));
    }
    if matches!(objective, RatioObjective::Trm { .. }) && envs.len() < 2 {
        return Err(ObjectiveError::TooFewEnvironments { what: "transfer risk", min: 2, got: envs.len() }.into());
    }
    if let Some(c) = closed_form {
        if c.means.len() != envs.len() {
            return Err(AnalysisError::Invalid(format!("{} closed-form means for {} environments", c.means.len(), envs.len())));
        }
    }
    let margins = envs.iter().map(Margins::new).collect::<Result<Vec<_>>>()?;
    let step = std::f64::consts::TAU / grid as f64;
    let thetas: Vec<f64> = (0..grid).map(|i| i as f64 * step).collect();
    // Fixed chunks keep the result independent of the thread count; within a
    // chunk each Newton solve starts from the previous angle's solution.
    let values: Vec<f64> = thetas
        .par_chunks(64)
        .flat_map_iter(|chunk| {
            let mut warm = Warm { pool: 0.0, irm: f64::NAN, per_env: vec![0.0; margins.len()] };
            chunk.iter().map(|t| objective_at(&margins, objective, closed_form, *t, &mut warm)).collect::<Vec<_>>()
        })
        .collect();
    let mut argmin = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[argmin] {
            argmin = i;
        }
    }
    let theta = thetas[argmin];
    Ok(BruteForce { ratio: weight_ratio(theta.cos(), theta.sin()), theta, thetas, values, argmin, step })
}

/// Whether a trained ratio lies within `steps` grid steps of the oracle's angle.
pub fn within_grid_steps(trained_ratio: f64, oracle: &BruteForce, steps: f64) -> bool {
    (trained_ratio.atan() - oracle.angle()).abs() <= steps * oracle.step
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    MuC(Vec<f64>),
    Envs(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::MuC(_) => "mu_c",
            SweepAxis::Envs(_) => "envs",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::MuC(v) => v.clone(),
            SweepAxis::Envs(v) => v.iter().map(|e| *e as f64).collect(),
        }
    }
}

/// A weight-ratio sweep in the 2-d linear setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// μ_c for E sweeps.
    pub mu_c: f64,
    /// E for μ_c sweeps.
    pub envs: usize,
    /// Target mean and variance of the non-causal means across environments.
    pub mean: f64,
    pub variance: f64,
    pub seeds: Vec<u64>,
    /// Gauss–Hermite nodes per latent dimension.
    pub nodes: usize,
    pub lambda_irm: f64,
    pub trm: TrmHyper,
    /// Optimizer settings; algorithm and seed are set per run.
    pub train: TrainConfig,
}

impl SweepSpec {
    /// Ten seeds, quadrature populations, IRMv1 λ = 1, TRM sum-sum with λ = 1
    /// and exact inverse Hessian, and the constrained weight-ratio protocol.
    pub fn new(axis: SweepAxis) -> Self {
        Self {
            axis,
            mu_c: 1.0,
            envs: 5,
            mean: 1.0,
            variance: 1.0,
            seeds: (0..10).collect(),
            nodes: 20,
            lambda_irm: 1.0,
            trm: TrmHyper { lambda: 1.0, inverse: InverseHvp::Exact, variant: Variant::SumSum },
            train: TrainConfig::weight_ratio(Algorithm::Erm, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnalysisError::Invalid(m));
        match &self.axis {
            SweepAxis::MuC(v) if v.is_empty() => return bad("mu_c axis is empty".into()),
            SweepAxis::Envs(v) if v.is_empty() => return bad("envs axis is empty".into()),
            SweepAxis::MuC(v) => {
                if let Some(m) = v.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
                    return bad(format!("mu_c axis value {m} must be positive"));
                }
            }
            SweepAxis::Envs(v) => {
                if let Some(e) = v.iter().find(|e| **e < 2) {
                    return bad(format!("envs axis value {e} must be at least 2"));
                }
            }
        }
        if !(self.mu_c > 0.0) || self.envs < 2 {
            return bad(format!("base point needs mu_c > 0 and envs ≥ 2, got {} and {}", self.mu_c, self.envs));
        }
        if !(self.variance >= 0.0) || !self.mean.is_finite() {
            return bad("mean must be finite and variance non-negative".into());
        }
        if self.seeds.is_empty() || self.nodes == 0 {
            return bad("a sweep needs at least one seed and one quadrature node".into());
        }
        self.train.validate()?;
        Ok(())
    }

    fn algorithms(&self) -> [Algorithm; 3] {
        [Algorithm::Erm, Algorithm::Irmv1 { lambda: self.lambda_irm, warmup: 0 }, Algorithm::Trm(self.trm)]
    }

    fn suite(&self, value: f64, seed: u64) -> Result<Vec<EnvData>> {
        let (mu_c, envs) = match self.axis {
            SweepAxis::MuC(_) => (value, self.envs),
            SweepAxis::Envs(_) => (self.mu_c, value as usize),
        };
        let mut cfg = SuiteConfig::linear(envs, mu_c, self.mean, self.variance);
        cfg.materialize = Materialize::Quadrature { nodes: self.nodes };
        Ok(make_suite(&cfg, seed)?.envs)
    }
}

/// One trained run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub value: f64,
    pub algorithm: &'static str,
    pub seed: u64,
    pub ratio: f64,
    /// Mean over environments of `E_P[ℓ²]` for the trained model.
    pub mean_square_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Per-seed ratios, in seed order.
    pub erm: Vec<f64>,
    pub irmv1: Vec<f64>,
    pub trm: Vec<f64>,
    /// Diagnostic `k` per seed: the mean squared loss of the IRMv1 model.
    pub k_irmv1: Vec<f64>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Normal-approximation 95% half-width of the mean.
pub fn half_width(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    1.96 * (var / n).sqrt()
}

fn ratios(num: &[f64], den: &[f64]) -> Vec<f64> {
    num.iter().zip(den).map(|(n, d)| n / d).collect()
}

impl SweepPoint {
    pub fn erm_over_trm(&self) -> Vec<f64> {
        ratios(&self.erm, &self.trm)
    }

    pub fn irmv1_over_trm(&self) -> Vec<f64> {
        ratios(&self.irmv1, &self.trm)
    }

    /// `median r_TRM ≤ median r_IRMv1 ≤ median r_ERM`.
    pub fn ordered(&self) -> bool {
        median(&self.trm) <= median(&self.irmv1) && median(&self.irmv1) <= median(&self.erm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioSweepResult {
    pub axis: &'static str,
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
}

/// Number of strict increases along a sequence that should not increase.
pub fn inversions(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

impl RatioSweepResult {
    pub fn median_erm_over_trm(&self) -> Vec<f64> {
        self.points.iter().map(|p| median(&p.erm_over_trm())).collect()
    }

    /// Rows `axis,value,algorithm,seed,ratio` in run order.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{SWEEP_VERSION}")?;
        writeln!(out, "axis,value,algorithm,seed,ratio")?;
        for r in &self.runs {
            writeln!(out, "{},{},{},{},{}", self.axis, r.value, r.algorithm, r.seed, r.ratio)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:>8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>10}\n",
            self.axis, "r_erm", "r_irmv1", "r_trm", "erm/trm", "irmv1/trm", "ordered", "k_irmv1"
        );
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:>8} {:>10.5} {:>10.5} {:>10.5} {:>10.4} {:>10.4} {:>8} {:>10.4}",
                p.value,
                median(&p.erm),
                median(&p.irmv1),
                median(&p.trm),
                median(&p.erm_over_trm()),
                median(&p.irmv1_over_trm()),
                p.ordered(),
                median(&p.k_irmv1),
            );
        }
        let _ = writeln!(
            s,
            "seeds: {}; medians over seeds; ± half-widths (95%): erm {:.4}, trm {:.4} at the first point",
            self.seeds.len(),
            self.points.first().map_or(f64::NAN, |p| half_width(&p.erm)),
            self.points.first().map_or(f64::NAN, |p| half_width(&p.trm)),
        );
        s
    }
}

fn mean_square_loss(model: &Model, envs: &[EnvData]) -> f64 {
    let mut total = 0.0;
    for env in envs {
        let s = model.phi.apply(&env.features).matvec(model.w_all.data());
        let Labels::Binary(y) = &env.labels else { return f64::NAN };
        total += s.iter().zip(y).zip(&env.weights).map(|((s, y), p)| p * loss(y * s).powi(2)).sum::<f64>();
    }
    total / envs.len() as f64
}

/// Trains ERM, IRMv1 and TRM at every axis value and seed; jobs run on the
/// ambient rayon pool and results are assembled in a fixed order.
pub fn ratio_sweep(spec: &SweepSpec) -> Result<RatioSweepResult> {
    spec.validate()?;
    let values = spec.axis.values();
    let algs = spec.algorithms();
    let jobs: Vec<(f64, u64, usize)> =
        values.iter().flat_map(|v| spec.seeds.iter().flat_map(move |s| (0..3).map(move |a| (*v, *s, a)))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(value, seed, a)| {
            let envs = spec.suite(value, seed)?;
            let cfg = TrainConfig { algorithm: algs[a], seed, ..spec.train.clone() };
            let out = trainer::train_from(&envs, trainer::init_model(&envs, &cfg)?, &cfg)?;
            let (x, y) = out.family.model.phi.as_pair().ok_or_else(|| AnalysisError::Invalid("sweep model is not a 2-d pair".into()))?;
            Ok(SweepRun {
                value,
                algorithm: algs[a].tag(),
                seed,
                ratio: weight_ratio(x, y),
                mean_square_loss: mean_square_loss(&out.family.model, &envs),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points = values
        .iter()
        .map(|v| {
            let pick = |tag: &str| runs.iter().filter(|r| r.value == *v && r.algorithm == tag).map(|r| r.ratio).collect();
            SweepPoint {
                value: *v,
                erm: pick("erm"),
                irmv1: pick("irmv1"),
                trm: pick("trm"),
                k_irmv1: runs.iter().filter(|r| r.value == *v && r.algorithm == "irmv1").map(|r| r.mean_square_loss).collect(),
            }
        })
        .collect();
    Ok(RatioSweepResult { axis: spec.axis.name(), points, seeds: spec.seeds.clone(), runs })
}

/// Geometry of the counterexample.
///
/// `means[far]` is the far-separated non-causal mean `μ_i`; `means[partner]`
/// is a `μ_j` with `μ_iᵀμ_j ≤ −‖μ_c‖²/σ_c²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstructionSpec {
    pub d_c: usize,
    pub d_e: usize,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub mu_c: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub far: usize,
    pub partner: usize,
    pub mc_samples: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ConstructionSpec {
    /// Deterministic recipe: `μ_c = (√d_e/√d_c)·1`, `μ_i = 4√d_e·e_1`,
    /// `μ_j = −μ_i·‖μ_c‖²/(σ_c²‖μ_i‖²)`, remaining means `4√d_e·e_k`.
    pub fn recipe(d_c: usize, d_e: usize, envs: usize, sigma_c: f64, mc_samples: usize) -> Result<Self> {
        if envs < 3 {
            return Err(AnalysisError::Invalid(format!("the recipe needs at least 3 environments, got {envs}")));
        }
        if d_e < envs - 1 || d_c == 0 {
            return Err(AnalysisError::Invalid(format!("the recipe needs d_c ≥ 1 and d_e ≥ E−1 = {}, got d_c={d_c}, d_e={d_e}", envs - 1)));
        }
        let s = (d_e as f64).sqrt();
        let mu_c = vec![s / (d_c as f64).sqrt(); d_c];
        let basis = |k: usize| -> Vec<f64> { (0..d_e).map(|j| if j == k { 4.0 * s } else { 0.0 }).collect() };
        let mu_i = basis(0);
        let c = dot(&mu_c, &mu_c) / (sigma_c * sigma_c * dot(&mu_i, &mu_i));
        let mut means = vec![mu_i.clone(), mu_i.iter().map(|v| -c * v).collect()];
        means.extend((2..envs).map(|k| basis(k - 1)));
        Ok(Self { d_c, d_e, sigma_c, sigma_e: 1.0, mu_c, means, far: 0, partner: 1, mc_samples })
    }

    pub fn envs(&self) -> usize {
        self.means.len()
    }

    /// `r = √(2 d_e)`.
    pub fn radius(&self) -> f64 {
        (2.0 * self.d_e as f64).sqrt()
    }

    /// Every violated constraint, quoted with its bound.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let sde = (self.d_e as f64).sqrt();
        if self.mu_c.len() != self.d_c {
            v.push(format!("μ_c has {} entries, d_c = {}", self.mu_c.len(), self.d_c));
        }
        if let Some(k) = self.means.iter().position(|m| m.len() != self.d_e) {
            v.push(format!("μ_{k} has {} entries, d_e = {}", self.means[k].len(), self.d_e));
        }
        if !(self.sigma_c > 0.0 && self.sigma_e > 0.0) {
            v.push(format!("σ_c = {} and σ_e = {} must be positive", self.sigma_c, self.sigma_e));
        }
        if self.envs() < 2 || self.far >= self.envs() || self.partner >= self.envs() || self.far == self.partner {
            v.push(format!("need ≥ 2 environments with distinct far ({}) and partner ({}) indices", self.far, self.partner));
        }
        if self.mc_samples == 0 {
            v.push("mc_samples must be positive".into());
        }
        if !v.is_empty() {
            return v;
        }
        // The recipe sits exactly on the lower bound, so allow round-off.
        let tol = 1e-12 * sde;
        let nc = norm(&self.mu_c);
        if nc < sde - tol {
            v.push(format!("‖μ_c‖ = {nc:.4} < √d_e = {sde:.4}"));
        }
        if nc > 8.0 * sde + tol {
            v.push(format!("‖μ_c‖ = {nc:.4} > 8√d_e = {:.4}", 8.0 * sde));
        }
        for (k, m) in self.means.iter().enumerate() {
            if norm(m) > 8.0 * sde + tol {
                v.push(format!("‖μ_{k}‖ = {:.4} > 8√d_e = {:.4}", norm(m), 8.0 * sde));
            }
        }
        let two_r = 2.0 * self.radius();
        let mi = &self.means[self.far];
        for (k, m) in self.means.iter().enumerate().filter(|(k, _)| *k != self.far) {
            let d = norm(&mi.iter().zip(m).map(|(a, b)| a - b).collect::<Vec<_>>());
            if d < two_r - tol {
                v.push(format!("‖μ_{} − μ_{k}‖ = {d:.4} < 2√(2d_e) = {two_r:.4}", self.far));
            }
            let s = norm(&mi.iter().zip(m).map(|(a, b)| a + b).collect::<Vec<_>>());
            if s < two_r - tol {
                v.push(format!("‖μ_{} + μ_{k}‖ = {s:.4} < 2√(2d_e) = {two_r:.4}", self.far));
            }
        }
        let bound = -dot(&self.mu_c, &self.mu_c) / (self.sigma_c * self.sigma_c);
        let ip = dot(mi, &self.means[self.partner]);
        if ip > bound + 1e-9 * bound.abs().max(1.0) {
            v.push(format!("μ_{}ᵀμ_{} = {ip:.4} > −‖μ_c‖²/σ_c² = {bound:.4}", self.far, self.partner));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AnalysisError::Geometry(v))
        }
    }
}

/// `Φ(z) = [z_c; 0]` when `z_e` lies in a ball of radius `r` around some
/// `±μ_k` (`k ≠ i`), else `[z_c; z_e]`, scored with `w = (w_c, w_e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseClassifier {
    pub w_c: Vec<f64>,
    pub w_e: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    /// Use `[z_c; 0]` everywhere.
    pub invariant_only: bool,
}

impl PiecewiseClassifier {
    /// No geometry checks; see [`build_counterexample`].
    pub fn from_parts(w_c: Vec<f64>, w_e: Vec<f64>, centers: Vec<Vec<f64>>, radius: f64) -> Self {
        Self { w_c, w_e, centers, radius, invariant_only: false }
    }

    /// The pure invariant classifier `Φ = [z_c; 0]`, `w_c = 2μ_c/σ_c²`.
    pub fn invariant(spec: &ConstructionSpec) -> Self {
        let w_c = spec.mu_c.iter().map(|m| 2.0 * m / spec.sigma_c.powi(2)).collect();
        Self { w_c, w_e: vec![0.0; spec.d_e], centers: Vec::new(), radius: spec.radius(), invariant_only: true }
    }

    pub fn invariant_branch(&self, z_e: &[f64]) -> bool {
        if self.invariant_only {
            return true;
        }
        let zz = dot(z_e, z_e);
        let r2 = self.radius * self.radius;
        self.centers.iter().any(|c| {
            let (cc, zc) = (dot(c, c), dot(z_e, c));
            zz - 2.0 * zc + cc <= r2 || zz + 2.0 * zc + cc <= r2
        })
    }

    pub fn features(&self, z_c: &[f64], z_e: &[f64]) -> Vec<f64> {
        let mut f = z_c.to_vec();
        if self.invariant_branch(z_e) {
            f.extend(std::iter::repeat_n(0.0, z_e.len()));
        } else {
            f.extend_from_slice(z_e);
        }
        f
    }

    pub fn score(&self, z_c: &[f64], z_e: &[f64]) -> f64 {
        self.score_with(&self.w_e, z_c, z_e)
    }

    /// Score with a different non-causal weight on the same features.
    pub fn score_with(&self, w_e: &[f64], z_c: &[f64], z_e: &[f64]) -> f64 {
        let s = dot(&self.w_c, z_c);
        if self.invariant_branch(z_e) {
            s
        } else {
            s + dot(w_e, z_e)
        }
    }
}

/// The classifier of the construction: `w = (2μ_c/σ_c², 2μ_i/σ_e²)`.
pub fn build_counterexample(spec: &ConstructionSpec) -> Result<PiecewiseClassifier> {
    spec.validate()?;
    let w_c = spec.mu_c.iter().map(|m| 2.0 * m / spec.sigma_c.powi(2)).collect();
    let w_e = spec.means[spec.far].iter().map(|m| 2.0 * m / spec.sigma_e.powi(2)).collect();
    let centers = spec.means.iter().enumerate().filter(|(k, _)| *k != spec.far).map(|(_, m)| m.clone()).collect();
    Ok(PiecewiseClassifier::from_parts(w_c, w_e, centers, spec.radius()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifyConfig {
    pub mc_samples: usize,
    pub seed: u64,
    /// Batches for the batch-means confidence intervals.
    pub batches: usize,
    /// Sample-doubling rounds before giving up.
    pub max_rounds: usize,
}

impl CertifyConfig {
    pub fn new(mc_samples: usize, seed: u64) -> Self {
        Self { mc_samples, seed, batches: 100, max_rounds: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub name: &'static str,
    pub env: Option<usize>,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub clauses: Vec<Clause>,
    /// `(estimate, low, high)` of `E_P[ℓ]` per environment.
    pub env_loss: Vec<(f64, f64, f64)>,
    pub samples_per_env: usize,
    pub seed: u64,
    pub d_e: usize,
    pub passed: bool,
}

impl Certificate {
    pub fn clause(&self, name: &str) -> impl Iterator<Item = &Clause> {
        let name = name.to_string();
        self.clauses.iter().filter(move |c| c.name == name)
    }

    pub fn write_csv(&self, out: &mut impl Write, config_hash: &str) -> io::Result<()> {
        writeln!(out, "{CERTIFICATE_VERSION}")?;
        writeln!(out, "# config_hash={config_hash} seed={} samples_per_env={} d_e={}", self.seed, self.samples_per_env, self.d_e)?;
        writeln!(out, "clause,env,estimate,ci_low,ci_high,threshold,bound,pass")?;
        for c in &self.clauses {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.name,
                c.env.map(|e| e.to_string()).unwrap_or_else(|| "all".into()),
                c.estimate,
                c.ci_low,
                c.ci_high,
                c.threshold,
                match c.bound {
                    Bound::AtMost => "at_most",
                    Bound::AtLeast => "at_least",
                },
                c.pass
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("certificate d_e={} samples/env={} seed={}: {}\n", self.d_e, self.samples_per_env, self.seed, if self.passed { "PASS" } else { "FAIL" });
        for c in &self.clauses {
            let op = if c.bound == Bound::AtMost { "≤" } else { "≥" };
            let env = c.env.map(|e| format!("[{e}]")).unwrap_or_default();
            let _ = writeln!(
                s,
                "  {}{env}: {:.5} (95% CI {:.5} .. {:.5}) {op} {} → {}",
                c.name,
                c.estimate,
                c.ci_low,
                c.ci_high,
                c.threshold,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

/// Batch means of the four per-sample statistics.
#[derive(Clone, Copy, Default)]
struct BatchStats {
    loss: f64,
    excess: f64,
    irm: f64,
    transfer: f64,
}

fn batch_stats(clf: &PiecewiseClassifier, spec: &ConstructionSpec, w_j: &[f64], env: usize, n: usize, seed: u64, batch: usize) -> BatchStats {
    let mut rng = env_rng(seed, ((env as u64) << 32) | batch as u64);
    let mu_e = &spec.means[env];
    let mut z_c = vec![0.0; spec.d_c];
    let mut z_e = vec![0.0; spec.d_e];
    let mut acc = BatchStats::default();
    for _ in 0..n {
        let y: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for (z, m) in z_c.iter_mut().zip(&spec.mu_c) {
            *z = y * m + spec.sigma_c * rng.sample::<f64, _>(StandardNormal);
        }
        for (z, m) in z_e.iter_mut().zip(mu_e) {
            *z = y * m + spec.sigma_e * rng.sample::<f64, _>(StandardNormal);
        }
        let s_c = dot(&clf.w_c, &z_c);
        let inv = clf.invariant_branch(&z_e);
        let (s, t) = if inv { (s_c, s_c) } else { (s_c + dot(&clf.w_e, &z_e), s_c + dot(w_j, &z_e)) };
        let (m, m_inv, m_t) = (y * s, y * s_c, y * t);
        let l = loss(m);
        acc.loss += l;
        acc.excess += l - loss(m_inv);
        acc.irm += loss_prime(m) * m;
        acc.transfer += loss(m_t);
    }
    let k = n as f64;
    BatchStats { loss: acc.loss / k, excess: acc.excess / k, irm: acc.irm / k, transfer: acc.transfer / k }
}

/// `(mean, low, high)` from batch means with a Student-t interval.
fn interval(v: &[f64]) -> (f64, f64, f64) {
    let b = v.len() as f64;
    let m = v.iter().sum::<f64>() / b;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, b - 1.0).expect("dof ≥ 1").inverse_cdf(0.975);
    let h = t * sd / b.sqrt();
    (m, m - h, m + h)
}

/// Monte-Carlo certificate for the constructed classifier.
///
/// Clauses: IRMv1 penalty `(E_P[ℓ'(m)m])²` per environment `≤ 0.05`, pooled
/// excess loss over the invariant classifier `≤ 0.05`, and the transfer
/// statistic `E_{P_i}[ℓ(w_j∘Φ)]` with `w_j = (2μ_c/σ_c², 2μ_j/σ_e²)` `≥ 0.5`,
/// each judged on its 95% batch-means interval. Samples double while any
/// interval still contains its threshold.
pub fn certify_counterexample(clf: &PiecewiseClassifier, spec: &ConstructionSpec, cfg: &CertifyConfig) -> Result<Certificate> {
    spec.validate()?;
    if cfg.batches < 2 || cfg.mc_samples < cfg.batches {
        return Err(AnalysisError::Invalid(format!("need ≥ 2 batches and at least one sample per batch, got {} samples in {} batches", cfg.mc_samples, cfg.batches)));
    }
    let e = spec.envs();
    let w_j: Vec<f64> = spec.means[spec.partner].iter().map(|m| 2.0 * m / spec.sigma_e.powi(2)).collect();
    let per_batch = cfg.mc_samples / cfg.batches;
    let mut stats: Vec<Vec<BatchStats>> = vec![Vec::new(); e];
    let mut batches = cfg.batches;
    let mut round = 0;
    loop {
        let have = stats[0].len();
        let jobs: Vec<(usize, usize)> = (0..e).flat_map(|env| (have..batches).map(move |b| (env, b))).collect();
        let fresh: Vec<BatchStats> = jobs.par_iter().map(|&(env, b)| batch_stats(clf, spec, &w_j, env, per_batch, cfg.seed, b)).collect();
        for (&(env, _), s) in jobs.iter().zip(fresh) {
            stats[env].push(s);
        }
        let cert = assemble(&stats, spec, cfg.seed, per_batch * batches);
        // A clause is settled once its interval excludes the threshold.
        let open = cert.clauses.iter().find(|c| c.ci_low <= c.threshold && c.threshold <= c.ci_high);
        let Some(open) = open else { return Ok(cert) };
        if round == cfg.max_rounds {
            return Err(AnalysisError::Precision {
                clause: open.name.to_string(),
                achieved: 0.5 * (open.ci_high - open.ci_low),
                target: (open.estimate - open.threshold).abs(),
                samples: per_batch * batches,
            });
        }
        round += 1;
        batches *= 2;
    }
}

fn assemble(stats: &[Vec<BatchStats>], spec: &ConstructionSpec, seed: u64, samples: usize) -> Certificate {
    let e = stats.len();
    let mut clauses = Vec::new();
    for (env, s) in stats.iter().enumerate() {
        let g: Vec<f64> = s.iter().map(|b| b.irm).collect();
        let (m, lo, hi) = interval(&g);
        let low = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.powi(2).min(hi.powi(2)) };
        let high = lo.powi(2).max(hi.powi(2));
        clauses.push(Clause { name: "irmv1_penalty", env: Some(env), estimate: m * m, ci_low: low, ci_high: high, threshold: 0.05, bound: Bound::AtMost, pass: high <= 0.05 });
    }
    let pooled: Vec<f64> = (0..stats[0].len()).map(|b| stats.iter().map(|s| s[b].excess).sum::<f64>() / e as f64).collect();
    let (m, lo, hi) = interval(&pooled);
    clauses.push(Clause { name: "excess_erm", env: None, estimate: m, ci_low: lo, ci_high: hi, threshold: 0.05, bound: Bound::AtMost, pass: hi <= 0.05 });
    let t: Vec<f64> = stats[spec.far].iter().map(|b| b.transfer).collect();
    let (m, lo, hi) = interval(&t);
    clauses.push(Clause { name: "transfer_statistic", env: Some(spec.far), estimate: m, ci_low: lo, ci_high: hi, threshold: 0.5, bound: Bound::AtLeast, pass: lo >= 0.5 });
    let env_loss = stats.iter().map(|s| interval(&s.iter().map(|b| b.loss).collect::<Vec<_>>())).collect();
    let passed = clauses.iter().all(|c| c.pass);
    Certificate { clauses, env_loss, samples_per_env: samples, seed, d_e: spec.d_e, passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(weight_ratio(1.0, 0.0), 0.0);
        assert!((weight_ratio(0.6, 0.8) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(weight_ratio(0.0, 1.0), f64::INFINITY);
    }

    #[test]
    fn median_and_inversions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(inversions(&[3.0, 2.0, 2.5, 1.0]), 1);
    }

    #[test]
    fn scalar_newton_finds_logistic_optimum() {
        let z = [1.0, 2.0, -0.5, 0.3];
        let p = [0.25; 4];
        let w = minimize_1d(
            |w| {
                let m = moments(&z, &p, w);
                (m[0], m[1], m[2])
            },
            0.0,
        );
        assert!(moments(&z, &p, w)[1].abs() < 1e-12);
    }

    #[test]
    fn third_moment_matches_differences() {
        let z = [0.7, -1.2, 2.0];
        let p = [0.2, 0.3, 0.5];
        let (w, h) = (0.4, 1e-5);
        let fd = (moments(&z, &p, w + h)[2] - moments(&z, &p, w - h)[2]) / (2.0 * h);
        assert!((fd - moments(&z, &p, w)[3]).abs() < 1e-8);
    }
}
