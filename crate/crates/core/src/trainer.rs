//! Training loops for TRM and the ERM / IRMv1 / REx / GroupDRO
//! baselines over one model family, with per-iteration metric logging.
//!
//! Every step records the objective's components; the heavier evaluation
//! metrics (transfer risks, IRMv1 penalty, predictor distance) are computed
//! on the full environments every `log_every` iterations and at the end.

use std::borrow::Cow;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::weight_ratio;
use crate::autodiff::{AdError, Array, Tape};
use crate::envgen::{env_rng, EnvData, Labels};
use crate::inner::{self, Batch, SolverConfig};
use crate::model::{FeatureMap, Model};
use crate::objectives::{
    self, eg_update, groupdro_weights_update, ObjectiveError, RiskReport, SimplexWeights, TrmHyper, Variant,
};

/// Header line of every metrics CSV.
pub const METRICS_VERSION: &str = "# transfer-risk run metrics v1";

const STREAM_INIT: u64 = u64::MAX - 2;
const STREAM_ENV: u64 = u64::MAX - 3;
const STREAM_BATCH: u64 = u64::MAX - 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite {what} at iteration {iteration}; returning the last finite parameters")]
    Diverged { iteration: usize, what: String, last_good: Box<Model>, metrics: Box<RunMetrics> },
    #[error("{0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    Erm,
    /// Penalty switched on after `warmup` iterations.
    Irmv1 { lambda: f64, warmup: usize },
    Rex { beta: f64, warmup: usize },
    /// `eta` is the group-weight step size.
    GroupDro { eta: f64 },
    Trm(TrmHyper),
}

impl Algorithm {
    pub fn tag(&self) -> &'static str {
        match self {
            Algorithm::Erm => "erm",
            Algorithm::Irmv1 { .. } => "irmv1",
            Algorithm::Rex { .. } => "rex",
            Algorithm::GroupDro { .. } => "groupdro",
            Algorithm::Trm(_) => "trm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Heavy-ball SGD using [`TrainConfig::momentum`].
    Momentum,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// How TRM picks `Q` each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvSampling {
    /// Uniform with replacement.
    Uniform,
    /// A fresh random permutation of the environments every `E` iterations.
    Reshuffle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Constant for the first `hold` fraction of the run, then cosine decay to zero.
    CosineTail { hold: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhiInit {
    /// `(cos t, sin t)` with `t ~ U(−π/2, π/2)`; 1×2 linear maps only.
    Angle,
    /// Every entry `~ U(−scale, scale)`.
    Uniform { scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Linear { out: usize },
    /// Bias-free tanh perceptron.
    Mlp { hidden: usize, out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_phi: f64,
    pub lr_w: f64,
    /// EG step size for TRM's `α(Q)`.
    pub eta_alpha: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Full environments every step (quadrature populations or fixed samples).
    /// When false each step draws `batch_size` rows per environment.
    pub population_mode: bool,
    pub batch_size: usize,
    /// In minibatch mode, solve `w(Q)` on the step's batch of `Q` instead of
    /// the full environment.
    pub solve_on_batch: bool,
    /// Keep a 1×2 linear `Φ` on the unit circle by renormalizing after each step.
    pub constrained: bool,
    /// In constrained mode, drop the radial gradient component before the step.
    pub tangent_projection: bool,
    pub env_sampling: EnvSampling,
    pub lr_schedule: LrSchedule,
    pub architecture: Architecture,
    pub init: PhiInit,
    pub w_all_init: f64,
    /// Start `w_all` at the pooled-ERM optimum for the initial `Φ`.
    pub warm_start_w_all: bool,
    /// Evaluation metrics every this many iterations (0: final iteration only).
    pub log_every: usize,
    pub solver: SolverConfig,
}

impl TrainConfig {
    /// SGD with momentum 0.9 on full environments.
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            lr_phi: 0.01,
            lr_w: 0.01,
            eta_alpha: 0.1,
            momentum: 0.9,
            optimizer: Optimizer::Momentum,
            iterations: 2000,
            seed: 0,
            algorithm,
            population_mode: true,
            batch_size: 1024,
            solve_on_batch: false,
            constrained: false,
            tangent_projection: true,
            env_sampling: EnvSampling::Uniform,
            lr_schedule: LrSchedule::Constant,
            architecture: Architecture::Linear { out: 1 },
            init: PhiInit::Uniform { scale: 0.7071 },
            w_all_init: 1.0,
            warm_start_w_all: false,
            log_every: 10,
            solver: SolverConfig::default(),
        }
    }

    /// The constrained 2-d weight-ratio protocol: Adam at 0.01, reshuffled `Q`,
    /// a cosine tail over the second half, `w_all` warm-started.
    pub fn weight_ratio(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::adam(),
            seed,
            constrained: true,
            env_sampling: EnvSampling::Reshuffle,
            lr_schedule: LrSchedule::CosineTail { hold: 0.5 },
            init: PhiInit::Angle,
            warm_start_w_all: true,
            log_every: 0,
            // w_all must travel several units at large mu_c; lr 0.01 over
            // 2000 steps leaves it short and the ratio off by several grid steps.
            lr_w: 0.1,
            iterations: 4000,
            ..Self::new(algorithm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("lr_phi", self.lr_phi), ("lr_w", self.lr_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.eta_alpha >= 0.0 && self.eta_alpha.is_finite()) {
            return bad(format!("eta_alpha must be non-negative, got {}", self.eta_alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !self.population_mode && self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let LrSchedule::CosineTail { hold } = self.lr_schedule {
            if !(0.0..1.0).contains(&hold) {
                return bad(format!("cosine hold fraction must lie in [0, 1), got {hold}"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad(format!("Adam needs β1, β2 in [0, 1) and ε > 0, got {beta1}, {beta2}, {eps}"));
            }
        }
        if let PhiInit::Uniform { scale } = self.init {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad(format!("init scale must be positive, got {scale}"));
            }
        }
        match self.architecture {
            Architecture::Linear { out } | Architecture::Mlp { out, .. } if out == 0 => return bad("output width must be at least 1".into()),
            Architecture::Mlp { hidden: 0, .. } => return bad("hidden width must be at least 1".into()),
            _ => {}
        }
        let pair = self.architecture == Architecture::Linear { out: 1 };
        if (self.constrained || self.init == PhiInit::Angle) && !pair {
            return bad("constrained mode and angle init need a 1-output linear feature map".into());
        }
        match self.algorithm {
            Algorithm::Irmv1 { lambda: c, .. } | Algorithm::Rex { beta: c, .. } if !(c >= 0.0 && c.is_finite()) => {
                bad(format!("penalty coefficient must be non-negative, got {c}"))
            }
            Algorithm::GroupDro { eta } if !(eta >= 0.0 && eta.is_finite()) => bad(format!("GroupDRO step must be non-negative, got {eta}")),
            Algorithm::Trm(h) if !(h.lambda >= 0.0 && h.lambda.is_finite()) => bad(format!("λ must be non-negative, got {}", h.lambda)),
            _ => Ok(()),
        }
    }

    fn lr_scale(&self, t: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::CosineTail { hold } => {
                let total = self.iterations as f64;
                let start = hold * total;
                if (t as f64) < start {
                    1.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * (t as f64 - start) / (total * (1.0 - hold))).cos())
                }
            }
        }
    }
}

/// `Φ`, `w_all` and the per-environment predictor cache `{w(Q)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFamily {
    pub model: Model,
    pub predictors: Vec<Option<Array>>,
}

/// Components of one step's objective, recorded every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    /// The environment `Q` drawn by TRM.
    pub env: Option<usize>,
    pub report: RiskReport,
    /// Mixture weights used by the step: `α(Q)` for TRM, group weights for GroupDRO.
    pub mixture: Vec<f64>,
}

/// Full-environment metrics at a logged iteration, taken after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    /// `E_P[ℓ(w_all∘Φ)]` per environment.
    pub env_loss: Vec<f64>,
    pub transfer_sumsup: f64,
    pub transfer_sumsum: f64,
    pub irmv1_penalty: f64,
    pub weight_ratio: Option<f64>,
    pub pred_distance: f64,
    /// Full EG state (TRM: one row per owner) or the GroupDRO weights.
    pub alphas: Vec<Vec<f64>>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub algorithm: String,
    pub envs: usize,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Seconds; kept out of the CSV so reruns stay byte-identical.
    pub wall_time: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl RunMetrics {
    pub const COLUMNS: [&'static str; 15] = [
        "iter",
        "env",
        "sampled_env",
        "objective",
        "erm_term",
        "penalty",
        "transfer_term",
        "grad_match_term",
        "eval_loss",
        "alpha",
        "transfer_risk_sumsup",
        "transfer_risk_sumsum",
        "irmv1_penalty",
        "weight_ratio",
        "pred_distance",
    ];

    /// One `all` row and one row per environment for every iteration.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{METRICS_VERSION}")?;
        writeln!(out, "{}", Self::COLUMNS.join(","))?;
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let eval = evals.next_if(|e| e.iter == s.iter);
            let r = &s.report;
            let agg = eval.map(|e| {
                [
                    cell(Some(e.transfer_sumsup)),
                    cell(Some(e.transfer_sumsum)),
                    cell(Some(e.irmv1_penalty)),
                    cell(e.weight_ratio),
                    cell(Some(e.pred_distance)),
                ]
                .join(",")
            });
            writeln!(
                out,
                "{},all,{},{},{},{},{},{},,,{}",
                s.iter,
                s.env.map(|q| q.to_string()).unwrap_or_default(),
                r.total,
                r.erm_term,
                r.penalty,
                r.transfer_term,
                r.grad_match_term,
                agg.unwrap_or_else(|| ",,,,".into())
            )?;
            for e in 0..self.envs {
                writeln!(
                    out,
                    "{},{e},,{},,,,,{},{},,,,,",
                    s.iter,
                    cell(r.per_env.get(e).copied()),
                    cell(eval.and_then(|v| v.env_loss.get(e).copied())),
                    cell(s.mixture.get(e).copied()),
                )?;
            }
        }
        Ok(())
    }

    /// Logged EG / group-weight states as `iter,owner,env,weight`.
    pub fn write_alpha_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "{METRICS_VERSION}")?;
        writeln!(out, "iter,owner,env,weight")?;
        for e in &self.evals {
            let single = e.alphas.len() == 1;
            for (o, row) in e.alphas.iter().enumerate() {
                let owner = if single { "all".to_string() } else { o.to_string() };
                for (p, w) in row.iter().enumerate() {
                    writeln!(out, "{},{owner},{p},{w}", e.iter)?;
                }
            }
        }
        Ok(())
    }

    /// Objective totals, one per iteration.
    pub fn objective_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.report.total).collect()
    }

    pub fn distance_trace(&self) -> Vec<(usize, f64)> {
        self.evals.iter().map(|e| (e.iter, e.pred_distance)).collect()
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub family: ModelFamily,
    pub metrics: RunMetrics,
    /// Final `α(Q)` per environment (TRM) or a single GroupDRO weight vector.
    pub alphas: Vec<SimplexWeights>,
}

/// Builds the initial model for `envs` from the config's architecture and init.
pub fn init_model(envs: &[EnvData], cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let first = envs.first().ok_or_else(|| TrainError::Config("no environments".into()))?;
    let d = first.dim();
    let mut rng = env_rng(cfg.seed, STREAM_INIT);
    let mut draw = |rows: usize, cols: usize| -> Array {
        let PhiInit::Uniform { scale } = cfg.init else { unreachable!("angle init is handled separately") };
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Array::matrix(rows, cols, data).expect("init shape")
    };
    let phi = match (cfg.init, cfg.architecture) {
        (PhiInit::Angle, _) => {
            if d != 2 {
                return Err(TrainError::Config(format!("angle init needs 2 input features, got {d}")));
            }
            let t = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
            FeatureMap::pair(t.cos(), t.sin())
        }
        (_, Architecture::Linear { out }) => FeatureMap::linear(draw(out, d)),
        (_, Architecture::Mlp { hidden, out }) => {
            let u = draw(hidden, d);
            FeatureMap::mlp(u, draw(out, hidden))
        }
    };
    let k = phi.out_dim();
    let shape = match &first.labels {
        Labels::Binary(_) => vec![k],
        Labels::Classes { classes, .. } => vec![k, *classes],
    };
    let mut model = Model::new(phi, Array::filled(&shape, cfg.w_all_init));
    if cfg.constrained {
        normalize_pair(&mut model);
    }
    if cfg.warm_start_w_all {
        let pooled = pool(envs);
        let f = model.phi.apply(&pooled.features);
        let rep = inner::solve_optimal_predictor(&Batch::with_features(&pooled, &f), &cfg.solver, Some(model.w_all.data()))
            .map_err(ObjectiveError::from)?;
        model.w_all = rep.predictor;
    }
    Ok(model)
}

/// All environments as one distribution, each carrying mass `1/E`.
fn pool(envs: &[EnvData]) -> EnvData {
    let d = envs[0].dim();
    let e = envs.len() as f64;
    let mut feats = Vec::new();
    let mut weights = Vec::new();
    for env in envs {
        feats.extend_from_slice(env.features.data());
        weights.extend(env.weights.iter().map(|w| w / e));
    }
    let labels = match &envs[0].labels {
        Labels::Binary(_) => Labels::Binary(
            envs.iter().flat_map(|e| if let Labels::Binary(y) = &e.labels { y.clone() } else { Vec::new() }).collect(),
        ),
        Labels::Classes { classes, .. } => Labels::Classes {
            y: envs.iter().flat_map(|e| if let Labels::Classes { y, .. } = &e.labels { y.clone() } else { Vec::new() }).collect(),
            classes: *classes,
        },
    };
    EnvData {
        features: Array::matrix(weights.len(), d, feats).expect("pooled shape"),
        labels,
        weights,
        sign_folded: envs.iter().all(|e| e.sign_folded),
    }
}

fn normalize_pair(model: &mut Model) {
    if let FeatureMap::Linear { weight } = &mut model.phi {
        let n = weight.norm_sq().sqrt();
        if n > 0.0 {
            weight.data_mut().iter_mut().for_each(|v| *v /= n);
        }
    }
}

enum OptState {
    Adam { m: Vec<Array>, v: Vec<Array>, beta1: f64, beta2: f64, eps: f64, t: i32 },
    Momentum { buf: Vec<Array>, mu: f64 },
}

impl OptState {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros = || model.params().iter().map(|p| Array::zeros(p.shape())).collect::<Vec<_>>();
        match cfg.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => OptState::Adam { m: zeros(), v: zeros(), beta1, beta2, eps, t: 0 },
            Optimizer::Momentum => OptState::Momentum { buf: zeros(), mu: cfg.momentum },
        }
    }

    fn step(&mut self, params: Vec<&mut Array>, grads: &[Array], lrs: &[f64]) {
        match self {
            OptState::Adam { m, v, beta1, beta2, eps, t } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, p) in params.into_iter().enumerate() {
                    let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let g = grads[i].data()[j];
                        mi[j] = *beta1 * mi[j] + (1.0 - *beta1) * g;
                        vi[j] = *beta2 * vi[j] + (1.0 - *beta2) * g * g;
                        *x -= lrs[i] * (mi[j] / c1) / ((vi[j] / c2).sqrt() + *eps);
                    }
                }
            }
            OptState::Momentum { buf, mu } => {
                for (i, p) in params.into_iter().enumerate() {
                    let b = buf[i].data_mut();
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        b[j] = *mu * b[j] + grads[i].data()[j];
                        *x -= lrs[i] * b[j];
                    }
                }
            }
        }
    }
}

struct EnvPicker {
    rng: ChaCha8Rng,
    sampling: EnvSampling,
    order: Vec<usize>,
    envs: usize,
}

impl EnvPicker {
    fn next(&mut self) -> usize {
        match self.sampling {
            EnvSampling::Uniform => self.rng.random_range(0..self.envs),
            EnvSampling::Reshuffle => {
                if self.order.is_empty() {
                    self.order = (0..self.envs).collect();
                    self.order.shuffle(&mut self.rng);
                    self.order.reverse();
                }
                self.order.pop().expect("refilled")
            }
        }
    }
}

/// TRM from the config's initialization.
pub fn train_trm(envs: &[EnvData], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !matches!(cfg.algorithm, Algorithm::Trm(_)) {
        return Err(TrainError::Config(format!("train_trm got algorithm {}", cfg.algorithm.tag())));
    }
    train_from(envs, init_model(envs, cfg)?, cfg)
}

/// ERM, IRMv1, REx or GroupDRO from the config's initialization.
pub fn train_baseline(envs: &[EnvData], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if matches!(cfg.algorithm, Algorithm::Trm(_)) {
        return Err(TrainError::Config("train_baseline does not run TRM".into()));
    }
    train_from(envs, init_model(envs, cfg)?, cfg)
}

/// Any algorithm from an explicit starting model.
pub fn train_from(envs: &[EnvData], model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let e = envs.len();
    let min = match cfg.algorithm {
        Algorithm::Trm(_) | Algorithm::Rex { .. } => 2,
        _ => 1,
    };
    if e < min {
        return Err(ObjectiveError::TooFewEnvironments { what: cfg.algorithm.tag(), min, got: e }.into());
    }
    if cfg.constrained && model.phi.as_pair().is_none() {
        return Err(TrainError::Config("constrained mode needs a 1×2 linear feature map".into()));
    }
    Trainer::new(envs, model, cfg).run()
}

struct Trainer<'a> {
    envs: &'a [EnvData],
    cfg: &'a TrainConfig,
    model: Model,
    opt: OptState,
    alphas: Vec<SimplexWeights>,
    group: SimplexWeights,
    cache: Vec<Option<Array>>,
    eval_cache: Vec<Option<Array>>,
    picker: EnvPicker,
    batch_rng: ChaCha8Rng,
    metrics: RunMetrics,
}

impl<'a> Trainer<'a> {
    fn new(envs: &'a [EnvData], model: Model, cfg: &'a TrainConfig) -> Self {
        let e = envs.len();
        Self {
            envs,
            cfg,
            opt: OptState::new(&model, cfg),
            model,
            alphas: (0..e).map(|q| SimplexWeights::uniform(e, Some(q))).collect(),
            group: SimplexWeights::uniform(e, None),
            cache: vec![None; e],
            eval_cache: vec![None; e],
            picker: EnvPicker { rng: env_rng(cfg.seed, STREAM_ENV), sampling: cfg.env_sampling, order: Vec::new(), envs: e },
            batch_rng: env_rng(cfg.seed, STREAM_BATCH),
            metrics: RunMetrics { algorithm: cfg.algorithm.tag().into(), envs: e, ..Default::default() },
        }
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let start = Instant::now();
        for t in 1..=self.cfg.iterations {
            let last_good = self.model.clone();
            let stepped = self.step(t).or_else(non_finite)?;
            let log = if self.cfg.log_every == 0 { t == self.cfg.iterations } else { t % self.cfg.log_every == 0 || t == self.cfg.iterations };
            let evaluated = match stepped {
                Ok(()) if log => self.evaluate(t).map(Ok).or_else(non_finite)?.map(Some),
                other => other.map(|()| None),
            };
            match evaluated {
                Ok(Some(rec)) => self.metrics.evals.push(rec),
                Ok(None) => {}
                Err(what) => {
                    self.metrics.wall_time = start.elapsed().as_secs_f64();
                    return Err(TrainError::Diverged { iteration: t, what, last_good: Box::new(last_good), metrics: Box::new(self.metrics) });
                }
            }
        }
        self.metrics.wall_time = start.elapsed().as_secs_f64();
        let alphas = match self.cfg.algorithm {
            Algorithm::Trm(_) => self.alphas,
            Algorithm::GroupDro { .. } => vec![self.group],
            _ => Vec::new(),
        };
        Ok(TrainOutcome { family: ModelFamily { model: self.model, predictors: self.cache }, metrics: self.metrics, alphas })
    }

    fn batches(&mut self) -> Cow<'a, [EnvData]> {
        if self.cfg.population_mode {
            return Cow::Borrowed(self.envs);
        }
        let b = self.cfg.batch_size;
        Cow::Owned(
            self.envs
                .iter()
                .map(|env| {
                    if b >= env.len() {
                        env.clone()
                    } else {
                        env.subset(&rand::seq::index::sample(&mut self.batch_rng, env.len(), b).into_vec())
                    }
                })
                .collect(),
        )
    }

    /// One update; `Ok(Err(_))` names a non-finite quantity.
    fn step(&mut self, t: usize) -> Result<std::result::Result<(), String>> {
        let cfg = self.cfg;
        let batches = self.batches();
        let tape = Tape::new();
        let vars = self.model.vars(&tape);
        let mut env = None;
        let mut mixture = Vec::new();
        let objective = match cfg.algorithm {
            Algorithm::Erm => objectives::erm_objective(&self.model, &vars, &batches)?,
            Algorithm::Irmv1 { lambda, warmup } => {
                objectives::irmv1_objective(&self.model, &vars, &batches, if t > warmup { lambda } else { 0.0 })?
            }
            Algorithm::Rex { beta, warmup } => objectives::rex_objective(&self.model, &vars, &batches, if t > warmup { beta } else { 0.0 })?,
            Algorithm::GroupDro { eta } => {
                let losses: Vec<f64> = batches
                    .iter()
                    .map(|b| {
                        let f = self.model.phi.apply(&b.features);
                        Batch::with_features(b, &f).risk(self.model.w_all.data())
                    })
                    .collect();
                if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
                    return Ok(Err(format!("loss in environment {i}")));
                }
                self.group = groupdro_weights_update(&self.group, &losses, eta)?;
                mixture = self.group.weights().to_vec();
                objectives::groupdro_objective(&self.model, &vars, &batches, &self.group)?
            }
            Algorithm::Trm(hyper) => {
                let q = self.picker.next();
                env = Some(q);
                let data = if cfg.solve_on_batch { &batches[q] } else { &self.envs[q] };
                let solved = objectives::solve_predictor(&self.model, data, &cfg.solver, self.cache[q].as_ref().map(Array::data))?;
                if !solved.solve.predictor.all_finite() {
                    return Ok(Err(format!("w({q})")));
                }
                self.cache[q] = Some(solved.solve.predictor.clone());
                let step = objectives::trm_step_objective(&self.model, &vars, &batches, q, &self.alphas[q], &hyper, &solved)?;
                mixture = match hyper.variant {
                    Variant::SumSup => self.alphas[q].weights().to_vec(),
                    Variant::SumSum => SimplexWeights::uniform(batches.len(), Some(q)).weights().to_vec(),
                };
                if hyper.variant == Variant::SumSup {
                    let losses: Vec<f64> = step.transfer_losses.iter().map(|l| if l.is_nan() { 0.0 } else { *l }).collect();
                    if let Some(p) = (0..losses.len()).find(|&p| p != q && !losses[p].is_finite()) {
                        return Ok(Err(format!("transfer loss of w({q}) on environment {p}")));
                    }
                    self.alphas[q] = eg_update(&self.alphas[q], &losses, cfg.eta_alpha)?;
                }
                step.objective
            }
        };
        let report = objective.report.clone();
        if !report.total.is_finite() {
            return Ok(Err("objective".into()));
        }
        let mut grads = objective.gradient(&vars)?;
        drop(tape);
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(Err("gradient".into()));
        }
        let n_phi = grads.len() - 1;
        if cfg.constrained && cfg.tangent_projection {
            let u = self.model.phi.params()[0].clone();
            let radial = grads[0].dot(&u);
            grads[0] = grads[0].zip(&u, |g, u| g - radial * u);
        }
        let scale = cfg.lr_scale(t);
        let lrs: Vec<f64> = (0..grads.len()).map(|i| scale * if i < n_phi { cfg.lr_phi } else { cfg.lr_w }).collect();
        self.opt.step(self.model.params_mut(), &grads, &lrs);
        if cfg.constrained {
            normalize_pair(&mut self.model);
        }
        if !self.model.is_finite() {
            return Ok(Err("parameters".into()));
        }
        self.metrics.steps.push(StepRecord { iter: t, env, report, mixture });
        Ok(Ok(()))
    }

    fn evaluate(&mut self, t: usize) -> Result<EvalRecord> {
        let envs = self.envs;
        let env_loss = envs
            .iter()
            .map(|e| {
                let f = self.model.phi.apply(&e.features);
                Batch::with_features(e, &f).risk(self.model.w_all.data())
            })
            .collect();
        let (mut sumsup, mut sumsum, mut distance) = (f64::NAN, f64::NAN, f64::NAN);
        if envs.len() >= 2 {
            let warm: Vec<Array> = self
                .eval_cache
                .iter()
                .map(|w| w.clone().unwrap_or_else(|| Array::zeros(self.model.w_all.shape())))
                .collect();
            let m = objectives::transfer_matrix(&self.model, envs, &self.cfg.solver, Some(&warm), false)?;
            sumsup = m.sum_sup();
            sumsum = m.sum_sum();
            let ws: Vec<Array> = m.predictors.iter().flatten().map(|r| r.predictor.clone()).collect();
            distance = mean_pair_distance(&ws).unwrap_or(f64::NAN);
            for (c, p) in self.eval_cache.iter_mut().zip(&m.predictors) {
                if let Some(p) = p {
                    *c = Some(p.predictor.clone());
                }
            }
        }
        let alphas = match self.cfg.algorithm {
            Algorithm::Trm(_) => self.alphas.iter().map(|a| a.weights().to_vec()).collect(),
            Algorithm::GroupDro { .. } => vec![self.group.weights().to_vec()],
            _ => Vec::new(),
        };
        Ok(EvalRecord {
            iter: t,
            env_loss,
            transfer_sumsup: sumsup,
            transfer_sumsum: sumsum,
            irmv1_penalty: objectives::irmv1_penalty(&self.model, envs),
            weight_ratio: self.model.phi.as_pair().map(|(a, b)| weight_ratio(a, b)),
            pred_distance: distance,
            alphas,
        })
    }
}

/// Turns overflow inside the objective or the inner solver into a divergence.
fn non_finite<T>(e: TrainError) -> Result<std::result::Result<T, String>> {
    match e {
        TrainError::Objective(ObjectiveError::Autodiff(AdError::NonFinite { op, .. })) => Ok(Err(format!("{op} value"))),
        TrainError::Objective(ObjectiveError::Inner(
            inner::InnerError::NonFinite | inner::InnerError::NeumannNonFinite { .. },
        )) => Ok(Err("inner solve".into())),
        e => Err(e),
    }
}

fn mean_pair_distance(ws: &[Array]) -> Option<f64> {
    if ws.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..ws.len() {
        for j in i + 1..ws.len() {
            total += ws[i].zip(&ws[j], |a, b| a - b).norm_sq();
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

/// Mean over unordered environment pairs of `‖w(P_i) − w(P_j)‖²`.
pub fn predictor_distance(model: &Model, envs: &[EnvData], solver: &SolverConfig) -> Result<f64> {
    let ws = solved_predictors(model, envs, solver)?;
    mean_pair_distance(&ws).ok_or_else(|| {
        ObjectiveError::TooFewEnvironments { what: "predictor distance", min: 2, got: ws.len() }.into()
    })
}

/// The same distance for predictors given directly.
pub fn predictor_distance_of(ws: &[Array]) -> Result<f64> {
    mean_pair_distance(ws)
        .ok_or_else(|| ObjectiveError::TooFewEnvironments { what: "predictor distance", min: 2, got: ws.len() }.into())
}

/// `w(P)` for every environment with both classes present.
pub fn solved_predictors(model: &Model, envs: &[EnvData], solver: &SolverConfig) -> Result<Vec<Array>> {
    let mut out = Vec::with_capacity(envs.len());
    for env in envs {
        let f = model.phi.apply(&env.features);
        match inner::solve_optimal_predictor(&Batch::with_features(env, &f), solver, None) {
            Ok(r) => out.push(r.predictor),
            Err(inner::InnerError::SingleClass) => {}
            Err(e) => return Err(ObjectiveError::from(e).into()),
        }
    }
    Ok(out)
}

/// Running average regret of the EG player, averaged over environments `Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretTrace {
    pub iters: Vec<usize>,
    /// `mean_Q (max_P ΣL_P − Σ α·L) / n_Q` over the steps that drew `Q`.
    pub regret: Vec<f64>,
}

impl RegretTrace {
    /// `regret(t)·√t`.
    pub fn scaled(&self) -> Vec<f64> {
        self.iters.iter().zip(&self.regret).map(|(t, r)| r * (*t as f64).sqrt()).collect()
    }

    /// Whether `regret·√t` never exceeds `factor` times its value at `reference`.
    pub fn bounded(&self, reference: usize, factor: f64) -> bool {
        let s = self.scaled();
        let Some(i) = self.iters.iter().position(|t| *t >= reference) else { return false };
        let cap = factor * s[i].max(f64::MIN_POSITIVE);
        s[i..].iter().all(|v| *v <= cap)
    }
}

/// Regret of the mixture player from the logged TRM steps.
pub fn regret_trace(metrics: &RunMetrics) -> Result<RegretTrace> {
    let e = metrics.envs;
    let mut sums = vec![vec![0.0; e]; e];
    let mut played = vec![0.0; e];
    let mut counts = vec![0usize; e];
    let mut out = RegretTrace { iters: Vec::with_capacity(metrics.steps.len()), regret: Vec::with_capacity(metrics.steps.len()) };
    for s in &metrics.steps {
        let q = s.env.ok_or_else(|| TrainError::Config("regret needs a TRM run with sampled environments".into()))?;
        if s.mixture.len() != e || s.report.per_env.len() != e {
            return Err(TrainError::Config(format!("step {} lacks mixture weights or per-environment losses", s.iter)));
        }
        counts[q] += 1;
        for p in (0..e).filter(|&p| p != q) {
            sums[q][p] += s.report.per_env[p];
            played[q] += s.mixture[p] * s.report.per_env[p];
        }
        let mut total = 0.0;
        let mut active = 0usize;
        for q in (0..e).filter(|&q| counts[q] > 0) {
            let best = (0..e).filter(|&p| p != q).map(|p| sums[q][p]).fold(f64::NEG_INFINITY, f64::max);
            total += (best - played[q]) / counts[q] as f64;
            active += 1;
        }
        out.iters.push(s.iter);
        out.regret.push(total / active as f64);
    }
    Ok(out)
}

/// Checkpoint manifest: parameter layout of the flat binary file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointManifest {
    pub algorithm: String,
    pub config_hash: String,
    pub params: Vec<(String, Vec<usize>)>,
}

const CHECKPOINT_VERSION: &str = "# transfer-risk checkpoint v1";

/// Writes `<stem>.bin` (little-endian f64 parameters in manifest order) and `<stem>.manifest`.
pub fn write_checkpoint(dir: &Path, stem: &str, model: &Model, algorithm: &str, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::new();
    let mut manifest = format!("{CHECKPOINT_VERSION}\nalgorithm {algorithm}\nconfig_hash {config_hash}\n");
    for (name, p) in model.names().into_iter().zip(model.params()) {
        let shape: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("param {name} {}\n", shape.join("x")));
        for v in p.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{stem}.bin")), bin)?;
    fs::write(dir.join(format!("{stem}.manifest")), manifest)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path, stem: &str) -> Result<(Model, CheckpointManifest)> {
    let bad = |m: String| TrainError::Checkpoint(m);
    let text = fs::read_to_string(dir.join(format!("{stem}.manifest")))?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_VERSION) {
        return Err(bad("unrecognized checkpoint manifest header".into()));
    }
    let mut m = CheckpointManifest { algorithm: String::new(), config_hash: String::new(), params: Vec::new() };
    for (no, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["algorithm", a] => m.algorithm = a.to_string(),
            ["config_hash", h] => m.config_hash = h.to_string(),
            ["param", name, shape] => {
                let dims = shape.split('x').map(str::parse).collect::<std::result::Result<Vec<usize>, _>>();
                m.params.push((name.to_string(), dims.map_err(|e| bad(format!("manifest line {}: {e}", no + 2)))?));
            }
            _ => return Err(bad(format!("manifest line {}: unexpected `{line}`", no + 2))),
        }
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let total: usize = m.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(bad(format!("binary holds {} bytes, manifest expects {}", bytes.len(), total * 8)));
    }
    let mut arrays = std::collections::HashMap::new();
    for (name, shape) in &m.params {
        let data: Vec<f64> = values.by_ref().take(shape.iter().product()).collect();
        arrays.insert(name.as_str(), Array::new(shape, data).map_err(|e| bad(e.to_string()))?);
    }
    let mut take = |n: &str| arrays.remove(n).ok_or_else(|| bad(format!("missing parameter {n}")));
    let phi = if m.params.iter().any(|(n, _)| n == "phi.weight") {
        FeatureMap::linear(take("phi.weight")?)
    } else {
        let hidden = take("phi.hidden")?;
        FeatureMap::mlp(hidden, take("phi.out")?)
    };
    let model = Model::new(phi, take("w_all")?);
    Ok((model, m))
}
