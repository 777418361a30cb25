//! The TOML experiment schema and its translation into library configs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use transfer_risk::analysis::{CertifyConfig, ConstructionSpec, SweepAxis, SweepSpec};
use transfer_risk::envgen::{Materialize, MeanSource, SuiteConfig};
use transfer_risk::inner::{InverseHvp, NeumannConfig, NeumannScaling};
use transfer_risk::objectives::{TrmHyper, Variant};
use transfer_risk::trainer::{Algorithm, Architecture, EnvSampling, LrSchedule, Optimizer, PhiInit, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    /// `location` is `path` or `path:line:col`.
    #[error("{location}: {msg}")]
    Parse { location: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Datasets written by `generate`; used by `train` instead of `[suite]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<SuiteSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifySection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub envs: usize,
    pub mu_c: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_e: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "half")]
    pub label_prior: f64,
    #[serde(default = "one_vec")]
    pub bias_degrees: Vec<f64>,
    #[serde(default)]
    pub decoy_means: Vec<Vec<f64>>,
    /// Explicit non-causal means, one row per environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    /// Otherwise means are drawn with this per-coordinate mean and variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_e: Option<usize>,
    /// Gauss–Hermite nodes per latent dimension instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,
    #[serde(default)]
    pub rotate: bool,
}

fn default_samples() -> usize {
    10_000
}

fn half() -> f64 {
    0.5
}

fn one_vec() -> Vec<f64> {
    vec![1.0]
}

impl SuiteSection {
    pub fn to_suite(&self) -> Result<SuiteConfig, ConfigError> {
        let means = match (&self.means, self.mean, self.variance) {
            (Some(m), None, None) if self.d_e.is_none() => MeanSource::Explicit(m.clone()),
            (Some(_), ..) => return invalid("suite: give either `means` or `mean`/`variance`/`d_e`, not both"),
            (None, Some(mean), Some(variance)) => MeanSource::Sampled { mean, variance, d_e: self.d_e.unwrap_or(1) },
            (None, ..) => return invalid("suite: missing `means`, or both `mean` and `variance`"),
        };
        if self.quadrature_nodes == Some(0) {
            return invalid("suite: `quadrature_nodes` must be at least 1");
        }
        Ok(SuiteConfig {
            envs: self.envs,
            mu_c: self.mu_c.clone(),
            means,
            sigma_c: self.sigma_c,
            sigma_e: self.sigma_e,
            n_samples: self.n_samples,
            label_prior: self.label_prior,
            bias_degrees: self.bias_degrees.clone(),
            decoy_means: self.decoy_means.clone(),
            materialize: self.quadrature_nodes.map_or(Materialize::Sampled, |nodes| Materialize::Quadrature { nodes }),
            rotate: self.rotate,
        })
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Erm,
    Irmv1,
    Rex,
    Groupdro,
    Trm,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    WeightRatio,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Sumsup,
    Sumsum,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::Sumsup => Variant::SumSup,
            VariantName::Sumsum => Variant::SumSum,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseName {
    Neumann,
    Exact,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingName {
    MeanRowNorm,
    MaxRowNorm,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Momentum,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingName {
    Uniform,
    Reshuffle,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Constant,
    CosineTail,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Angle,
    Uniform,
}

/// Every field but `algorithm` falls back to the preset.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub algorithm: Option<AlgorithmName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// IRMv1 or TRM penalty weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<usize>,
    /// REx variance weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// GroupDRO step size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inverse: Option<InverseName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neumann_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neumann_scaling: Option<ScalingName>,
    /// Fixed Neumann scale `c`; overrides `neumann_scaling`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neumann_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_w: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population_mode: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve_on_batch: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constrained: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tangent_projection: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_sampling: Option<SamplingName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleName>,
    /// Fraction of the run before the cosine tail starts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_all_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start_w_all: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
}

impl TrainSection {
    fn trm_hyper(&self, default_lambda: f64) -> Result<TrmHyper, ConfigError> {
        let base = TrmHyper::default();
        let inverse = match self.inverse {
            Some(InverseName::Exact) => {
                if self.neumann_steps.is_some() || self.neumann_scaling.is_some() || self.neumann_scale.is_some() {
                    return invalid("train: Neumann settings given with `inverse = \"exact\"`");
                }
                InverseHvp::Exact
            }
            None | Some(InverseName::Neumann) => {
                let mut n = NeumannConfig::default();
                if let Some(s) = self.neumann_steps {
                    n.steps = s;
                }
                if let Some(ScalingName::MaxRowNorm) = self.neumann_scaling {
                    n.scaling = NeumannScaling::MaxRowNorm;
                }
                if let Some(c) = self.neumann_scale {
                    n.scaling = NeumannScaling::Fixed(c);
                }
                n.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
                InverseHvp::Neumann(n)
            }
        };
        Ok(TrmHyper {
            lambda: self.lambda.unwrap_or(default_lambda),
            inverse,
            variant: self.variant.map_or(base.variant, Variant::from),
        })
    }

    fn algorithm(&self) -> Result<Algorithm, ConfigError> {
        let Some(name) = self.algorithm else { return invalid("train: missing key `algorithm`") };
        let only = |ok: bool, key: &str| if ok { Ok(()) } else { invalid(format!("train: `{key}` does not apply to {name:?}")) };
        let trm_keys = self.variant.is_some() || self.inverse.is_some() || self.neumann_steps.is_some();
        only(name == AlgorithmName::Trm || !trm_keys, "variant/inverse/neumann_steps")?;
        only(matches!(name, AlgorithmName::Irmv1 | AlgorithmName::Trm) || self.lambda.is_none(), "lambda")?;
        only(matches!(name, AlgorithmName::Irmv1 | AlgorithmName::Rex) || self.warmup.is_none(), "warmup")?;
        only(name == AlgorithmName::Rex || self.beta.is_none(), "beta")?;
        only(name == AlgorithmName::Groupdro || self.eta.is_none(), "eta")?;
        let warmup = self.warmup.unwrap_or(0);
        Ok(match name {
            AlgorithmName::Erm => Algorithm::Erm,
            AlgorithmName::Irmv1 => Algorithm::Irmv1 { lambda: self.lambda.unwrap_or(1.0), warmup },
            AlgorithmName::Rex => Algorithm::Rex { beta: self.beta.unwrap_or(1.0), warmup },
            AlgorithmName::Groupdro => Algorithm::GroupDro { eta: self.eta.unwrap_or(0.01) },
            AlgorithmName::Trm => Algorithm::Trm(self.trm_hyper(TrmHyper::default().lambda)?),
        })
    }

    pub fn to_train(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let algorithm = self.algorithm()?;
        let mut c = match self.preset.unwrap_or(Preset::Default) {
            Preset::Default => TrainConfig { seed, ..TrainConfig::new(algorithm) },
            Preset::WeightRatio => TrainConfig::weight_ratio(algorithm, seed),
        };
        self.apply(&mut c)?;
        c.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        Ok(c)
    }

    /// Overrides everything except the algorithm.
    fn apply(&self, c: &mut TrainConfig) -> Result<(), ConfigError> {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(lr_phi, lr_w, eta_alpha, momentum, iterations, population_mode, batch_size, solve_on_batch, constrained, tangent_projection, w_all_init, warm_start_w_all, log_every);
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptimizerName::Adam => Optimizer::adam(),
                OptimizerName::Momentum => Optimizer::Momentum,
            };
        }
        if let Some(s) = self.env_sampling {
            c.env_sampling = match s {
                SamplingName::Uniform => EnvSampling::Uniform,
                SamplingName::Reshuffle => EnvSampling::Reshuffle,
            };
        }
        match (self.schedule, self.hold) {
            (Some(ScheduleName::Constant), Some(_)) => return invalid("train: `hold` needs `schedule = \"cosine_tail\"`"),
            (Some(ScheduleName::Constant), None) => c.lr_schedule = LrSchedule::Constant,
            (Some(ScheduleName::CosineTail), hold) => c.lr_schedule = LrSchedule::CosineTail { hold: hold.unwrap_or(0.5) },
            (None, Some(hold)) => c.lr_schedule = LrSchedule::CosineTail { hold },
            (None, None) => {}
        }
        let out = self.out.unwrap_or(1);
        match (self.architecture, self.hidden) {
            (Some(ArchName::Mlp), hidden) => c.architecture = Architecture::Mlp { hidden: hidden.unwrap_or(16), out },
            (Some(ArchName::Linear) | None, Some(_)) => return invalid("train: `hidden` needs `architecture = \"mlp\"`"),
            (Some(ArchName::Linear), None) => c.architecture = Architecture::Linear { out },
            (None, None) => {
                if let Some(out) = self.out {
                    c.architecture = Architecture::Linear { out };
                }
            }
        }
        match (self.init, self.init_scale) {
            (Some(InitName::Angle), Some(_)) => return invalid("train: `init_scale` does not apply to angle init"),
            (Some(InitName::Angle), None) => c.init = PhiInit::Angle,
            (Some(InitName::Uniform) | None, Some(scale)) => c.init = PhiInit::Uniform { scale },
            (Some(InitName::Uniform), None) => c.init = PhiInit::Uniform { scale: 0.7071 },
            (None, None) => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    MuC,
    Envs,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: AxisName,
    pub values: Vec<f64>,
    /// μ_c held fixed on an `envs` axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_c: Option<f64>,
    /// E held fixed on a `mu_c` axis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    /// Defaults to ten consecutive seeds starting at the top-level seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_irm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_trm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl SweepSection {
    pub fn to_sweep(&self, seed: u64) -> Result<SweepSpec, ConfigError> {
        let axis = match self.axis {
            AxisName::MuC => SweepAxis::MuC(self.values.clone()),
            AxisName::Envs => {
                if let Some(v) = self.values.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
                    return invalid(format!("sweep: envs axis value {v} is not a whole number"));
                }
                SweepAxis::Envs(self.values.iter().map(|v| *v as usize).collect())
            }
        };
        let mut s = SweepSpec::new(axis);
        s.seeds = self.seeds.clone().unwrap_or_else(|| (seed..seed + 10).collect());
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(mu_c, envs, mean, variance, nodes, lambda_irm);
        if let Some(l) = self.lambda_trm {
            s.trm.lambda = l;
        }
        if let Some(v) = self.variant {
            s.trm.variant = v.into();
        }
        if let Some(t) = self.iterations {
            s.train.iterations = t;
        }
        s.validate().map_err(|e| ConfigError::Invalid(format!("sweep: {e}")))?;
        Ok(s)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub d_c: usize,
    pub d_e: usize,
    #[serde(default = "three")]
    pub envs: usize,
    #[serde(default = "unit")]
    pub sigma_c: f64,
    #[serde(default = "million")]
    pub mc_samples: usize,
    #[serde(default = "hundred")]
    pub batches: usize,
    #[serde(default = "three")]
    pub max_rounds: usize,
    /// Replaces the recipe's `μ_c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_c: Option<Vec<f64>>,
}

fn three() -> usize {
    3
}

fn unit() -> f64 {
    1.0
}

fn million() -> usize {
    1_000_000
}

fn hundred() -> usize {
    100
}

impl CertifySection {
    pub fn to_spec(&self, seed: u64) -> Result<(ConstructionSpec, CertifyConfig), ConfigError> {
        let mut spec = ConstructionSpec::recipe(self.d_c, self.d_e, self.envs, self.sigma_c, self.mc_samples)
            .map_err(|e| ConfigError::Invalid(format!("certify: {e}")))?;
        if let Some(m) = &self.mu_c {
            spec.mu_c = m.clone();
        }
        let cfg = CertifyConfig { batches: self.batches, max_rounds: self.max_rounds, ..CertifyConfig::new(self.mc_samples, seed) };
        Ok((spec, cfg))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse { location: path.display().to_string(), msg: e.to_string() })?;
        toml::from_str(&text).map_err(|e| {
            let (line, col) = e.span().map_or((0, 0), |s| line_col(&text, s.start));
            let location = if line == 0 { path.display().to_string() } else { format!("{}:{line}:{col}", path.display()) };
            ConfigError::Parse { location, msg: e.message().trim_end().to_string() }
        })
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T, ConfigError> {
        s.as_ref().ok_or_else(|| ConfigError::Invalid(format!("config has no [{name}] section")))
    }

    /// The replayable form: CLI overrides applied, output directory dropped.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("config serializes")
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(s, "{b:02x}");
    }
    s
}
