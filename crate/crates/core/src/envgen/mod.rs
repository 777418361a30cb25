//! Multi-environment synthetic data.
//!
//! Each environment draws a label `y` and latent features from
//! label-conditioned Gaussians: `z_c ~ N(y·μ_c, σ_c²I)` is shared by every
//! environment while `z_e ~ N(y·μ_i, σ_e²I)` uses the environment's own
//! non-causal mean. The observation is `x = [z_c; z_e]`, optionally rotated by a
//! fixed orthogonal matrix.
//!
//! Randomness comes from `ChaCha8Rng` seeded with the run seed; environment `i`
//! uses stream `i`, so environments can be generated in any order or in parallel.

mod io;
mod quadrature;

pub use io::{read_binary, read_csv, write_binary, write_csv};
pub use quadrature::{gauss_hermite, population_environment};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Array;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("bias_degree {0} < 1 requires at least one decoy mean")]
    MissingDecoys(f64),
    #[error("suite needs at least {min} environments, got {got}")]
    TooFewEnvironments { min: usize, got: usize },
    #[error("mixture weight {weight} on excluded environment {env}")]
    WeightOnExcluded { env: usize, weight: f64 },
    #[error("mixture weights {0:?} are not on the simplex")]
    NotSimplex(Vec<f64>),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}: not a dataset file (bad magic)")]
    BadMagic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> EnvError {
    EnvError::Invalid { field, reason: reason.into() }
}

/// Generative parameters of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEnvSpec {
    pub mu_c: Vec<f64>,
    pub mu_e: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub n_samples: usize,
    /// Probability of `y = +1`.
    pub label_prior: f64,
    /// Probability that `z_e` uses the label-aligned mean `μ_e`.
    pub bias_degree: f64,
    /// Alternatives for `μ_e` when the bias coin fails.
    pub decoy_means: Vec<Vec<f64>>,
}

impl GaussianEnvSpec {
    pub fn new(mu_c: Vec<f64>, mu_e: Vec<f64>, n_samples: usize) -> Self {
        Self {
            mu_c,
            mu_e,
            sigma_c: 1.0,
            sigma_e: 1.0,
            n_samples,
            label_prior: 0.5,
            bias_degree: 1.0,
            decoy_means: Vec::new(),
        }
    }

    pub fn d_c(&self) -> usize {
        self.mu_c.len()
    }

    pub fn d_e(&self) -> usize {
        self.mu_e.len()
    }

    pub fn dim(&self) -> usize {
        self.d_c() + self.d_e()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.mu_c.is_empty() {
            return Err(invalid("mu_c", "needs d_c >= 1"));
        }
        if self.mu_e.is_empty() {
            return Err(invalid("mu_e", "needs d_e >= 1"));
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return Err(invalid("sigma_c", format!("must be positive, got {}", self.sigma_c)));
        }
        if !(self.sigma_e > 0.0 && self.sigma_e.is_finite()) {
            return Err(invalid("sigma_e", format!("must be positive, got {}", self.sigma_e)));
        }
        if !(self.label_prior > 0.0 && self.label_prior < 1.0) {
            return Err(invalid("label_prior", format!("must lie in (0, 1), got {}", self.label_prior)));
        }
        if !(0.0..=1.0).contains(&self.bias_degree) {
            return Err(invalid("bias_degree", format!("must lie in [0, 1], got {}", self.bias_degree)));
        }
        if self.bias_degree < 1.0 && self.decoy_means.is_empty() {
            return Err(EnvError::MissingDecoys(self.bias_degree));
        }
        if self.decoy_means.iter().any(|m| m.len() != self.d_e()) {
            return Err(invalid("decoy_means", "every decoy must have length d_e"));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be positive"));
        }
        let all = self.mu_c.iter().chain(&self.mu_e).chain(self.decoy_means.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(invalid("means", "must be finite"));
        }
        Ok(())
    }
}

/// Class labels of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// `±1` labels.
    Binary(Vec<f64>),
    /// Labels in `0..classes`.
    Classes { y: Vec<usize>, classes: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Binary(y) => y.len(),
            Labels::Classes { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label of row `i` as a signed integer (`±1` or the class index).
    pub fn as_int(&self, i: usize) -> i64 {
        match self {
            Labels::Binary(y) => y[i] as i64,
            Labels::Classes { y, .. } => y[i] as i64,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Binary(y) => Labels::Binary(idx.iter().map(|&i| y[i]).collect()),
            Labels::Classes { y, classes } => {
                Labels::Classes { y: idx.iter().map(|&i| y[i]).collect(), classes: *classes }
            }
        }
    }
}

/// Sampled points of one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env_id: usize,
    /// `n × d` matrix of observations.
    pub features: Array,
    pub labels: Labels,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// A weighted empirical distribution: the unit every risk is computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvData {
    pub features: Array,
    pub labels: Labels,
    /// Non-negative, summing to one.
    pub weights: Vec<f64>,
    /// Every row is stored as `y = +1` with `x` already multiplied by its label.
    /// Exact for label prior 1/2 and feature maps that are odd in `x`.
    pub sign_folded: bool,
}

impl EnvData {
    pub fn uniform(features: Array, labels: Labels) -> Self {
        let n = labels.len();
        Self { features, labels, weights: vec![1.0 / n as f64; n], sign_folded: false }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` with weights renormalized to sum to one.
    pub fn subset(&self, idx: &[usize]) -> EnvData {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let mut weights: Vec<f64> = idx.iter().map(|&i| self.weights[i]).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        EnvData {
            features: Array::matrix(idx.len(), d, data).expect("subset shape"),
            labels: self.labels.select(idx),
            weights,
            sign_folded: self.sign_folded,
        }
    }

    /// Whether both classes carry positive mass.
    pub fn has_both_classes(&self) -> bool {
        if self.sign_folded {
            return true;
        }
        match &self.labels {
            Labels::Binary(y) => {
                let mass = |sign: f64| -> f64 {
                    y.iter().zip(&self.weights).filter(|(y, _)| **y * sign > 0.0).map(|(_, w)| w).sum()
                };
                mass(1.0) > 0.0 && mass(-1.0) > 0.0
            }
            Labels::Classes { y, .. } => y.iter().any(|c| Some(c) != y.first()),
        }
    }
}

impl From<&Dataset> for EnvData {
    fn from(d: &Dataset) -> Self {
        EnvData::uniform(d.features.clone(), d.labels.clone())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generator for environment `stream` of a run seeded with `seed`.
pub fn env_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `spec.n_samples` points. Also returns, per row, whether `z_e` used
/// the label-aligned mean.
pub fn sample_environment_traced(
    spec: &GaussianEnvSpec,
    seed: u64,
    env_id: usize,
) -> Result<(Dataset, Vec<bool>), EnvError> {
    spec.validate()?;
    let mut rng = env_rng(seed, env_id as u64);
    let (n, dc, de) = (spec.n_samples, spec.d_c(), spec.d_e());
    let mut x = Vec::with_capacity(n * (dc + de));
    let mut y = Vec::with_capacity(n);
    let mut aligned = Vec::with_capacity(n);
    for _ in 0..n {
        let label = if rng.random_bool(spec.label_prior) { 1.0 } else { -1.0 };
        for &m in &spec.mu_c {
            x.push(label * m + spec.sigma_c * normal(&mut rng));
        }
        let use_aligned = spec.bias_degree >= 1.0 || rng.random_bool(spec.bias_degree);
        let mean = if use_aligned {
            &spec.mu_e
        } else {
            &spec.decoy_means[rng.random_range(0..spec.decoy_means.len())]
        };
        for &m in mean {
            x.push(label * m + spec.sigma_e * normal(&mut rng));
        }
        y.push(label);
        aligned.push(use_aligned);
    }
    let features = Array::matrix(n, dc + de, x).map_err(|e| invalid("features", e.to_string()))?;
    Ok((Dataset { env_id, features, labels: Labels::Binary(y) }, aligned))
}

/// Seeded draw from one environment's label-conditioned Gaussians.
pub fn sample_environment(spec: &GaussianEnvSpec, seed: u64, env_id: usize) -> Result<Dataset, EnvError> {
    Ok(sample_environment_traced(spec, seed, env_id)?.0)
}

/// Non-causal means for a suite.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanSource {
    /// One mean vector per environment.
    Explicit(Vec<Vec<f64>>),
    /// Gaussian draws affinely corrected so that, per coordinate, the mean and
    /// population variance across environments equal the targets exactly.
    Sampled { mean: f64, variance: f64, d_e: usize },
}

/// How each environment's distribution is materialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Materialize {
    /// `n_samples` Monte-Carlo draws per environment.
    Sampled,
    /// Product Gauss–Hermite rule with this many nodes per latent dimension.
    Quadrature { nodes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub envs: usize,
    pub mu_c: Vec<f64>,
    pub means: MeanSource,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub n_samples: usize,
    pub label_prior: f64,
    /// One value for every environment, or one per environment.
    pub bias_degrees: Vec<f64>,
    pub decoy_means: Vec<Vec<f64>>,
    pub materialize: Materialize,
    /// Apply a fixed seeded orthogonal rotation to `x`.
    pub rotate: bool,
}

impl SuiteConfig {
    /// The linear-case comparison setting: scalar `z_c`, `z_e`, unit variances.
    pub fn linear(envs: usize, mu_c: f64, mean: f64, variance: f64) -> Self {
        Self {
            envs,
            mu_c: vec![mu_c],
            means: MeanSource::Sampled { mean, variance, d_e: 1 },
            sigma_c: 1.0,
            sigma_e: 1.0,
            n_samples: 10_000,
            label_prior: 0.5,
            bias_degrees: vec![1.0],
            decoy_means: Vec::new(),
            materialize: Materialize::Sampled,
            rotate: false,
        }
    }
}

/// Environments sharing dimensions and noise levels.
#[derive(Clone, Debug)]
pub struct EnvironmentSuite {
    pub specs: Vec<GaussianEnvSpec>,
    pub envs: Vec<EnvData>,
    /// Per-coordinate mean of the non-causal means.
    pub mean_of_means: Vec<f64>,
    /// Per-coordinate population variance of the non-causal means.
    pub var_of_means: Vec<f64>,
    pub rotation: Option<Array>,
}

impl EnvironmentSuite {
    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.envs[0].dim()
    }

    /// Scalar non-causal means of a suite with `d_e = 1`.
    pub fn scalar_means(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.mu_e[0]).collect()
    }

    /// Suite assembled from already-materialized environments.
    pub fn from_envs(specs: Vec<GaussianEnvSpec>, envs: Vec<EnvData>) -> Result<Self, EnvError> {
        if envs.len() < 2 {
            return Err(EnvError::TooFewEnvironments { min: 2, got: envs.len() });
        }
        let means: Vec<Vec<f64>> = specs.iter().map(|s| s.mu_e.clone()).collect();
        let (mean_of_means, var_of_means) = moments(&means);
        Ok(Self { specs, envs, mean_of_means, var_of_means, rotation: None })
    }

    /// Mixture `Σ α_i P_i` over all environments except `exclude`.
    pub fn mixture_view(&self, weights: &[f64], exclude: Option<usize>) -> Result<MixtureView<'_>, EnvError> {
        if weights.len() != self.len() {
            return Err(invalid("weights", format!("expected {} entries, got {}", self.len(), weights.len())));
        }
        if let Some(q) = exclude {
            if weights[q] != 0.0 {
                return Err(EnvError::WeightOnExcluded { env: q, weight: weights[q] });
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(EnvError::NotSimplex(weights.to_vec()));
        }
        Ok(MixtureView { suite: self, weights: weights.to_vec() })
    }
}

/// Lazily weighted combination of per-environment expectations.
pub struct MixtureView<'a> {
    suite: &'a EnvironmentSuite,
    weights: Vec<f64>,
}

impl MixtureView<'_> {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_i α_i E_{P_i}[f]` where `f` maps an environment to its expectation.
    pub fn expectation(&self, mut f: impl FnMut(&EnvData) -> f64) -> f64 {
        self.suite
            .envs
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(env, w)| w * f(env))
            .sum()
    }
}

fn moments(means: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let e = means.len() as f64;
    let d = means.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / e).collect();
    let var = (0..d).map(|j| means.iter().map(|m| (m[j] - mean[j]).powi(2)).sum::<f64>() / e).collect();
    (mean, var)
}

/// Gaussian draws affinely mapped to exact per-coordinate moments.
pub fn corrected_means(envs: usize, d_e: usize, mean: f64, variance: f64, seed: u64) -> Result<Vec<Vec<f64>>, EnvError> {
    if variance < 0.0 {
        return Err(invalid("variance", "must be non-negative"));
    }
    if envs < 2 && variance > 0.0 {
        return Err(EnvError::TooFewEnvironments { min: 2, got: envs });
    }
    if envs == 0 {
        return Err(EnvError::TooFewEnvironments { min: 1, got: 0 });
    }
    // Stream u64::MAX keeps mean draws independent of every environment stream.
    let mut rng = env_rng(seed, u64::MAX);
    let mut out = vec![vec![0.0; d_e]; envs];
    for j in 0..d_e {
        let g: Vec<f64> = (0..envs).map(|_| normal(&mut rng)).collect();
        let m = g.iter().sum::<f64>() / envs as f64;
        let sd = (g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / envs as f64).sqrt();
        for i in 0..envs {
            out[i][j] = if variance == 0.0 { mean } else { mean + variance.sqrt() * (g[i] - m) / sd };
        }
    }
    Ok(out)
}

fn rotation_matrix(d: usize, seed: u64) -> Array {
    let mut rng = env_rng(seed, u64::MAX - 1);
    let g = nalgebra::DMatrix::from_fn(d, d, |_, _| normal(&mut rng));
    let q = g.qr().q();
    Array::matrix(d, d, (0..d * d).map(|k| q[(k / d, k % d)]).collect()).expect("rotation shape")
}

fn rotate(env: &mut EnvData, r: &Array) {
    // x ← R x for every row, i.e. X ← X Rᵀ.
    env.features = env.features.matmul(&r.transpose());
}

/// Builds a suite: non-causal means, per-environment specs and data.
pub fn make_suite(cfg: &SuiteConfig, seed: u64) -> Result<EnvironmentSuite, EnvError> {
    let means = match &cfg.means {
        MeanSource::Explicit(m) => {
            if m.len() != cfg.envs {
                return Err(invalid("means", format!("{} means for {} environments", m.len(), cfg.envs)));
            }
            m.clone()
        }
        MeanSource::Sampled { mean, variance, d_e } => corrected_means(cfg.envs, *d_e, *mean, *variance, seed)?,
    };
    if cfg.envs < 2 {
        return Err(EnvError::TooFewEnvironments { min: 2, got: cfg.envs });
    }
    let bias = |i: usize| -> Result<f64, EnvError> {
        match cfg.bias_degrees.len() {
            0 => Ok(1.0),
            1 => Ok(cfg.bias_degrees[0]),
            n if n == cfg.envs => Ok(cfg.bias_degrees[i]),
            n => Err(invalid("bias_degrees", format!("{n} values for {} environments", cfg.envs))),
        }
    };
    let specs = means
        .iter()
        .enumerate()
        .map(|(i, mu_e)| {
            let spec = GaussianEnvSpec {
                mu_c: cfg.mu_c.clone(),
                mu_e: mu_e.clone(),
                sigma_c: cfg.sigma_c,
                sigma_e: cfg.sigma_e,
                n_samples: cfg.n_samples,
                label_prior: cfg.label_prior,
                bias_degree: bias(i)?,
                decoy_means: cfg.decoy_means.clone(),
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    if specs.iter().any(|s| s.d_e() != specs[0].d_e()) {
        return Err(invalid("means", "all environments must share d_e"));
    }
    let mut envs = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| match cfg.materialize {
            Materialize::Sampled => Ok(EnvData::from(&sample_environment(spec, seed, i)?)),
            Materialize::Quadrature { nodes } => population_environment(spec, nodes),
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    let rotation = cfg.rotate.then(|| rotation_matrix(specs[0].dim(), seed));
    if let Some(r) = &rotation {
        envs.iter_mut().for_each(|e| rotate(e, r));
    }
    let mut suite = EnvironmentSuite::from_envs(specs, envs)?;
    suite.rotation = rotation;
    Ok(suite)
}

/// Multi-class bias-degree scenario: class `c` has causal mean
/// `causal_scale·e_c` and, with probability `bias_degree`, spurious mean
/// `spurious_scale·e_c`; otherwise the spurious mean belongs to a uniformly
/// drawn class.
#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassSpec {
    pub classes: usize,
    pub causal_scale: f64,
    pub spurious_scale: f64,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub n_samples: usize,
    pub bias_degree: f64,
}

impl MulticlassSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.classes < 2 {
            return Err(invalid("classes", "need at least two classes"));
        }
        if !(self.sigma_c > 0.0) || !(self.sigma_e > 0.0) {
            return Err(invalid("sigma", "noise levels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bias_degree) {
            return Err(invalid("bias_degree", format!("must lie in [0, 1], got {}", self.bias_degree)));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be positive"));
        }
        Ok(())
    }
}

/// Draws a multi-class environment; also returns per-row alignment flags.
pub fn sample_multiclass(spec: &MulticlassSpec, seed: u64, env_id: usize) -> Result<(Dataset, Vec<bool>), EnvError> {
    spec.validate()?;
    let k = spec.classes;
    let mut rng = env_rng(seed, env_id as u64);
    let mut x = Vec::with_capacity(spec.n_samples * 2 * k);
    let mut y = Vec::with_capacity(spec.n_samples);
    let mut aligned = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let c = rng.random_range(0..k);
        for j in 0..k {
            let m = if j == c { spec.causal_scale } else { 0.0 };
            x.push(m + spec.sigma_c * normal(&mut rng));
        }
        let a = spec.bias_degree >= 1.0 || rng.random_bool(spec.bias_degree);
        let s = if a { c } else { rng.random_range(0..k) };
        for j in 0..k {
            let m = if j == s { spec.spurious_scale } else { 0.0 };
            x.push(m + spec.sigma_e * normal(&mut rng));
        }
        y.push(c);
        aligned.push(a);
    }
    let features = Array::matrix(spec.n_samples, 2 * k, x).map_err(|e| invalid("features", e.to_string()))?;
    Ok((Dataset { env_id, features, labels: Labels::Classes { y, classes: k } }, aligned))
}

/// Multi-class suite with one bias degree per environment.
pub fn make_multiclass_suite(base: &MulticlassSpec, bias_degrees: &[f64], seed: u64) -> Result<Vec<Dataset>, EnvError> {
    if bias_degrees.len() < 2 {
        return Err(EnvError::TooFewEnvironments { min: 2, got: bias_degrees.len() });
    }
    bias_degrees
        .iter()
        .enumerate()
        .map(|(i, &b)| Ok(sample_multiclass(&MulticlassSpec { bias_degree: b, ..base.clone() }, seed, i)?.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_symmetric_means() {
        let m = corrected_means(2, 1, 0.0, 1.0, 3).unwrap();
        let mut v: Vec<f64> = m.iter().map(|x| x[0]).collect();
        v.sort_by(f64::total_cmp);
        assert!((v[0] + 1.0).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_env_with_variance_rejected() {
        assert!(matches!(corrected_means(1, 1, 0.0, 1.0, 0), Err(EnvError::TooFewEnvironments { .. })));
        assert!(corrected_means(1, 1, 0.5, 0.0, 0).is_ok());
    }

    #[test]
    fn missing_decoys_rejected() {
        let mut spec = GaussianEnvSpec::new(vec![1.0], vec![1.0], 10);
        spec.bias_degree = 0.5;
        assert!(matches!(sample_environment(&spec, 0, 0), Err(EnvError::MissingDecoys(_))));
    }

    #[test]
    fn mixture_rejects_weight_on_excluded() {
        let suite = make_suite(&SuiteConfig { n_samples: 10, ..SuiteConfig::linear(3, 1.0, 0.0, 1.0) }, 1).unwrap();
        assert!(matches!(suite.mixture_view(&[0.5, 0.5, 0.0], Some(0)), Err(EnvError::WeightOnExcluded { .. })));
        assert!(matches!(suite.mixture_view(&[0.0, 0.7, 0.7], Some(0)), Err(EnvError::NotSimplex(_))));
        let view = suite.mixture_view(&[0.0, 0.5, 0.5], Some(0)).unwrap();
        let mut calls = 0;
        let v = view.expectation(|_| {
            calls += 1;
            if calls == 1 { 0.2 } else { 0.4 }
        });
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let r = rotation_matrix(4, 9);
        let p = r.matmul(&r.transpose());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }
}
