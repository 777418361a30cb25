//! `trisk`: generate suites, train, sweep weight ratios and certify the
//! counterexample from TOML configs.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use transfer_risk::analysis::{build_counterexample, certify_counterexample, ratio_sweep, AnalysisError};
use transfer_risk::autodiff::AdError;
use transfer_risk::envgen::{make_suite, read_binary, write_binary, write_csv, Dataset, EnvData, EnvError};
use transfer_risk::inner::InnerError;
use transfer_risk::objectives::ObjectiveError;
use transfer_risk::trainer::{train_from, init_model, write_checkpoint, Algorithm, TrainError};

use config::{sha256_hex, ConfigError, ExperimentConfig};

const MANIFEST_VERSION: &str = "# transfer-risk manifest v1";

#[derive(Parser)]
#[command(name = "trisk", version, about = "Transfer risk minimization experiments")]
struct Cli {
    /// Overrides the config's top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: the config's `out`, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a suite and write it as binary and CSV datasets.
    Generate { config: PathBuf },
    /// Train one algorithm and write per-iteration metrics and a checkpoint.
    Train { config: PathBuf },
    /// Weight-ratio sweep of ERM, IRMv1 and TRM.
    Sweep { config: PathBuf },
    /// Monte-Carlo certificate for the counterexample classifier.
    Certify { config: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Sweep { .. } => "sweep",
            Command::Certify { .. } => "certify",
        }
    }

    fn config(&self) -> &Path {
        match self {
            Command::Generate { config } | Command::Train { config } | Command::Sweep { config } | Command::Certify { config } => config,
        }
    }
}

/// Where a run writes, plus the hashes that go into its manifest.
struct Run {
    dir: PathBuf,
    command: &'static str,
    config: ExperimentConfig,
    outputs: Vec<(String, String)>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)
    }

    /// Hashes a file some library call already wrote.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.outputs.push((name.to_string(), sha256_hex(&bytes)));
        Ok(())
    }

    /// `config.toml` (the effective config) and `manifest.toml`.
    fn finish(mut self) -> Result<()> {
        let canonical = self.config.canonical();
        let hash = sha256_hex(canonical.as_bytes());
        self.write("config.toml", canonical.as_bytes())?;
        let mut m = format!("{MANIFEST_VERSION}\ncommand = \"{}\"\nconfig_hash = \"{hash}\"\nseed = {}\n", self.command, self.config.seed);
        m.push_str(&format!("replay = \"trisk {} config.toml --out <dir>\"\n\n[outputs]\n", self.command));
        for (name, h) in &self.outputs {
            m.push_str(&format!("\"{name}\" = \"{h}\"\n"));
        }
        let path = self.path("manifest.toml");
        fs::write(&path, m).with_context(|| format!("writing {}", path.display()))
    }

    fn config_hash(&self) -> String {
        sha256_hex(self.config.canonical().as_bytes())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(ConfigError::Invalid("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("building the job pool")?;
    }
    let mut config = ExperimentConfig::load(cli.command.config())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let dir = cli.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut run = Run { dir, command: cli.command.name(), config, outputs: Vec::new() };
    // Validate before creating any output.
    match &cli.command {
        Command::Generate { .. } => generate(&mut run)?,
        Command::Train { .. } => train(&mut run)?,
        Command::Sweep { .. } => sweep(&mut run)?,
        Command::Certify { .. } => certify(&mut run)?,
    }
    run.finish()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn generate(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let suite_cfg = c.section(&c.suite, "suite")?.to_suite()?;
    if suite_cfg.materialize != transfer_risk::envgen::Materialize::Sampled {
        return Err(ConfigError::Invalid("generate writes sampled datasets; drop `quadrature_nodes`".into()).into());
    }
    let suite = make_suite(&suite_cfg, c.seed)?;
    let sets: Vec<Dataset> = suite
        .envs
        .iter()
        .enumerate()
        .map(|(i, e)| Dataset { env_id: i, features: e.features.clone(), labels: e.labels.clone() })
        .collect();
    create_dir(&run.dir)?;
    write_binary(&run.path("data.bin"), &sets)?;
    run.record("data.bin")?;
    write_csv(&run.path("data.csv"), &sets)?;
    run.record("data.csv")?;
    println!("wrote {} environments × {} rows to {}", sets.len(), suite_cfg.n_samples, run.dir.display());
    Ok(())
}

fn train(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let cfg = c.section(&c.train, "train")?.to_train(c.seed)?;
    let envs: Vec<EnvData> = match (&c.data, &c.suite) {
        (Some(_), Some(_)) => return Err(ConfigError::Invalid("give either `data` or [suite], not both".into()).into()),
        (Some(path), None) => read_binary(path).with_context(|| format!("loading {}", path.display()))?.iter().map(EnvData::from).collect(),
        (None, Some(s)) => make_suite(&s.to_suite()?, c.seed)?.envs,
        (None, None) => return Err(ConfigError::Invalid("train needs `data` or a [suite] section".into()).into()),
    };
    let model = init_model(&envs, &cfg)?;
    create_dir(&run.dir)?;
    let hash = run.config_hash();
    let tag = cfg.algorithm.tag();
    match train_from(&envs, model, &cfg) {
        Ok(out) => {
            write_metrics(run, &out.metrics, matches!(cfg.algorithm, Algorithm::Trm(_)))?;
            write_checkpoint(&run.dir, "model", &out.family.model, tag, &hash)?;
            run.record("model.bin")?;
            run.record("model.manifest")?;
            let last = out.metrics.evals.last();
            println!(
                "{tag}: {} iterations; final mean env loss {:.6}, transfer sum-sup {:.6}, weight ratio {}",
                cfg.iterations,
                last.map_or(f64::NAN, |r| r.env_loss.iter().sum::<f64>() / r.env_loss.len() as f64),
                last.map_or(f64::NAN, |r| r.transfer_sumsup),
                last.and_then(|r| r.weight_ratio).map_or("n/a".into(), |r| format!("{r:.6}")),
            );
            Ok(())
        }
        Err(TrainError::Diverged { iteration, what, last_good, metrics }) => {
            // Keep what was logged so the divergence can be inspected.
            write_metrics(run, &metrics, matches!(cfg.algorithm, Algorithm::Trm(_)))?;
            write_checkpoint(&run.dir, "model", &last_good, tag, &hash)?;
            Err(TrainError::Diverged { iteration, what, last_good, metrics }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn write_metrics(run: &mut Run, metrics: &transfer_risk::trainer::RunMetrics, alphas: bool) -> Result<()> {
    let mut buf = Vec::new();
    metrics.write_csv(&mut buf)?;
    run.write("metrics.csv", &buf)?;
    if alphas {
        let mut buf = Vec::new();
        metrics.write_alpha_csv(&mut buf)?;
        run.write("alpha.csv", &buf)?;
    }
    Ok(())
}

fn sweep(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let spec = c.section(&c.sweep, "sweep")?.to_sweep(c.seed)?;
    let result = ratio_sweep(&spec)?;
    create_dir(&run.dir)?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    run.write("sweep.csv", &buf)?;
    let summary = result.summary();
    run.write("summary.txt", summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn certify(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let (spec, cfg) = c.section(&c.certify, "certify")?.to_spec(c.seed)?;
    let clf = build_counterexample(&spec)?;
    let cert = certify_counterexample(&clf, &spec, &cfg)?;
    create_dir(&run.dir)?;
    let hash = run.config_hash();
    let mut buf = Vec::new();
    cert.write_csv(&mut buf, &hash)?;
    run.write("certificate.csv", &buf)?;
    let summary = cert.summary();
    run.write("certificate.txt", summary.as_bytes())?;
    print!("{summary}");
    std::io::stdout().flush()?;
    Ok(())
}

const VALIDATION: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|cause| {
            if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
                Some(VALIDATION)
            } else if let Some(e) = cause.downcast_ref::<AnalysisError>() {
                analysis_code(e)
            } else if let Some(e) = cause.downcast_ref::<TrainError>() {
                train_code(e)
            } else if let Some(e) = cause.downcast_ref::<EnvError>() {
                env_code(e)
            } else {
                cause.downcast_ref::<ObjectiveError>().and_then(objective_code)
            }
        })
        .unwrap_or(1)
}

fn analysis_code(e: &AnalysisError) -> Option<u8> {
    match e {
        AnalysisError::Env(e) => env_code(e),
        AnalysisError::Train(e) => train_code(e),
        AnalysisError::Objective(e) => objective_code(e),
        AnalysisError::Geometry(_) | AnalysisError::Invalid(_) => Some(VALIDATION),
        AnalysisError::Precision { .. } => Some(NUMERIC),
    }
}

fn train_code(e: &TrainError) -> Option<u8> {
    match e {
        TrainError::Config(_) => Some(VALIDATION),
        TrainError::Objective(e) => objective_code(e),
        TrainError::Diverged { .. } => Some(NUMERIC),
        TrainError::Checkpoint(_) | TrainError::Io(_) => None,
    }
}

fn env_code(e: &EnvError) -> Option<u8> {
    match e {
        EnvError::Io(_) => None,
        _ => Some(VALIDATION),
    }
}

fn objective_code(e: &ObjectiveError) -> Option<u8> {
    match e {
        ObjectiveError::Inner(InnerError::NonFinite | InnerError::NeumannNonFinite { .. }) => Some(NUMERIC),
        ObjectiveError::Autodiff(AdError::NonFinite { .. }) => Some(NUMERIC),
        _ => Some(VALIDATION),
    }
}
