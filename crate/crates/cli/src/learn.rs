use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use commitq::env::DEFAULT_ENUMERATION_CAP;
use commitq::learn::{every_n, optimality_trace, q_learning_traced, BehaviorMode, OptimalityOracle, RunConfig, StepSchedule};
use commitq::rng::stream_rng;

use crate::inputs::{load_behavior, load_env};
use crate::{CliError, Format};

/// Version of the CSV layout and manifest.
pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_COLUMNS: [&str; 5] = ["algorithm", "env", "seed", "step", "optimal"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Committed,
    Vanilla,
    Both,
}

impl Algorithm {
    fn runs(self) -> Vec<(&'static str, bool)> {
        match self {
            Algorithm::Committed => vec![("committed", true)],
            Algorithm::Vanilla => vec![("vanilla", false)],
            Algorithm::Both => vec![("committed", true), ("vanilla", false)],
        }
    }
}

/// Experiment settings; a config file provides them and flags override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub envs: Vec<String>,
    pub algorithm: Algorithm,
    pub seeds: u64,
    pub base_seed: u64,
    pub steps: u64,
    /// Checkpoint every this many steps; 0 logs only the final step.
    pub every: u64,
    pub eps0: f64,
    pub eps1000: f64,
    pub alpha0: f64,
    pub alpha1000: f64,
    /// Fixed behavior spec; epsilon-greedy when absent.
    pub behavior: Option<String>,
    /// Also write Q tables at every checkpoint.
    pub snapshots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            envs: vec!["corridor:k=5".into()],
            algorithm: Algorithm::Both,
            seeds: 200,
            base_seed: 0,
            steps: 100_000,
            every: 1_000,
            eps0: 0.1,
            eps1000: 0.01,
            alpha0: 0.1,
            alpha1000: 0.01,
            behavior: None,
            snapshots: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.envs.is_empty() {
            return Err(CliError::input("no environment given"));
        }
        if self.seeds == 0 {
            return Err(CliError::input("seeds must be at least 1"));
        }
        if self.steps == 0 {
            return Err(CliError::input("steps must be at least 1"));
        }
        for (name, v) in [
            ("eps0", self.eps0),
            ("eps1000", self.eps1000),
            ("alpha0", self.alpha0),
            ("alpha1000", self.alpha1000),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::input(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(clap::Args)]
pub struct Args {
    /// TOML file with experiment settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Zoo reference or environment file; repeat for several.
    #[arg(long)]
    pub env: Vec<String>,
    #[arg(long, value_enum)]
    pub algorithm: Option<Algorithm>,
    /// Number of seeds.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// First seed; runs use `base_seed .. base_seed + seeds`.
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// Learning steps per run.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Checkpoint cadence in steps; 0 keeps only the final step.
    #[arg(long)]
    pub every: Option<u64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub eps1000: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub alpha1000: Option<f64>,
    /// Fixed behavior instead of epsilon-greedy.
    #[arg(long)]
    pub behavior: Option<String>,
    /// Write Q tables at every checkpoint to `q_snapshots.csv`.
    #[arg(long)]
    pub snapshots: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

pub fn resolve_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut c = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if !args.env.is_empty() {
        c.envs = args.env.clone();
    }
    macro_rules! take {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { c.$f = v; })* };
    }
    take!(algorithm, seeds, base_seed, steps, every, eps0, eps1000, alpha0, alpha1000);
    if args.behavior.is_some() {
        c.behavior = args.behavior.clone();
    }
    c.snapshots |= args.snapshots;
    c.validate()?;
    Ok(c)
}

struct RunRows {
    curve: Vec<(u64, bool)>,
    snapshots: Vec<(u64, commitq::learn::QTable)>,
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let Format::Csv = args.format;
    let config = resolve_config(args)?;
    let epsilon = StepSchedule::from_anchors(config.eps0, config.eps1000).map_err(|e| CliError::input(e.to_string()))?;
    let alpha = StepSchedule::from_anchors(config.alpha0, config.alpha1000).map_err(|e| CliError::input(e.to_string()))?;

    std::fs::create_dir_all(&args.out)?;
    let mut curves = csv::Writer::from_path(args.out.join("learning.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    curves.write_record(CSV_COLUMNS).map_err(|e| CliError::Io(e.to_string()))?;
    let mut snaps = if config.snapshots {
        let mut w = csv::Writer::from_path(args.out.join("q_snapshots.csv")).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_record(["algorithm", "env", "seed", "step", "feature", "option", "q"])
            .map_err(|e| CliError::Io(e.to_string()))?;
        Some(w)
    } else {
        None
    };

    let mut summary = Vec::new();
    for reference in &config.envs {
        let loaded = load_env(reference)?;
        let env = &loaded.env;
        let behavior = match &config.behavior {
            Some(spec) => BehaviorMode::Fixed(load_behavior(Some(spec), &loaded)?),
            None => BehaviorMode::EpsilonGreedy(epsilon),
        };
        let oracle = OptimalityOracle::new(env, DEFAULT_ENUMERATION_CAP).map_err(|e| CliError::input(e.to_string()))?;
        for (name, committed) in config.algorithm.runs() {
            let run_config = RunConfig {
                total_steps: config.steps,
                committed,
                behavior: behavior.clone(),
                alpha,
                checkpoints: every_n(config.every, config.steps),
                snapshots: config.snapshots,
            };
            // Each seed owns its random stream, so the thread count cannot
            // change any result.
            let runs = (0..config.seeds)
                .into_par_iter()
                .map(|i| {
                    let seed = config.base_seed + i;
                    let (_, log) = q_learning_traced(env, &run_config, &mut stream_rng(seed, 0), |_, _| {})?;
                    let snapshots = log.checkpoints.iter().filter_map(|c| c.q.clone().map(|q| (c.t, q))).collect();
                    Ok(RunRows {
                        curve: optimality_trace(&log, &oracle),
                        snapshots,
                    })
                })
                .collect::<commitq::Result<Vec<_>>>()
                .map_err(|e| CliError::input(e.to_string()))?;
            let mut finals = 0usize;
            for (i, r) in runs.iter().enumerate() {
                let seed = (config.base_seed + i as u64).to_string();
                for &(step, optimal) in &r.curve {
                    curves
                        .write_record([name, &loaded.name, &seed, &step.to_string(), if optimal { "1" } else { "0" }])
                        .map_err(|e| CliError::Io(e.to_string()))?;
                }
                finals += r.curve.last().is_some_and(|c| c.1) as usize;
                if let Some(w) = snaps.as_mut() {
                    for (step, q) in &r.snapshots {
                        for z in 0..q.n_features() {
                            for o in 0..q.n_options() {
                                w.write_record([
                                    name,
                                    &loaded.name,
                                    &seed,
                                    &step.to_string(),
                                    &env.feature_names()[z],
                                    env.option(o).name(),
                                    &format!("{:?}", q.get(z, o)),
                                ])
                                .map_err(|e| CliError::Io(e.to_string()))?;
                            }
                        }
                    }
                }
            }
            summary.push(format!(
                "{name} {}: final mean optimality {:.3} over {} seeds",
                loaded.name,
                finals as f64 / config.seeds as f64,
                config.seeds
            ));
        }
    }
    curves.flush()?;
    if let Some(w) = snaps.as_mut() {
        w.flush()?;
    }

    let manifest = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "columns": CSV_COLUMNS,
        "config_hash": config.hash(),
        "config": config,
        "generator": format!("commitq {}", env!("CARGO_PKG_VERSION")),
    });
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    for line in summary {
        eprintln!("{line}");
    }
    Ok(())
}
