//! Command-line flags merged with an optional key-value configuration file;
//! flags win on conflict.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use vfmodel_core::ModelVariant;

use crate::error::{CliError, Result};
use crate::io::read_key_values;

#[derive(Parser, Debug)]
#[command(
    name = "vfmodel",
    version,
    about = "Two-stage Bayesian models for longitudinal visual-field data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic data set and its truth record.
    Simulate(Args),
    /// Fit every individual separately and write the sample pools.
    FitStage1(Args),
    /// Combine the pools into population posteriors.
    FitStage2(Args),
    /// Recover the random effects at selected stage-2 draws.
    RecoverEffects(Args),
    /// Posterior predictive p-values and DIC.
    Evaluate(Args),
    /// Recompute the posterior summary table from the chain files.
    Summarize(Args),
}

impl Command {
    pub fn args(&self) -> &Args {
        match self {
            Command::Simulate(f)
            | Command::FitStage1(f)
            | Command::FitStage2(f)
            | Command::RecoverEffects(f)
            | Command::Evaluate(f)
            | Command::Summarize(f) => f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::FitStage1(_) => "fit-stage1",
            Command::FitStage2(_) => "fit-stage2",
            Command::RecoverEffects(_) => "recover-effects",
            Command::Evaluate(_) => "evaluate",
            Command::Summarize(_) => "summarize",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Eq, Default)]
pub struct Args {
    /// Model variant.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub model: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long = "burn-in")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Individuals to simulate.
    #[arg(long)]
    pub individuals: Option<usize>,
    /// Visits per eye to simulate.
    #[arg(long)]
    pub visits: Option<usize>,
    /// Stage-2 draws used for random-effect recovery.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Key-value file with defaults for any of the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Fully merged settings of one invocation.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: Option<ModelVariant>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub chains: Option<usize>,
    pub jobs: Option<usize>,
    pub preset: Preset,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub individuals: Option<usize>,
    pub visits: Option<usize>,
    pub draws: Option<usize>,
}

const KEYS: [&str; 14] = [
    "model",
    "seed",
    "iterations",
    "burn-in",
    "thin",
    "chains",
    "jobs",
    "preset",
    "in",
    "out",
    "individuals",
    "visits",
    "draws",
    "config",
];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn from_file<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| usage(format!("{}: invalid value {v:?} for {key}", path.display())))
}

impl RunConfig {
    /// Merges the flags over the configuration file, if any.
    pub fn resolve(flags: &Args) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(file) = &flags.config {
            let kv = read_key_values(file)?;
            for (k, v) in &kv {
                let key = k.replace('_', "-");
                if !KEYS.contains(&key.as_str()) || key == "config" {
                    return Err(usage(format!("{}: unknown key {k}", file.display())));
                }
                match key.as_str() {
                    "model" => {
                        c.model = Some(
                            ModelVariant::from_number(from_file(file, k, v)?)
                                .map_err(|e| usage(e.to_string()))?,
                        )
                    }
                    "seed" => c.seed = Some(from_file(file, k, v)?),
                    "iterations" => c.iterations = Some(from_file(file, k, v)?),
                    "burn-in" => c.burn_in = Some(from_file(file, k, v)?),
                    "thin" => c.thin = Some(from_file(file, k, v)?),
                    "chains" => c.chains = Some(from_file(file, k, v)?),
                    "jobs" => c.jobs = Some(from_file(file, k, v)?),
                    "preset" => {
                        c.preset = Preset::from_str(v, true)
                            .map_err(|_| usage(format!("{}: unknown preset {v}", file.display())))?
                    }
                    "in" => c.input = Some(PathBuf::from(v)),
                    "out" => c.out = Some(PathBuf::from(v)),
                    "individuals" => c.individuals = Some(from_file(file, k, v)?),
                    "visits" => c.visits = Some(from_file(file, k, v)?),
                    "draws" => c.draws = Some(from_file(file, k, v)?),
                    _ => unreachable!(),
                }
            }
        }
        if let Some(m) = flags.model {
            c.model = Some(ModelVariant::from_number(m).map_err(|e| usage(e.to_string()))?);
        }
        c.seed = flags.seed.or(c.seed);
        c.iterations = flags.iterations.or(c.iterations);
        c.burn_in = flags.burn_in.or(c.burn_in);
        c.thin = flags.thin.or(c.thin);
        c.chains = flags.chains.or(c.chains);
        c.jobs = flags.jobs.or(c.jobs);
        c.preset = flags.preset.unwrap_or(c.preset);
        c.input = flags.input.clone().or(c.input);
        c.out = flags.out.clone().or(c.out);
        c.individuals = flags.individuals.or(c.individuals);
        c.visits = flags.visits.or(c.visits);
        c.draws = flags.draws.or(c.draws);
        for (name, v) in [
            ("iterations", c.iterations),
            ("thin", c.thin),
            ("chains", c.chains),
            ("jobs", c.jobs),
            ("individuals", c.individuals),
            ("visits", c.visits),
            ("draws", c.draws),
        ] {
            if v == Some(0) {
                return Err(usage(format!("--{name} must be at least 1")));
            }
        }
        Ok(c)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| usage("--seed is required"))
    }

    pub fn model(&self) -> Result<ModelVariant> {
        self.model.ok_or_else(|| usage("--model is required"))
    }

    pub fn input(&self) -> Result<&Path> {
        let p = self
            .input
            .as_deref()
            .ok_or_else(|| usage("--in is required"))?;
        if !p.exists() {
            return Err(CliError::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
            ));
        }
        Ok(p)
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| usage("--out is required"))
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(crate::pipeline::default_jobs)
    }
}
