use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dgsm_lab::acquisition::AcquisitionKind;
use dgsm_lab::dgsm::{GroundTruthCache, GroundTruthRecord, DEFAULT_TRUTH_NODES};
use dgsm_lab::driver::{run_experiment, ExperimentConfig};
use dgsm_lab::problems::{list_problems, make_problem};

#[derive(Parser)]
#[command(name = "dgsm-lab", version, about = "Active learning of derivative-based global sensitivity measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated active-learning experiment.
    Run(RunArgs),
    /// Compute ground-truth DGSMs for a benchmark and print them as JSON.
    Truth {
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = DEFAULT_TRUTH_NODES)]
        nodes: usize,
        /// Cache directory for the result.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Report in the problem's original units instead of the unit cube.
        #[arg(long)]
        original_units: bool,
    },
    /// List benchmark problems.
    ListProblems,
    /// List acquisition functions.
    ListAcqs,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Acquisition name; global variants accept `name:M`, e.g. `gdsqvr:256`.
    #[arg(long)]
    acq: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dgsm_nodes: Option<usize>,
    #[arg(long)]
    truth_nodes: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Hyperparameter prior: none, gamma or dim-scaled.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Record per-iteration wall time (makes records.csv run-dependent).
    #[arg(long)]
    wall_time: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.problem {
            c.problem = v;
        }
        if let Some(v) = self.acq {
            c.acquisition = v.parse::<AcquisitionKind>()?;
        }
        if let Some(v) = self.budget {
            c.budget = v;
        }
        if let Some(v) = self.init {
            c.init_points = v;
        }
        if let Some(v) = self.replicates {
            c.replicates = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.dgsm_nodes {
            c.dgsm_nodes = v;
        }
        if let Some(v) = self.truth_nodes {
            c.truth_nodes = v;
        }
        if let Some(v) = self.noise_sd {
            c.noise_sd = v;
        }
        if let Some(v) = self.prior {
            c.fit.prior = serde_json::from_value(serde_json::Value::String(v.clone()))
                .with_context(|| format!("unknown prior {v:?}; expected none, gamma or dim-scaled"))?;
        }
        if self.cache_dir.is_some() {
            c.cache_dir = self.cache_dir;
        }
        if self.out.is_some() {
            c.out_dir = self.out;
        }
        c.record_wall_time |= self.wall_time;
        Ok(c)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let config = args.into_config()?;
            let result = run_experiment(&config)?;
            let s = &result.summary;
            if let Some(last) = s.iterations.last() {
                println!(
                    "{} / {}: {} of {} replicates succeeded; final rmse_sq median {:.6e}, ndcg_sq mean {:.4}",
                    s.problem, s.acquisition, s.succeeded, s.replicates, last.rmse_sq.median, last.ndcg_sq.mean
                );
            }
            if let Some(dir) = &config.out_dir {
                println!("outputs written to {}", dir.display());
            }
        }
        Command::Truth {
            problem,
            nodes,
            cache_dir,
            original_units,
        } => {
            let p = make_problem(&problem)?;
            let mut rec = match cache_dir {
                Some(dir) => GroundTruthCache::new(dir).get(&p, nodes)?,
                None => GroundTruthRecord::compute(&p, nodes)?,
            };
            if original_units {
                rec.dgsm = rec.dgsm.rescaled(&p.widths())?;
            }
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Command::ListProblems => {
            for name in list_problems() {
                let p = make_problem(&name)?;
                println!("{name}\td={}", p.dim());
            }
        }
        Command::ListAcqs => {
            for name in AcquisitionKind::names() {
                println!("{name}");
            }
        }
    }
    Ok(())
}
