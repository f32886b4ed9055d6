//! Command-line front end: `generate`, `train`, `eval`, `report`, `verify`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{make_split, split_seed, write_split};
use crate::error::{Error, Result};
use crate::harness::eval::worker_pool;
use crate::harness::report::read_results_csv;
use crate::harness::{
    emit_report, evaluate_sweep, save_run, train, ExperimentConfig, TrainedModel, Variant,
};
use crate::theory::run_theory_suite;

#[derive(Debug, Parser)]
#[command(
    name = "slotnorm",
    version,
    about = "Slot Attention normalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON experiment config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set batch_size=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Evaluation slot counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    slots: Option<Vec<usize>>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut sets = self.sets.clone();
        if let Some(v) = self.variant {
            sets.push(format!("variant=\"{v}\""));
        }
        if let Some(s) = &self.slots {
            sets.push(format!("eval_slots={}", serde_json::to_string(s)?));
        }
        if let Some(n) = self.steps {
            sets.push(format!("steps={n}"));
        }
        base.with_overrides(&sets)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        self.resolve(base)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a dataset split to a binary file.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Split name; selects the seed stream ("train", "val", "test", ...).
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        count: usize,
        /// Largest object count kept (defaults to the config's generator maximum).
        #[arg(long)]
        max_objects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Output root (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a checkpoint over evaluation slot counts and object counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Results CSV (defaults to sweep.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge result CSVs into one table and render plots.
    Report {
        /// Result CSVs written by `eval`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run the numerical theory checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn generate(
    config: &ExperimentConfig,
    split: &str,
    count: usize,
    max_objects: Option<usize>,
    out: &Path,
) -> Result<()> {
    let spec = config.scene_spec();
    let max_objects = max_objects.unwrap_or(spec.max_objects);
    let samples = worker_pool()?
        .install(|| make_split(&spec, count, max_objects, split_seed(spec.seed, split)))?;
    write_split(out, &spec, &samples)?;
    println!("wrote {} scenes to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate {
            config,
            split,
            count,
            max_objects,
            out,
        } => generate(&config.load()?, &split, count, max_objects, &out)?,
        Command::Train { config, seed, out } => {
            let config = config.load()?;
            let out = out.unwrap_or_else(|| config.out_dir.clone());
            let (trained, log) = train(&config, seed)?;
            let files = save_run(&out, &trained, &log)?;
            println!(
                "trained {}: final loss {:.6}, validation F-ARI {:.4}; checkpoint {}",
                config.run_name(seed),
                log.entries.last().map_or(f64::NAN, |e| e.loss),
                log.val_f_ari,
                files.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            out,
        } => {
            let trained = TrainedModel::load(&checkpoint)?;
            let base = match &config.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => trained.config.clone(),
            };
            let eval_config = config.resolve(base)?;
            let results = evaluate_sweep(&trained, &eval_config)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("sweep.csv"));
            crate::harness::report::write_results_csv(&out, &results)?;
            for r in results
                .iter()
                .filter(|r| r.eval_objects == crate::harness::ObjectCount::All)
            {
                println!(
                    "{} seed {} K'={}: F-ARI {:.4} ARI {:.4} MSE {:.5} ({} scenes)",
                    r.variant, r.seed, r.eval_slots, r.f_ari, r.ari, r.l2, r.n_scenes
                );
            }
            println!("wrote {} records to {}", results.len(), out.display());
        }
        Command::Report {
            results,
            out,
            threshold,
        } => {
            let mut all = Vec::new();
            for path in &results {
                all.extend(read_results_csv(path)?);
            }
            let files = emit_report(&all, &out, threshold)?;
            println!(
                "wrote {} ({} records), {} plots, {} failed runs",
                files.csv.display(),
                all.len(),
                files.plots.len(),
                files.failed_runs.len()
            );
        }
        Command::Verify { seed } => {
            let checks = run_theory_suite(seed)?;
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on runtime failure or failed checks,
/// 2 on usage errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(_) = e {
                eprintln!("run with --help for usage");
            }
            1
        }
    }
}
