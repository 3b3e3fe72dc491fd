use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use taskattn::eval::DEFAULT_EVAL_TASKS;
use taskattn::{run_analyze, run_eval, run_trace, run_train, with_threads, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "taskattn", version, about = "Task-attended meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives a sequential run.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, writing logs, validation results and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Meta-test a checkpoint on the test pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_TASKS)]
        tasks: usize,
    },
    /// Compare MetaLSTM and MetaLSTM++ trajectories on 2-D quadratics.
    Trace {
        #[command(flatten)]
        common: Common,
    },
    /// Attention trend, feature correlations and max-loss rank of a log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output));
    config.output = out.display().to_string();
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let (config, out) = load(&common)?;
            let summary = with_threads(common.threads, || run_train(&config, &out, checkpoint.as_deref()))??;
            println!("trained {} to iteration {}", config.label(), summary.iteration);
            if let Some((it, report)) = summary.validation.last() {
                println!("validation at {it}: {:.4} ± {:.4}", report.mean_accuracy, report.ci95);
            }
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            tasks,
        } => {
            let (config, out) = load(&common)?;
            let record = with_threads(common.threads, || run_eval(&config, &checkpoint, tasks, &out))??;
            println!(
                "{} at iteration {}: {:.4} ± {:.4} over {} tasks",
                record.label, record.iteration, record.report.mean_accuracy, record.report.ci95, record.tasks
            );
        }
        Command::Trace { common } => {
            let (config, out) = load(&common)?;
            let rows = with_threads(common.threads, || run_trace(&config, &out))??;
            for r in rows {
                println!(
                    "seed {} {:<10} path {:.4} oscillation {:.4} meta path {:.4} meta oscillation {:.4}",
                    r.seed, r.variant, r.path_length, r.oscillation, r.meta_path_length, r.meta_oscillation
                );
            }
        }
        Command::Analyze { log, out } => {
            let out = out.unwrap_or_else(|| log.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let analysis = run_analyze(&log, &out)?;
            println!(
                "analyzed {} iterations into {}",
                analysis.iterations.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
