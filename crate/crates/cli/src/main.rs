use std::path::PathBuf;
use std::process::ExitCode;

use autorank_cli::commands::{self, RunOptions};
use autorank_cli::OUTPUT_ROOT_ENV;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autorank", version, about = "Automatic rank search for low-rank adapters")]
struct Cli {
    /// Directory that relative output paths are placed under.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines, or JSON).
    config: PathBuf,
    /// Override a config key, e.g. `--set train.total_epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write SVG plots next to the CSV files.
    #[arg(long)]
    plots: bool,
}

impl ConfigArgs {
    fn options(&self, seed: Option<u64>, root: Option<PathBuf>) -> RunOptions {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = seed {
            overrides.push(format!("task.seed={seed}"));
            overrides.push(format!("train.seed={seed}"));
        }
        if let Some(dir) = &self.output {
            overrides.push(format!("output.dir={}", dir.display()));
        }
        if self.plots {
            overrides.push("output.plots=true".into());
        }
        RunOptions {
            overrides,
            output_root: root,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write summary, per-epoch and restart files.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// Seed for both the task and the training run.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with and without restarts for every seed and compare.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Runs executed at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sphere ratio Monte Carlo over a grid of dimensions and sample counts.
    Theory {
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        samples: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short, default_value = "out/theory")]
        output: PathBuf,
    },
    /// Redraw the SVG plots of a run directory from its CSV files.
    Plot { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root;
    let result = match cli.command {
        Command::Run { args, seed } => {
            commands::cmd_run(&args.config, &args.options(seed, root)).map(|(dir, m)| {
                println!(
                    "{}: final train {:.4e}, eval {}, I = {}, recovery error {:.4}",
                    dir.display(),
                    m.final_train_loss,
                    m.final_eval_loss.map_or("n/a".into(), |v| format!("{v:.4e}")),
                    m.final_retained,
                    m.recovery_error
                );
            })
        }
        Command::Sweep { args, seeds, jobs } => {
            commands::cmd_sweep(&args.config, &seeds, jobs, &args.options(None, root)).map(|(dir, o)| {
                println!("{}", dir.join(commands::SWEEP_FILE).display());
                for a in &o.aggregates {
                    println!(
                        "{:>10}: median eval {:.4e} (iqr {:.2e}), median I {}, median recovery error {:.4}",
                        a.mode.to_string(),
                        a.final_eval.median,
                        a.final_eval.iqr,
                        a.final_retained.median,
                        a.recovery_error.median
                    );
                }
            })
        }
        Command::Theory {
            dims,
            samples,
            trials,
            seed,
            output,
        } => {
            let dir = match &root {
                Some(r) if output.is_relative() => r.join(&output),
                _ => output,
            };
            commands::cmd_theory(&dims, &samples, trials, seed, &dir).map(|o| {
                println!("{:>5} {:>7} {:>10} {:>10} {:>10}", "R", "lambda", "median", "mean", "predicted");
                for c in &o.cells {
                    println!(
                        "{:>5} {:>7} {:>10.5} {:>10.5} {:>10.5}",
                        c.dimension, c.samples, c.median, c.mean, c.predicted_mean
                    );
                }
                println!(
                    "medians decreasing along samples: {}, along dimension: {}",
                    o.median_decreasing_in_samples, o.median_decreasing_in_dimension
                );
            })
        }
        Command::Plot { run_dir } => commands::cmd_plot(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

