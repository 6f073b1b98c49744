//! Command-line harness for distribution-inference experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use distinf::adaptive::{adaptive_campaign, MembershipOracleSpec, OracleMode};
use distinf::runner::{self, AdaptiveRunMeta, RunnerError};

#[derive(Parser)]
#[command(
    name = "distinf",
    version,
    about = "Black-box distribution-inference attacks on tabular classifiers",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a JSON config and write its reports.
    Run {
        /// Experiment config file.
        config: PathBuf,
        /// Output directory for report.json and the CSVs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results are identical for any value.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate attacks against victim snapshots at each configured epoch.
    EpochSweep {
        /// Experiment config file; epoch_checkpoints must be set.
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Cross victim architectures with adversary architectures.
    ArchGrid {
        /// Grid config file: {"experiment": ..., "victim_models": [...],
        /// "adversary_models": [...]}.
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Simulate the membership-oracle ratio estimator.
    Adaptive {
        /// Victim ratio grid, comma separated (e.g. 0.1,0.3,0.7).
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        /// Candidate rows planted per attribute value.
        #[arg(long, default_value_t = 100)]
        m: u64,
        /// Oracle true-positive rate.
        #[arg(long, default_value_t = 0.95)]
        beta: f64,
        /// Oracle false-positive rate.
        #[arg(long, default_value_t = 0.0)]
        fpr: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Expectation)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for adaptive_report.json and campaign.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running anything.
    Validate {
        config: PathBuf,
    },
}

/// Prints to stdout, ignoring write failures so piping into tools that
/// close the stream early (e.g. `head`) does not abort the run.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Expectation,
    Binomial,
}

impl From<ModeArg> for OracleMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Expectation => OracleMode::Expectation,
            ModeArg::Binomial => OracleMode::Binomial,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            // Display strings already chain their causes.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), RunnerError> {
    if let Some(jobs) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| RunnerError::Config(format!("cannot set --jobs {jobs}: {e}")))?;
    }
    Ok(())
}

fn report_failures(failed: usize, total: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("warning: {failed} of {total} cells failed; partial results were written");
        ExitCode::from(3)
    }
}

fn execute(command: Command) -> Result<ExitCode, RunnerError> {
    match command {
        Command::Run { config, out, seed, jobs } => {
            set_jobs(jobs)?;
            let mut cfg = runner::load_config(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            let total = cfg.alpha1_grid.len() * cfg.trials;
            let report = runner::run_experiment(&cfg)?;
            runner::emit_outputs(&report, &out)?;
            for gm in &report.grid_means {
                say!(
                    "{}: mean accuracy {:.4}, mean n_leaked {:.3}{}",
                    gm.attack,
                    gm.mean_accuracy,
                    gm.mean_nleaked,
                    if gm.any_saturated { " (saturated)" } else { "" }
                );
            }
            say!("wrote {}", out.display());
            Ok(report_failures(report.failures.len(), total))
        }
        Command::EpochSweep { config, out, seed, jobs } => {
            set_jobs(jobs)?;
            let mut cfg = runner::load_config(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            let total = cfg.alpha1_grid.len() * cfg.trials;
            let report = runner::run_epoch_sweep(&cfg)?;
            runner::emit_sweep(&report, &out)?;
            for point in &report.points {
                say!(
                    "epoch {:>4} {}: mean accuracy {:.4}",
                    point.epoch, point.attack, point.mean_accuracy
                );
            }
            say!("wrote {}", out.display());
            Ok(report_failures(report.failures.len(), total))
        }
        Command::ArchGrid { config, out, seed, jobs } => {
            set_jobs(jobs)?;
            let mut grid_cfg = runner::load_arch_grid_config(&config)?;
            if let Some(seed) = seed {
                grid_cfg.experiment.master_seed = seed;
            }
            let report = runner::run_architecture_grid(
                &grid_cfg.experiment,
                &grid_cfg.victim_models,
                &grid_cfg.adversary_models,
            )?;
            runner::emit_arch_grid(&report, &out)?;
            let mut failed = 0;
            for cell in &report.cells {
                match cell.mean_accuracy {
                    Some(acc) => say!(
                        "victim {} vs adversary {}: mean accuracy {:.4}",
                        cell.victim_arch, cell.adversary_arch, acc
                    ),
                    None => say!(
                        "victim {} vs adversary {}: all cells failed",
                        cell.victim_arch, cell.adversary_arch
                    ),
                }
                failed += cell.failed_cells;
            }
            say!("wrote {}", out.display());
            Ok(report_failures(failed, usize::max(failed, 1)))
        }
        Command::Adaptive { alpha, m, beta, fpr, mode, trials, seed, out } => {
            let oracle =
                MembershipOracleSpec { beta, fpr, mode: mode.into(), seed };
            // Parameter problems are config errors (exit 2); only sampling
            // outcomes inside the campaign count as runtime failures.
            oracle.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
            if alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                return Err(RunnerError::Config(
                    "every --alpha must lie strictly inside (0, 1)".into(),
                ));
            }
            if m == 0 || trials == 0 {
                return Err(RunnerError::Config("--m and --trials must be at least 1".into()));
            }
            let result = adaptive_campaign(&alpha, m, &oracle, trials)?;
            match result.nleaked_regression.is_infinite() {
                true => say!(
                    "mse {:.6e}, n_leaked unbounded (exact recovery), binary accuracy {:.4}",
                    result.mse, result.binary_accuracy
                ),
                false => say!(
                    "mse {:.6e}, n_leaked {:.3}, binary accuracy {:.4}",
                    result.mse, result.nleaked_regression, result.binary_accuracy
                ),
            }
            if let Some(out) = out {
                let meta = AdaptiveRunMeta {
                    alphas: alpha,
                    m,
                    beta,
                    fpr,
                    mode: oracle.mode,
                    trials,
                    seed,
                };
                runner::emit_adaptive(&result, &meta, &out)?;
                say!("wrote {}", out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => {
            runner::load_config(&config)?;
            say!("config ok: {}", config.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
