//! `echo-rnn`: generate benchmark data, train gated-recurrence variants,
//! run the ablation grid, and export diagnostics.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric or training failure.

use echo_cli::{commands, config};

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Experiment, Task};

/// Marker attached to errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError;

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration")
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "echo-rnn", version, about = "Output-conditioned LSTM experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task: distractor or listops.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Model variant: baseline, attentive, hybrid-ocg, echo.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Extra key=value overrides (same vocabulary as the config file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shrink sizes/epochs to run in minutes on a laptop CPU.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Output directory (ECHO_RNN_OUT overrides this).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test dataset files plus a manifest.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
        /// Training-set size (shorthand for --set n_train=N).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one model variant for each seed.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train all four variants across the seed list and tabulate.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export gate, attention, gradient, and half-life diagnostics.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained baseline weight file.
        #[arg(long)]
        baseline_weights: Option<PathBuf>,
        /// Trained echo weight file.
        #[arg(long)]
        echo_weights: Option<PathBuf>,
        /// Diagnostics to run: gates, variance, attention, gradients,
        /// half-life (repeatable).
        #[arg(long = "diagnostic", value_name = "NAME")]
        diagnostics: Vec<String>,
        /// Run everything.
        #[arg(long)]
        all: bool,
        /// Use freshly initialized models (null comparison).
        #[arg(long)]
        untrained: bool,
        /// Evaluation batch size.
        #[arg(long, default_value_t = 200)]
        n_samples: usize,
        /// Gate-variance window, inclusive 1-based "lo,hi".
        #[arg(long, default_value = "10,50")]
        window: String,
        #[arg(long, default_value_t = 1)]
        eval_seed: u64,
        /// Permutations for the half-life significance test.
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
    },
    /// Accuracy vs trigger position for two or more trained models.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained weight file (give at least two).
        #[arg(long = "weights", value_name = "PATH")]
        weights: Vec<PathBuf>,
        /// Comma-separated trigger positions.
        #[arg(long, default_value = "5,15,25,35,45")]
        positions: String,
        #[arg(long, default_value_t = 200)]
        n_per_position: usize,
    },
    /// Check analytic gradients against finite differences for all four
    /// variants.
    VerifyGradients {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Precedence: built-in defaults, then config file, then flags, then the
/// ECHO_RNN_OUT environment variable for the output directory.
fn resolve(common: &CommonArgs) -> Result<Experiment> {
    // the task decides which defaults apply, so settle it first
    let mut task = Task::Distractor;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "task" {
                    task = Task::from_name(v.trim())?;
                }
            }
        }
    }
    if let Some(t) = &common.task {
        task = Task::from_name(t)?;
    }

    let mut exp = Experiment::defaults(task);
    if let Some(path) = &common.config {
        exp.load_file(path)?;
    }
    if let Some(t) = &common.task {
        exp.apply("task", t)?;
    }
    if let Some(m) = &common.model {
        exp.apply("model", m)?;
    }
    if let Some(s) = &common.seeds {
        exp.apply("seeds", s)?;
    }
    if common.desk_scale {
        exp.apply_desk_scale();
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        exp.apply(k.trim(), v.trim())?;
    }
    if let Some(out) = &common.out {
        exp.output_dir = out.clone();
    }
    if let Some(dir) = &common.data_dir {
        exp.data_dir = dir.clone();
    }
    if let Ok(out) = std::env::var("ECHO_RNN_OUT") {
        exp.output_dir = PathBuf::from(out);
    }
    Ok(exp)
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| anyhow::anyhow!("expected \"lo,hi\", got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(Into::into))
        .collect()
}

fn usage(e: anyhow::Error) -> anyhow::Error {
    e.context(UsageError)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, force, n } => {
            let mut exp = resolve(&common).map_err(usage)?;
            if let Some(n) = n {
                exp.apply("n_train", &n.to_string()).map_err(usage)?;
            }
            commands::cmd_gen(&exp, force)
        }
        Command::Train { common } => {
            let exp = resolve(&common).map_err(usage)?;
            commands::cmd_train(&exp)
        }
        Command::Ablate { common } => {
            let exp = resolve(&common).map_err(usage)?;
            commands::cmd_ablate(&exp)
        }
        Command::Diagnose {
            common,
            baseline_weights,
            echo_weights,
            mut diagnostics,
            all,
            untrained,
            n_samples,
            window,
            eval_seed,
            permutations,
        } => {
            let exp = resolve(&common).map_err(usage)?;
            if all {
                diagnostics.push("all".to_string());
            }
            if diagnostics.is_empty() {
                return Err(usage(anyhow::anyhow!(
                    "nothing to do: pass --all or at least one --diagnostic"
                )));
            }
            let args = commands::DiagnoseArgs {
                baseline_weights,
                echo_weights,
                diagnostics,
                untrained,
                n_samples,
                window: parse_pair(&window).map_err(usage)?,
                eval_seed,
                permutations,
            };
            commands::cmd_diagnose(&exp, &args)
        }
        Command::Sweep { common, weights, positions, n_per_position } => {
            let exp = resolve(&common).map_err(usage)?;
            let positions = parse_list(&positions).map_err(usage)?;
            commands::cmd_sweep(&exp, &weights, &positions, n_per_position)
        }
        Command::VerifyGradients { epsilon, tolerance } => {
            commands::cmd_verify_gradients(epsilon, tolerance)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    // context markers are only visible on the top-level error, not in
    // the source chain
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<clap::Error>().is_some()
    {
        return 1;
    }
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<echo_core::Error>() {
            return match core {
                echo_core::Error::Training { .. } => 3,
                echo_core::Error::Config(_) | echo_core::Error::Spec(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's help/version on stdout with success status,
            // and report flag mistakes as usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
