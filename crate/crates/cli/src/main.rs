use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tnvd::runner::{self, ExperimentKind, RunConfig, RunOutput, SweepAxis, SweepConfig};
use tnvd::Error;

#[derive(Parser)]
#[command(name = "tnvd", version, about = "Tensor network variational diagonalization experiments")]
struct Cli {
    /// More log output (repeat for trace level).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and analyze the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Run directory, overriding the config and TNVD_OUTPUT_ROOT.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Continue from checkpoints found in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train one run per value of an axis and write sweep.csv.
    Sweep {
        config: PathBuf,
        /// One of n, chi-a, layers, w. Defaults to the config's [sweep].
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Worker threads; zero uses every core.
        #[arg(short, long)]
        workers: Option<usize>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Recompute the analysis artifacts of a finished run directory.
    Analyze { run_dir: PathBuf },
    /// Print the default configuration.
    ShowDefaults,
    /// Check a config file without running it.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn report(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    match out {
        RunOutput::Single(s) => println!("{}", serde_json::to_string_pretty(s)?),
        RunOutput::Sweep(rows) => {
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} runs, {failed} failed: {}", rows.len(), dir.join("sweep.csv").display());
        }
        RunOutput::DisorderScan(rows) => {
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "{} runs, {failed} failed: {}",
                rows.len(),
                dir.join("disorder_summary.csv").display()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, output, resume } => {
            let mut cfg = load(&config)?;
            if output.is_some() {
                cfg.output_dir = output;
            }
            let (dir, out) = runner::execute(&cfg, resume)?;
            log::info!("artifacts in {}", dir.display());
            report(&dir, &out)
        }
        Command::Sweep {
            config,
            axis,
            values,
            workers,
            output,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.kind = ExperimentKind::Sweep;
            match (axis, values, cfg.sweep.take()) {
                (Some(axis), Some(values), _) => cfg.sweep = Some(SweepConfig { axis, values }),
                (None, None, Some(s)) => cfg.sweep = Some(s),
                (axis, values, Some(s)) => {
                    cfg.sweep = Some(SweepConfig {
                        axis: axis.unwrap_or(s.axis),
                        values: values.unwrap_or(s.values),
                    })
                }
                _ => return Err(Error::Config("a sweep needs --axis and --values or a [sweep] section".into()).into()),
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if output.is_some() {
                cfg.output_dir = output;
            }
            cfg.validate()?;
            let dir = cfg.output_dir();
            let rows = runner::run_sweep(&cfg, &dir, resume)?;
            report(&dir, &RunOutput::Sweep(rows))
        }
        Command::Analyze { run_dir } => {
            let s = runner::analyze_dir(&run_dir).with_context(|| format!("analyzing {}", run_dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Command::ShowDefaults => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            let runs = cfg.expand()?.len();
            println!("{}: ok ({runs} run{})", config.display(), if runs == 1 { "" } else { "s" });
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Spec(_)));
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}
