//! Command-line surface. `main` only forwards the process arguments to
//! [`execute`].

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use adagibbs_core::dependence::{gibbs_dependence, markov_psi_bound};
use adagibbs_core::seeding::rng_from_seed;
use adagibbs_core::{Measure, MeasureSpec};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::experiments::{random_chain, run_experiment_with};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adagibbs", version, about = "Adaptive data analysis experiments over correlated samples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the Gibbs dependence of a measure file.
    Psi { measure: PathBuf },
    /// Print the chain bound R, r and R_bar of a chain file.
    Bound { chain: PathBuf },
    /// Compare psi of the t-skipped chain with psi^t.
    SkipCheck {
        /// Chain file. Without one a random chain is drawn from --seed.
        chain: Option<PathBuf>,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Random chain length when no file is given.
        #[arg(long, default_value_t = 12)]
        n: usize,
        /// Random chain alphabet size when no file is given.
        #[arg(long, default_value_t = 2)]
        alphabet: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        /// Exit with status 2 when the check fails.
        #[arg(long)]
        check: bool,
    },
    /// Run one seeded game and dump its transcript.
    Game(RunArgs),
    /// Naive against Gaussian answers under the random-sign attack.
    Attack(RunArgs),
    /// Deviating private algorithm on the planted measure.
    Negative(RunArgs),
    /// Rounded mechanism with exhaustive transcript enumeration.
    Compress(RunArgs),
    /// Monitor diagnostics of the private attack pipeline.
    Monitor(RunArgs),
    /// Run any experiment from a config file.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON experiment config. Without one the defaults are used and
    /// --seed is required.
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Worker threads. Outputs do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Exit with status 2 when the acceptance threshold is missed.
    #[arg(long)]
    pub check: bool,
    /// Output directory [default: results/<experiment>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Builds the config for a subcommand. `default` names the experiment the
/// subcommand runs; `None` (for `run`) requires a config file.
pub fn resolve_config(args: &RunArgs, default: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, default) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => {
            let seed = args.seed.ok_or_else(|| CliError::Usage("--seed is required without a config file".into()))?;
            ExperimentConfig::new(seed, Experiment::default_for(name).expect("known experiment"))
        }
        (None, None) => return Err(CliError::Usage("run needs a config file".into())),
    };
    if let Some(name) = default {
        if cfg.experiment.name() != name {
            return Err(CliError::config(
                "experiment.name",
                format!("this subcommand runs `{name}`, the config names `{}`", cfg.experiment.name()),
            ));
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = Some(trials);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_measure(path: &Path) -> Result<Measure, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let spec: MeasureSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::config(if at == "." { String::new() } else { at }, e.into_inner().to_string())
    })?;
    Ok(Measure::try_from(spec)?)
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run_configured(args: &RunArgs, default: Option<&str>, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = resolve_config(args, default)?;
    let report = run_experiment_with(&cfg, args.workers)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("results").join(cfg.experiment.name()));
    for path in report.write(&dir)? {
        log::info!("wrote {}", path.display());
    }
    out.write_all(report.summary_json()?.as_bytes())?;
    writeln!(out, "{} {}", if report.summary.passed { "PASS" } else { "FAIL" }, cfg.experiment.name())?;
    Ok(if args.check && !report.summary.passed { EXIT_CHECK_FAILED } else { EXIT_OK })
}

#[allow(clippy::too_many_arguments)]
fn skip_check(
    chain: Option<&Path>,
    t: usize,
    seed: Option<u64>,
    n: usize,
    alphabet: usize,
    tolerance: f64,
    check: bool,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let measure = match (chain, seed) {
        (Some(path), _) => load_measure(path)?,
        (None, Some(seed)) => random_chain(&mut rng_from_seed(seed), n, alphabet, [1.0, 3.0])?,
        (None, None) => return Err(CliError::Usage("skip-check needs a chain file or --seed".into())),
    };
    if measure.as_chain().is_none() {
        return Err(CliError::Usage("skip-check needs a chain measure".into()));
    }
    let psi = gibbs_dependence(&measure)?.psi;
    let skipped = gibbs_dependence(&measure.skip(t)?)?.psi;
    let power = psi.powi(t as i32);
    let pass = skipped <= power + tolerance;
    writeln!(out, "psi_skipped {skipped:.17e}")?;
    writeln!(out, "psi_power {power:.17e}")?;
    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" })?;
    Ok(if check && !pass { EXIT_CHECK_FAILED } else { EXIT_OK })
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match &cli.command {
        Command::Psi { measure } => {
            print_json(out, &gibbs_dependence(&load_measure(measure)?)?)?;
            Ok(EXIT_OK)
        }
        Command::Bound { chain } => {
            print_json(out, &markov_psi_bound(&load_measure(chain)?)?)?;
            Ok(EXIT_OK)
        }
        Command::SkipCheck { chain, t, seed, n, alphabet, tolerance, check } => {
            skip_check(chain.as_deref(), *t, *seed, *n, *alphabet, *tolerance, *check, out)
        }
        Command::Game(a) => run_configured(a, Some("game"), out),
        Command::Attack(a) => run_configured(a, Some("attack"), out),
        Command::Negative(a) => run_configured(a, Some("negative-example"), out),
        Command::Compress(a) => run_configured(a, Some("compress"), out),
        Command::Monitor(a) => run_configured(a, Some("monitor"), out),
        Command::Run(a) => run_configured(a, None, out),
    }
}

/// Parses `args` and runs the command, returning the exit status. Usage
/// errors print to stderr and return 1.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return EXIT_ERROR;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}
