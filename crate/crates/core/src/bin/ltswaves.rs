use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ltswaves::harness::{coeffs_report, execute, CoeffFormat, Experiment, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "ltswaves", version, about = "Adams-Bashforth local time-stepping for the 1D damped wave equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or tabulate exact LTS-ABk(p) coefficients.
    Coeffs {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, default_value = "table")]
        format: CoeffFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Convergence study against the closed-form solution.
    Converge(Common),
    /// CFL ratio table.
    Stability(Common),
    /// Single simulation with time series and a final snapshot.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set k=3` or `--set stability.tol_rel=1e-2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides `output` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common, experiment: Experiment) -> Result<ExperimentConfig, HarnessError> {
    let mut overrides = vec![format!("experiment=\"{experiment}\"")];
    overrides.extend(common.set.iter().cloned());
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::parse("", &overrides),
    }
}

fn run_common(common: &Common, experiment: Experiment) -> Result<ExitCode, HarnessError> {
    let cfg = load(common, experiment)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.clone());
    let outcome = execute(&cfg, &out)?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if outcome.aborted > 0 {
        eprintln!("{} row(s) aborted by instability", outcome.aborted);
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Coeffs { k, p, format, common } => match (k, p) {
            (Some(k), Some(p)) => coeffs_report(*k, *p, *format).map(|s| {
                print!("{s}");
                ExitCode::SUCCESS
            }),
            (None, None) => run_common(common, Experiment::Coeffs),
            _ => Err(HarnessError::Config("--k and --p must be given together".into())),
        },
        Command::Converge(c) => run_common(c, Experiment::Converge),
        Command::Stability(c) => run_common(c, Experiment::Stability),
        Command::Run(c) => run_common(c, Experiment::Run),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
