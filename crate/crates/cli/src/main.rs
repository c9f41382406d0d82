use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffnet_cli::{run, timestep, validate, CliError, Overrides};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable that fixes the worker thread count.
const THREADS_VAR: &str = "DIFFNET_THREADS";

#[derive(Parser)]
#[command(
    name = "diffnet",
    version,
    about = "Train PINNs and DeepONets on ODE and PDE problems described in a config file"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write solution.csv, loss.csv, report.txt and model.bin.
    Run(Common),
    /// Check a config without training and list every issue.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train (or reuse model.bin) and roll a DeepONet forward in time.
    Timestep {
        #[command(flatten)]
        common: Common,
        /// Number of windows.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `training.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn overrides(&self, steps: Option<usize>) -> Overrides {
        Overrides { out: self.out.clone(), seed: self.seed, epochs: self.epochs, steps }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_VAR} must be a thread count, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run(common) => {
            let summary = run(&common.config, &common.overrides(None))?;
            match summary.mse() {
                Some(mse) => println!("mse {mse:e}"),
                None => println!("done"),
            }
            println!("artifacts in {}", summary.out.display());
        }
        Command::Validate { config } => {
            let issues = validate(&config)?;
            println!("{} issues", issues.len());
            for i in &issues {
                println!("  {i}");
            }
            if !issues.is_empty() {
                return Err(CliError::Invalid(issues));
            }
        }
        Command::Timestep { common, steps } => {
            let field = timestep(&common.config, &common.overrides(steps))?;
            if let Some(max) = field.max_abs_error() {
                println!("max abs error {max:e}");
            }
            println!("{} rows", field.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Invalid(_)) || std::env::args().nth(1).as_deref() != Some("validate") {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
