use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chanfed::config::FederationConfig;
use chanfed::{gradcheck, runner, Error, Result};

#[derive(Parser, Debug)]
#[command(version, about = "Federated learning simulator with channel-wise personalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the run directory; defaults to the config's
    /// `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Write the partition manifest without training.
    Partition(RunArgs),
    /// Finite-difference check of the training gradient on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        nets: usize,
    },
    /// Summarize finished runs across seeds.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<(FederationConfig, String, PathBuf)> {
    let mut cfg = FederationConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    let stem = args
        .config
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, stem, out))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, stem, out) = load(&args)?;
            let dir = runner::run_experiment(&cfg, &stem, &out, args.parallel)?;
            print_final_metrics(&dir)?;
            println!("run written to {}", dir.display());
        }
        Command::Partition(args) => {
            let (cfg, stem, out) = load(&args)?;
            let path = runner::partition_only(&cfg, &stem, &out)?;
            println!("partition manifest written to {}", path.display());
        }
        Command::Gradcheck { seed, nets } => {
            let report = gradcheck::run(seed, nets)?;
            for case in &report.cases {
                println!(
                    "net {:>2} {:<40} params {:>4} lambda {:.3} max rel err {:.3e}",
                    case.index, case.description, case.parameters, case.lambda, case.max_rel_error
                );
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: max relative error {:.3e} (tolerance {:.0e})",
                report.max_rel_error,
                gradcheck::TOLERANCE
            );
            if !report.passed() {
                return Err(Error::Internal("gradient check failed".into()));
            }
        }
        Command::Report { runs, out } => {
            for path in runner::report(&runs, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn print_final_metrics(dir: &Path) -> Result<()> {
    let rows = chanfed::eval::read_metrics(&dir.join("metrics.csv"))?;
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    for r in rows.iter().filter(|r| r.round == last && r.client_id.is_none()) {
        println!("round {last} {} {}: {:.2}%", r.strategy, r.metric, r.value);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
