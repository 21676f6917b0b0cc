use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsie::sim::Method;
use dsie_cli::commands::{self, Failure, RunArgs};

#[derive(Parser)]
#[command(name = "dsie", version, about = "Microgrid state and input estimation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network and/or scenario, including the rank condition per area.
    Validate {
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Simulate a scenario and run the selected estimators.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the network named in the scenario.
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        replicates: u64,
        /// dsie, wls, tse or distributed-dsie; repeat or comma-separate.
        #[arg(long = "method", value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
    },
    /// Tabulate MSE ratios and detection statistics across run directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { network, scenario } => {
            let v = commands::cmd_validate(network.as_deref(), scenario.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&v).expect("diagnostics serialize"));
            if !v.ok {
                return Err(Failure::validation(anyhow::anyhow!(
                    "{} problem(s) found",
                    v.diagnostics.len()
                )));
            }
        }
        Command::Run {
            scenario,
            network,
            out,
            seed,
            replicates,
            methods,
        } => {
            let args = RunArgs {
                scenario,
                network,
                out,
                seed,
                replicates,
                methods,
            };
            let report = commands::cmd_run(&args)?;
            for (name, m) in &report.methods {
                println!(
                    "{name:<18} nmse {:.4e}  false alarms {:.4}  alarms {}",
                    m.metrics.nmse,
                    m.detection.false_alarm_rate,
                    m.alarms.len()
                );
            }
        }
        Command::Compare { dirs, json } => {
            let summary = commands::cmd_compare(&dirs)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            } else {
                print!("{summary}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
