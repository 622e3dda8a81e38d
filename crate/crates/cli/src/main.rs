use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedexdnn::fedserver::Aggregator;
use fedexdnn::orchestrator::RunOptions;
use fedexdnn_cli::{cmd_ablate, cmd_fed, cmd_local, load_config, CliError, RunRecord, Toggle};

/// Federated exemplar-based anomaly detection experiments.
///
/// Logging is controlled by FEDEXDNN_LOG (error, warn, info, debug).
#[derive(Parser)]
#[command(name = "fedexdnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one ExDNN on all training data.
    Local {
        #[command(flatten)]
        common: Common,
    },
    /// Run communication rounds over in-process clients.
    Fed {
        #[command(flatten)]
        common: Common,
        /// Clients trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_clients: usize,
        /// Exemplar aggregator(s), comma separated, or "all".
        #[arg(long, value_delimiter = ',')]
        aggregator: Vec<String>,
    },
    /// Single-device runs with loss terms switched off.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Loss term to drop: cluster, balance, absolute or drp. Repeatable.
        #[arg(long)]
        toggle: Vec<Toggle>,
        /// Training contamination fraction(s), comma separated.
        #[arg(long, value_delimiter = ',')]
        contaminate: Vec<f64>,
        /// Balance-term weight(s), comma separated.
        #[arg(long, value_delimiter = ',')]
        balance_weights: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Exemplar count(s) to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    exemplars: Vec<usize>,
}

fn parse_aggregators(names: &[String]) -> Result<Vec<Aggregator>, CliError> {
    if names.iter().any(|n| n == "all") {
        return Ok(Aggregator::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.parse().map_err(|e: fedexdnn::fedserver::UnknownAggregator| CliError::Config(e.to_string())))
        .collect()
}

fn run(cli: Cli) -> Result<Vec<RunRecord>, CliError> {
    let load = |c: &Common| -> Result<_, CliError> {
        let mut cfg = load_config(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    match cli.command {
        Command::Local { common } => cmd_local(&load(&common)?, &common.exemplars, &common.out),
        Command::Fed {
            common,
            parallel_clients,
            aggregator,
        } => {
            let aggregators = parse_aggregators(&aggregator)?;
            let opts = RunOptions { parallel_clients };
            cmd_fed(&load(&common)?, &aggregators, &common.exemplars, opts, &common.out)
        }
        Command::Ablate {
            common,
            toggle,
            contaminate,
            balance_weights,
        } => {
            let mut cfg = load(&common)?;
            if let [k] = common.exemplars[..] {
                cfg.exemplars = k;
            } else if !common.exemplars.is_empty() {
                return Err(CliError::Config("ablate takes a single --exemplars value".into()));
            }
            cmd_ablate(&cfg, &toggle, &contaminate, &balance_weights, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FEDEXDNN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(records) => {
            for r in &records {
                let m = &r.final_report().metrics;
                let f1 = m.at_threshold.map_or(String::from("-"), |t| format!("{:.4}", t.f1));
                println!("{:<24} auc {:.4}  f1 {f1}  → {}", r.name, m.auc, r.dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
