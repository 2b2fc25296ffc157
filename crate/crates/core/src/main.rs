use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use exitrisk::cli::{self, parse_methods, Command, ExperimentConfig, Requested};
use exitrisk::estimators::Method;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CommandArg {
    /// Run the selected methods on one scenario and write risk.csv.
    Estimate,
    /// Evaluate the methods over a list of step sizes and write converge.csv.
    Converge,
    /// Generate random scenarios from a template and write batch.csv and stats.csv.
    Batch,
    /// Monte-Carlo rollouts only.
    Mc,
}

/// Finite-horizon exit-risk estimators and Monte-Carlo oracle.
///
/// Set EXITRISK_THREADS to cap the worker threads.
#[derive(Debug, Parser)]
#[command(name = "exitrisk", version)]
struct Args {
    command: CommandArg,
    /// Scenario file (estimate, converge, mc).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Batch template file (batch).
    #[arg(long)]
    template: Option<PathBuf>,
    /// Comma-separated subset of dt_booles,dt_gauss,ival_gauss,ival_safe,mc.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated partition step sizes in seconds.
    #[arg(long, value_delimiter = ',')]
    dt: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    rollouts: usize,
    /// Euler-Maruyama substeps per control tick.
    #[arg(long, default_value_t = 10)]
    substeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Quadrature points per axis.
    #[arg(long)]
    quad_points: Option<usize>,
    /// Quadrature box half-width in standard deviations.
    #[arg(long)]
    quad_box: Option<f64>,
    /// Number of batch scenarios.
    #[arg(long, default_value_t = 20)]
    count: usize,
}

fn config_from(args: Args) -> exitrisk::Result<ExperimentConfig> {
    let command = match args.command {
        CommandArg::Estimate => Command::Estimate,
        CommandArg::Converge => Command::Converge,
        CommandArg::Batch => Command::Batch,
        CommandArg::Mc => Command::Mc,
    };
    let mut config = ExperimentConfig::new(command, args.out);
    config.methods = match (&args.methods, command) {
        (Some(list), _) => parse_methods(list)?,
        (None, Command::Batch) => Method::ALL.into_iter().map(Requested::Estimator).collect(),
        (None, _) => Requested::all(),
    };
    config.scenario = args.scenario;
    config.template = args.template;
    config.dts = args.dt;
    config.rollouts = args.rollouts;
    config.substeps = args.substeps;
    config.seed = args.seed;
    config.quad_points = args.quad_points;
    config.quad_box = args.quad_box;
    config.count = args.count;
    Ok(config)
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("EXITRISK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| format!("EXITRISK_THREADS must be a positive integer, got '{raw}'"))?;
    if n == 0 {
        return Err("EXITRISK_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = config_from(args).and_then(|c| cli::run(&c));
    match result {
        Ok(artifacts) => {
            for a in artifacts.iter().filter(|a| a.extension().is_some_and(|e| e != "json")) {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
