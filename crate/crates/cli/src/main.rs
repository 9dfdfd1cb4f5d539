//! Command-line front end for the sidelink simulator: single runs, sweep
//! campaigns, analytic oracles and report merging. Bad invocations and
//! configurations exit with 2, failures during the work itself with 1.

mod campaign;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sidelink_core::analytic::{breakout_sweep, min_counter_mean, sweep_csv, BreakoutModel};
use sidelink_core::oneshot::Scheme;
use sidelink_core::{run, SimConfig};
use thiserror::Error;

use campaign::{
    atomic_write, parse_densities, parse_schemes, parse_seeds, run_sweep, write_single_run,
};
use config::FileConfig;
use report::{comparison_csv, load_reports};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration.
    #[error("{0}")]
    Usage(String),
    /// Failure while doing the work.
    #[error("{0}")]
    Runtime(String),
}

#[derive(Parser)]
#[command(
    name = "sidelink",
    version,
    about = "Slot-level sidelink resource-allocation simulator and analytics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation; writes summary.csv, pir.csv, prr.csv,
    /// collisions.csv and report.json into --out.
    Simulate(SimulateArgs),
    /// Run a campaign over schemes x densities x seeds; writes one report
    /// file per run plus merged summary and comparison tables.
    Sweep(SweepArgs),
    /// Closed-form and Monte Carlo oracles, no slot-level simulation.
    #[command(subcommand)]
    Analytic(AnalyticCommand),
    /// Merge per-run .json reports into a comparison table keyed by
    /// scheme and density.
    Report(ReportArgs),
}

/// Overrides shared by the simulating subcommands. Precedence: compiled
/// defaults, then the config file, then these flags.
#[derive(Args)]
struct CommonOverrides {
    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Simulated time in seconds.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
    /// Leading interval excluded from metrics, in seconds.
    #[arg(long, value_name = "S")]
    warmup: Option<f64>,
    /// Keep probability at counter expiry, within [0, 0.8].
    #[arg(long = "p-keep", value_name = "P")]
    p_keep: Option<f64>,
    /// Ring road circumference in meters.
    #[arg(long, value_name = "M")]
    road_length: Option<f64>,
    /// Toggle the inter-transmission-time controller.
    #[arg(long, value_name = "BOOL")]
    congestion: Option<bool>,
    /// Allow energy-only busy verdicts when probing occupancy.
    #[arg(long, value_name = "BOOL")]
    rssi_detection: Option<bool>,
}

impl CommonOverrides {
    fn resolve(&self) -> Result<SimConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => SimConfig::default(),
        };
        if let Some(v) = self.duration {
            cfg.duration_s = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_s = v;
        }
        if let Some(v) = self.p_keep {
            cfg.p_keep = v;
        }
        if let Some(v) = self.road_length {
            cfg.scenario.road_length_m = v;
        }
        if let Some(v) = self.congestion {
            cfg.congestion_enabled = v;
        }
        if let Some(v) = self.rssi_detection {
            cfg.rssi_detection_enabled = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// sps_only, one_shot or proposed.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Vehicles per kilometer.
    #[arg(long, value_name = "VEH_PER_KM")]
    density: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Comma list of scheme names.
    #[arg(long, default_value = "sps,oneshot,proposed")]
    schemes: String,
    /// Comma list of densities in vehicles per kilometer.
    #[arg(long)]
    densities: String,
    /// Seeds: N, N..M (inclusive) or a comma list.
    #[arg(long)]
    seeds: String,
    /// Output directory for run files and merged tables.
    #[arg(long, default_value = "runs", value_name = "DIR")]
    out: PathBuf,
    /// Worker threads; 0 picks automatically. Overrides SIDELINK_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum AnalyticCommand {
    /// Mean time until a persistent two-vehicle collision breaks, swept
    /// over keep probabilities; writes a CSV table.
    Fig1(Fig1Args),
    /// Exact mean of the smaller of two uniform integer counters; prints
    /// the value.
    Minrun(MinrunArgs),
}

#[derive(Args)]
struct Fig1Args {
    /// Comma list of keep probabilities.
    #[arg(long = "p-keeps", default_value = "0,0.2,0.4,0.6,0.8")]
    p_keeps: String,
    /// Monte Carlo trials per point.
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Reselection counter lower bound.
    #[arg(long, default_value_t = 5)]
    counter_lo: u32,
    /// Reselection counter upper bound.
    #[arg(long, default_value_t = 15)]
    counter_hi: u32,
    /// Reservation period in milliseconds.
    #[arg(long, default_value_t = 100)]
    period_ms: u32,
    #[arg(long, default_value = "fig1.csv", value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct MinrunArgs {
    /// Counter bounds, low then high.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    range: Vec<u32>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding per-run .json reports.
    #[arg(long, value_name = "DIR")]
    runs: PathBuf,
    /// Merged table destination; defaults to comparison.csv inside --runs.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse()
}

fn worker_count(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var("SIDELINK_WORKERS") {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::Usage(format!("SIDELINK_WORKERS must be a number, got '{v}'"))
        }),
        Err(_) => Ok(0),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(s) = args.scheme {
        cfg.scheme = s;
    }
    if let Some(d) = args.density {
        cfg.scenario.density_veh_per_km = d;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = run(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    for path in write_single_run(&report, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = args.common.resolve()?;
    let schemes = parse_schemes(&args.schemes)?;
    let densities = parse_densities(&args.densities)?;
    let seeds = parse_seeds(&args.seeds)?;
    let workers = worker_count(args.workers)?;
    let reports = run_sweep(&base, &schemes, &densities, &seeds, &args.out, workers)?;
    println!(
        "{} runs -> {} (summary.csv, comparison.csv, one .json per run)",
        reports.len(),
        args.out.display()
    );
    Ok(())
}

fn analytic_fig1(args: Fig1Args) -> Result<(), CliError> {
    let p_keeps: Vec<f64> = args
        .p_keeps
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid keep-probability list '{}'", args.p_keeps)))
        })
        .collect::<Result<_, _>>()?;
    let model = BreakoutModel {
        p_keep: 0.0,
        counter_lo: args.counter_lo,
        counter_hi: args.counter_hi,
        period_ms: args.period_ms,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let rows = breakout_sweep(&p_keeps, &model, args.trials, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    atomic_write(&args.out, &sweep_csv(&rows))?;
    println!("wrote {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}

fn analytic_minrun(args: MinrunArgs) -> Result<(), CliError> {
    let [lo, hi]: [u32; 2] = args
        .range
        .clone()
        .try_into()
        .map_err(|_| CliError::Usage("--range needs exactly two values".into()))?;
    if lo > hi {
        return Err(CliError::Usage(format!(
            "counter range reversed: {lo} > {hi}"
        )));
    }
    println!("{}", min_counter_mean(lo, hi));
    Ok(())
}

fn merge_reports(args: ReportArgs) -> Result<(), CliError> {
    let reports = load_reports(&args.runs)?;
    let out = args.out.unwrap_or_else(|| args.runs.join("comparison.csv"));
    atomic_write(&out, &comparison_csv(&reports))?;
    println!("merged {} runs into {}", reports.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => sweep(args),
        Command::Analytic(AnalyticCommand::Fig1(args)) => analytic_fig1(args),
        Command::Analytic(AnalyticCommand::Minrun(args)) => analytic_minrun(args),
        Command::Report(args) => merge_reports(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        });
    }
}
