use std::path::PathBuf;
use std::process::ExitCode;

use adt_cli::commands::{self, EstimateOptions, SimulateOptions};
use adt_cli::config::parse_window;
use adt_cli::{CliError, CliResult};
use adt_core::sim::SimScale;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adt", version, about = "Dose-response curve estimation for universal interventions")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "ADT_THREADS")]
    threads: Option<usize>,
    /// Log progress (-v) or details (-vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the curve with bootstrap intervals.
    Estimate(EstimateArgs),
    /// Placebo estimate on a window of the pre-period (same as `estimate --pretrends`).
    Pretrends(PretrendsArgs),
    /// Run a simulation scenario and write coverage, width and error tables.
    Simulate(SimulateArgs),
    /// Fit the residual variogram and correlation families only.
    Variogram(RunArgs),
    /// Write the synthetic demo dataset and its configuration.
    DemoData {
        #[arg(long, default_value = "adt_demo")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pseudo-treatment window FIRST:LAST inside the pre-period.
    #[arg(long, value_parser = parse_window)]
    pretrends: Option<[u32; 2]>,
}

#[derive(Args)]
struct PretrendsArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_window)]
    window: [u32; 2],
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name: s1, s2, s3 or s4.
    scenario: String,
    /// Desk scale: 100 sites, 48 months, 50 replicates, 60 draws (default).
    #[arg(long, conflicts_with = "full")]
    desk: bool,
    /// Full scale: 356 sites, 96 months, 100 replicates, 100 draws.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    boots: Option<usize>,
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    months: Option<u32>,
    #[arg(long, default_value = "adt_sim")]
    output: PathBuf,
    /// Also run this scenario with the same seed and write a comparison table.
    #[arg(long)]
    compare: Option<String>,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate(a) => {
            let out = commands::cmd_estimate(&EstimateOptions {
                config: a.run.config,
                pretrends: a.pretrends,
                output: a.run.output,
            })?;
            report_estimate(&out);
        }
        Command::Pretrends(a) => {
            let out = commands::cmd_estimate(&EstimateOptions {
                config: a.run.config,
                pretrends: Some(a.window),
                output: a.run.output,
            })?;
            report_estimate(&out);
        }
        Command::Variogram(a) => {
            let (dir, diag) = commands::cmd_variogram(&EstimateOptions {
                config: a.config,
                pretrends: None,
                output: a.output,
            })?;
            for (i, m) in diag.fits.iter().enumerate() {
                println!("{}. {:<12} rmse {:.6}", i + 1, m.correlation.family().name(), m.rmse);
            }
            println!("wrote {}", dir.display());
        }
        Command::Simulate(a) => {
            let mut scale = if a.full { SimScale::FULL } else { SimScale::DESK };
            scale.n_replicates = a.replicates.unwrap_or(scale.n_replicates);
            scale.n_boot = a.boots.unwrap_or(scale.n_boot);
            scale.n_sites = a.sites.unwrap_or(scale.n_sites);
            scale.n_months = a.months.unwrap_or(scale.n_months);
            let results = commands::cmd_simulate(&SimulateOptions {
                scenario: a.scenario,
                scale,
                seed: a.seed,
                output: a.output.clone(),
                compare: a.compare,
            })?;
            for r in &results {
                for t in [&r.spatial, &r.non_spatial] {
                    println!(
                        "{} {:<11} coverage {:.3} (min {:.3})  width {:.3}  mae {:.3}",
                        r.scenario.name,
                        t.method.name(),
                        t.mean_coverage(),
                        t.min_coverage(),
                        t.mean_width(),
                        t.mean_mae()
                    );
                }
            }
            println!("wrote {}", a.output.display());
        }
        Command::DemoData { out } => {
            commands::cmd_demo_data(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn report_estimate(out: &commands::EstimateOutcome) {
    let s = &out.summary;
    println!("average effect {:.4} ({:.2}% of the pre-period mean)", s.average_effect, s.percent_change);
    if let (Some(a), Some(p)) = (s.average_effect_significant_only, s.percent_change_significant_only) {
        println!(
            "significant sites ({}) average {:.4} ({:.2}%)",
            s.n_significant_sites, a, p
        );
    }
    println!("wrote {}", out.dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
