use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mdcsim::pipeline::{self, RunConfig};
use mdcsim::ScenarioTag;

/// Mobility-driven micro data center placement and power simulator.
#[derive(Debug, Parser)]
#[command(name = "mdcsim", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts the run to these scenario tags (repeatable or comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    scenario: Vec<ScenarioTag>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write map.json from the configured map file or synthetic parameters.
    GenMap,
    /// Generate the pedestrian trace and print its hash.
    GenTrace,
    /// Build the presence grid and one placement per scenario.
    Place,
    /// Run the workload simulation for every scenario.
    Simulate,
    /// Aggregate raw results into CSV, SVG and summary.json.
    Report,
    /// Run all stages in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("missing required flag --config <FILE>")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if !cli.scenario.is_empty() {
        cfg.scenarios = cli.scenario.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &mdcsim::SimulationReport, cfg: &RunConfig) {
    for (tag, s) in &report.summary().scenarios {
        let power = s.mean_power_w.map_or("n/a".to_string(), |w| format!("{w:.1}"));
        let util = s.warm_utilization_mean.map_or("n/a".to_string(), |u| format!("{u:.4}"));
        println!("{tag}: mean_power_w={power} rejections={} utilization={util}", s.rejections_total);
    }
    println!("report: {}", cfg.report_dir().display());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenMap => {
            pipeline::gen_map(&cfg)?;
            println!("{}", cfg.map_path().display());
        }
        Command::GenTrace => {
            let hash = pipeline::gen_trace(&cfg)?;
            println!("{hash}");
        }
        Command::Place => {
            for p in pipeline::place(&cfg)? {
                println!("{}", cfg.placement_path(p.scenario_tag).display());
            }
        }
        Command::Simulate => {
            for (tag, _) in pipeline::simulate(&cfg)? {
                println!("{}", cfg.raw_dir(tag).display());
            }
        }
        Command::Report => {
            let report = pipeline::report(&cfg)?;
            print_summary(&report, &cfg);
        }
        Command::Pipeline => {
            let report = pipeline::run_all(&cfg)?;
            print_summary(&report, &cfg);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MDCSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
