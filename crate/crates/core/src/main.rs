use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use travnav::io::load_model;
use travnav::runner::{
    cmd_collect, cmd_eval, cmd_train, cmd_worldgen, run_navigate, Planner, RunReport,
    ScenarioConfig,
};
use travnav::world::WorldSpec;
use travnav::{Error, Result};

/// Self-supervised traversability navigation sandbox.
#[derive(Parser)]
#[command(name = "travnav", version, about)]
struct Cli {
    /// Scenario (or world, for worldgen) configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Model file (trained parameters).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the scripted teleop policy and persist a training dataset.
    Collect,
    /// Train a model on a collected dataset.
    Train {
        /// Dataset directory (defaults to <out>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the closed navigation loop with a trained model.
    Navigate,
    /// Evaluate model(s) on a held-out dataset.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Build a world from a spec and persist truth maps.
    Worldgen,
}

fn load_scenario(cli: &Cli) -> Result<ScenarioConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Collect => {
            let cfg = load_scenario(cli)?;
            let result = cmd_collect(&cfg, cfg.seed, &cli.out)?;
            if !cli.quiet {
                println!(
                    "collected {} tuples ({} anchors skipped) -> {}",
                    result.tuples.len(),
                    result.skipped,
                    cli.out.display()
                );
            }
            Ok(true)
        }
        Command::Train { dataset } => {
            let cfg = load_scenario(cli)?;
            let dataset = dataset.clone().unwrap_or_else(|| cli.out.join("dataset"));
            let outcome = cmd_train(&cfg, &dataset, cfg.seed, &cli.out)?;
            if !cli.quiet {
                println!(
                    "trained {} epochs, final train loss {:.6} -> {}",
                    outcome.curve.len(),
                    outcome.final_train_loss,
                    cli.out.display()
                );
            }
            Ok(outcome.final_train_loss.is_finite())
        }
        Command::Navigate => {
            let cfg = load_scenario(cli)?;
            let model_path = cli
                .model
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("navigate needs --model".into()))?;
            let net = load_model(model_path)?;
            let planner = Planner::Model(Box::new(net));
            let report: RunReport = run_navigate(&cfg, &planner, cfg.seed, Some(&cli.out))?;
            if !cli.quiet {
                println!(
                    "{}: {} ticks, path {:.2} m, min traction crossed {:.3} ({})",
                    if report.success { "success" } else { "failure" },
                    report.ticks_used,
                    report.path_length,
                    report.min_traversability_crossed,
                    report.reason
                );
            }
            Ok(report.success)
        }
        Command::Eval { dataset } => {
            let cfg = load_scenario(cli)?;
            let model_path = cli
                .model
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("eval needs --model".into()))?;
            let net = load_model(model_path)?;
            let dataset = dataset.clone().unwrap_or_else(|| cli.out.join("dataset"));
            let rows = cmd_eval(&[("model".to_string(), net)], &dataset, cfg.seed, &cli.out)?;
            if !cli.quiet {
                for (name, err) in &rows {
                    println!("{name}: mean abs error {err:.6}");
                }
            }
            Ok(true)
        }
        Command::Worldgen => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
            let text = std::fs::read_to_string(path)?;
            // accept either a bare world spec or a full scenario
            let spec: WorldSpec = match serde_json::from_str::<WorldSpec>(&text) {
                Ok(s) => s,
                Err(_) => serde_json::from_str::<ScenarioConfig>(&text)
                    .map_err(Error::from)?
                    .world,
            };
            let seed = cli.seed.unwrap_or(spec.seed);
            let world = cmd_worldgen(&spec, seed, &cli.out)?;
            if !cli.quiet {
                println!("world {}x{} cells -> {}", world.nx(), world.ny(), cli.out.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
