//! Command-line front end for the formation scenario.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fleet_nmpc::scenario::{self, compute_metrics, read_rows, Scenario, ScenarioConfig, ScenarioError};

#[derive(Parser)]
#[command(name = "fleet-nmpc", version, about = "Distributed NMPC formation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Replaces the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the configured duration [s].
    #[arg(long)]
    duration: Option<f64>,
    /// Directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario and write the run log and summaries.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Parse and check a configuration file.
    Validate { config: PathBuf },
    /// Compute the terminal design only.
    Synthesize {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute metrics from a run log; with a configuration, also
    /// re-evaluate the stability monitor.
    Replay {
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(path: &Path, o: Option<&Overrides>) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(o) = o {
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(d) = o.duration {
            cfg.duration = d;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ScenarioError::Io(e.to_string()))?;
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| ScenarioError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), ScenarioError> {
    match cmd {
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            println!("{}: ok ({} agents, {} steps)", config.display(), cfg.agents.len(), cfg.steps());
        }
        Command::Synthesize { config, overrides } => {
            let cfg = load(&config, Some(&overrides))?;
            let (_, summary) = scenario::synthesize_terminal(&cfg)?;
            let path = overrides.out_dir.join("terminal_design.json");
            write_json(&path, &summary)?;
            println!(
                "level {:.6e}, margin {:.3e}, audit {}",
                summary.level,
                summary.margin,
                if summary.audit.passed { "passed" } else { "FAILED" }
            );
            println!("wrote {}", path.display());
        }
        Command::Run { config, overrides } => {
            let cfg = load(&config, Some(&overrides))?;
            let start = Instant::now();
            let out = Scenario::prepare(cfg)?.run()?;
            scenario::emit(&out, &overrides.out_dir)?;
            let m = &out.metrics;
            println!("simulated {:.1} s in {:.1} s wall clock", m.final_time, start.elapsed().as_secs_f64());
            if let Some(d) = m.min_pairwise_distance {
                println!("min pairwise distance {d:.3} m");
            }
            println!("final formation error {:?}", m.final_formation_error);
            if let Some(r) = m.sgc_rate_after_transient {
                println!("small-gain condition after transient: {:.2}%", 100.0 * r);
            }
            if let Some(r) = m.residual_rate_final_window {
                println!("ISpS residual <= 0 in final window: {:.2}%", 100.0 * r);
            }
            println!("wrote artifacts to {}", overrides.out_dir.display());
        }
        Command::Replay { log, config } => {
            let rows = read_rows(&log)?;
            let cfg = config.as_deref().map(|p| load(p, None)).transpose()?;
            let mc = cfg.as_ref().map(|c| c.metrics.clone()).unwrap_or_default();
            let metrics = compute_metrics(&rows, &mc);
            println!("{}", serde_json::to_string_pretty(&metrics).map_err(|e| ScenarioError::Io(e.to_string()))?);
            if let Some(cfg) = cfg {
                let mismatches = Scenario::prepare(cfg)?.replay_monitor(&rows)?;
                println!("monitor recomputation: {mismatches} mismatching rows");
                if mismatches > 0 {
                    return Err(ScenarioError::Runtime("logged monitor values do not reproduce".into()));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
