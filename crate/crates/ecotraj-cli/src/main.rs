use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ecotraj::sim;
use ecotraj_cli::{
    fit_command, matrix_command, parse_scenario, parse_trajectory_csv, plotdata_command,
    run_command, FitSource, RunSelection,
};

#[derive(Parser)]
#[command(name = "eco-traj", about = "Fuel-aware trajectory optimization experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the polynomial fuel model from an engine map
    Fit {
        /// Efficiency grid CSV (header `omega_rad_s`, rows `torque_nm,...`)
        #[arg(long)]
        map: Option<PathBuf>,
        /// Torque limit curve CSV (`omega_rad_s,max_torque_nm`)
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Vehicle parameters TOML
        #[arg(long)]
        params: Option<PathBuf>,
        /// Emit the published coefficients for `truck` or `sedan`
        #[arg(long, conflicts_with_all = ["map", "curve", "params", "synthetic"])]
        preset: Option<String>,
        /// Fit against the bundled synthetic truck map
        #[arg(long, conflicts_with_all = ["map", "curve", "params"])]
        synthetic: bool,
        /// Output JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a single episode from a scenario file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        #[arg(long)]
        road: String,
        #[arg(long)]
        cycle: String,
        /// Output directory for trajectory CSVs and metrics JSON
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full experiment matrix from a scenario file
    Matrix {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to the scenario's output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge trajectory logs into plot-ready CSV series
    Plotdata {
        /// Leading-agent trajectory CSV
        #[arg(long)]
        lead: PathBuf,
        /// Ego logs as LABEL=path, repeatable
        #[arg(long = "log", value_name = "LABEL=PATH")]
        logs: Vec<String>,
        /// Road profile name for the elevation series
        #[arg(long)]
        road: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_workers() {
    if let Ok(value) = std::env::var("ECO_TRAJ_WORKERS") {
        if let Ok(n) = value.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn read_scenario(path: &Path) -> Result<(ecotraj_cli::ScenarioConfig, PathBuf)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let config = parse_scenario(&text)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((config, base))
}

fn main() -> Result<()> {
    configure_workers();
    let cli = Cli::parse();
    match cli.command {
        Command::Fit {
            map,
            curve,
            params,
            preset,
            synthetic,
            out,
        } => {
            let source = if let Some(name) = preset {
                FitSource::Preset(name)
            } else if synthetic {
                FitSource::Synthetic
            } else {
                match (map, curve, params) {
                    (Some(map), Some(curve), Some(params)) => {
                        FitSource::Files { map, curve, params }
                    }
                    _ => bail!("fit needs --preset, --synthetic, or --map/--curve/--params"),
                }
            };
            let fit = fit_command(source)?;
            fs::write(&out, serde_json::to_string_pretty(&fit)?)
                .with_context(|| format!("cannot write {}", out.display()))?;
            if let Some(report) = &fit.report {
                println!(
                    "fit: {} samples, mean abs error {:.4} ml/s",
                    report.sample_count, report.mean_abs_error
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Run {
            config,
            method,
            horizon,
            road,
            cycle,
            out,
        } => {
            let (scenario, base) = read_scenario(&config)?;
            let selection = RunSelection {
                method,
                horizon_s: horizon,
                road,
                cycle,
            };
            let outcome = run_command(&scenario, &base, &selection)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("trajectory.csv"), sim::trajectory_csv(&outcome.log))?;
            fs::write(
                out.join("lead_trajectory.csv"),
                sim::trajectory_csv(&outcome.lead_log),
            )?;
            fs::write(
                out.join("metrics.json"),
                serde_json::to_string_pretty(&outcome.ego)?,
            )?;
            println!(
                "{}: {:.2} ml over {:.1} m ({:.4} L/100km), completed: {}",
                outcome.label,
                outcome.ego.fuel_consumption,
                outcome.ego.travel_distance,
                outcome.ego.fuel_efficiency,
                outcome.ego.completed,
            );
            if !outcome.ego.completed {
                bail!("episode incomplete at step {:?}", outcome.failure_step);
            }
            Ok(())
        }
        Command::Matrix { config, out } => {
            let (scenario, base) = read_scenario(&config)?;
            let out_dir = out
                .or_else(|| scenario.output_dir.as_ref().map(PathBuf::from))
                .context("no output directory: pass --out or set output_dir")?;
            let artifacts = matrix_command(&scenario, &base, &out_dir)?;
            for row in &artifacts.report.aggregates {
                println!(
                    "{:>16}: {:9.2} ml, {:8.4} L/100km, improvement {:6.2}%",
                    row.agent,
                    row.fuel_consumption,
                    row.fuel_efficiency,
                    row.efficiency_improvement_vs_leading,
                );
            }
            if !artifacts.all_passed {
                bail!("matrix finished with incomplete episodes or constraint violations");
            }
            Ok(())
        }
        Command::Plotdata { lead, logs, road, out } => {
            let lead_rows = parse_trajectory_csv(&fs::read_to_string(&lead)?)?;
            let mut methods = Vec::new();
            for entry in &logs {
                let (label, path) = entry
                    .split_once('=')
                    .with_context(|| format!("expected LABEL=PATH, got {entry:?}"))?;
                let rows = parse_trajectory_csv(&fs::read_to_string(path)?)?;
                methods.push((label.to_string(), rows));
            }
            let csv = plotdata_command(&road, &lead_rows, &methods)?;
            fs::write(&out, csv)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
