use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use uwhfl::config::{parse_config, ExperimentConfig, Overrides};
use uwhfl::federation::MethodKind;
use uwhfl::grid::{self, Cell};
use uwhfl::topology;

#[derive(Parser)]
#[command(name = "uwhfl", version, about = "Hierarchical federated anomaly detection over underwater acoustic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method at one scale for one seed.
    Run(Common),
    /// Run every method × scale × seed cell of the grid.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Reachability-only Monte Carlo over deployment scales.
    Reach {
        #[command(flatten)]
        common: Common,
        /// Sensor counts to sweep; defaults to the grid scales.
        #[arg(long, value_delimiter = ',')]
        scales: Vec<usize>,
        /// Number of seeds per scale, starting at 0; defaults to the config seeds.
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Write the deployment of one seed as JSON.
    DumpTopology(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    n_sensors: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    rho_s: Option<f64>,
    /// Output directory; falls back to the config, then $UWHFL_OUT, then ./results.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        Overrides {
            seed: self.seed,
            method: self.method,
            n_sensors: self.n_sensors,
            rounds: self.rounds,
            rho_s: self.rho_s,
            output_dir: self.out.clone(),
        }
        .apply(&mut cfg)?;
        let out = grid::resolve_output_dir(None, &cfg);
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = common.load()?;
            let n_sensors = match &cfg.benchmark {
                Some(spec) => spec.entity_names()?.len(),
                None => cfg.deployment.n_sensors,
            };
            let cell = Cell {
                method: cfg.method.kind,
                n_sensors,
                seed: cfg.seeds[0],
            };
            let s = grid::run_cell(&cfg, cell, &out)?;
            println!(
                "{}: participation {:.4}  F1 {:.4}  PA-F1 {:.4}  E_round {:.4} J  -> {}",
                cell.dir_name(),
                s.participation_mean,
                s.detection.f1,
                s.detection.pa_f1,
                s.energy.e_round,
                out.join(cell.dir_name()).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid { common, jobs } => {
            let (cfg, out) = common.load()?;
            let result = grid::run_grid(&cfg, &out, jobs)?;
            for row in grid::summarize(&result.summaries) {
                let stat = |name: &str| row.stats[grid::SUMMARY_METRICS.iter().position(|m| *m == name).unwrap()];
                let (f1, f1_sd) = stat("f1");
                let (e, e_sd) = stat("e_round");
                println!(
                    "{:<14} N={:<4} seeds={}  F1 {:.4}±{:.4}  E_round {:.4}±{:.4} J",
                    row.method.to_string(),
                    row.n_sensors,
                    row.n_seeds,
                    f1,
                    f1_sd,
                    e,
                    e_sd
                );
            }
            for f in &result.failures {
                eprintln!("failed {}: {}", f.dir, f.error);
            }
            println!("results in {}", out.display());
            Ok(if result.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Reach { common, scales, trials } => {
            let (cfg, out) = common.load()?;
            let scales = if scales.is_empty() { cfg.grid.n_sensors.clone() } else { scales };
            let seeds: Vec<u64> = match trials {
                Some(t) => (0..t).collect(),
                None => cfg.seeds.clone(),
            };
            let rows = grid::reach_sweep(&cfg, &scales, &seeds)?;
            std::fs::create_dir_all(&out)?;
            grid::write_reach_csv(&out.join("reach.csv"), &rows)?;
            println!("{:>6} {:>8} {:>8} {:>8}", "N", "direct", "fog", "fog-path");
            for &n in &scales {
                let group: Vec<_> = rows.iter().filter(|r| r.n_sensors == n).collect();
                let mean = |f: fn(&grid::ReachRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64;
                println!(
                    "{:>6} {:>8.4} {:>8.4} {:>8.4}",
                    n,
                    mean(|r| r.direct),
                    mean(|r| r.fog),
                    mean(|r| r.fog_path)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpTopology(common) => {
            let (cfg, out) = common.load()?;
            let mut d = cfg.deployment.clone();
            d.seed = cfg.seeds[0];
            let topo = topology::deploy(&d)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("topology_n{}_s{}.json", d.n_sensors, d.seed));
            topo.save(&path).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
