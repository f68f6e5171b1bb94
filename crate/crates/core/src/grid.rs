//! Experiment orchestration: single cells, method × scale × seed grids,
//! reachability sweeps, and the files they leave behind.
//!
//! Output layout of a grid run:
//!
//! ```text
//! <out>/<method>_n<N>_s<seed>/rounds.csv     one row per round
//! <out>/<method>_n<N>_s<seed>/summary.json   totals, tier breakdown, evaluation
//! <out>/runs.csv                             one row per cell
//! <out>/summary.csv                          mean and sample std over seeds
//! <out>/failures.json                        cells that did not complete
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{self, MethodKind, RunOutput};
use crate::metrics::{self, DetectionResult};
use crate::topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub method: MethodKind,
    pub n_sensors: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_n{}_s{}", self.method, self.n_sensors, self.seed)
    }

    /// `cfg` specialised to this cell.
    pub fn config(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.method.kind = self.method;
        c.deployment.n_sensors = self.n_sensors;
        c.seeds = vec![self.seed];
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_s2f: f64,
    pub e_f2f: f64,
    pub e_f2g: f64,
    pub e_rx: f64,
    pub e_comp: f64,
    /// Sum of the three uplink tiers over all rounds.
    pub e_round: f64,
    /// `e_round` plus receive and computation energy.
    pub e_total: f64,
    pub e_round_per_sensor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: MethodKind,
    pub n_sensors: usize,
    pub n_fogs: usize,
    pub seed: u64,
    pub rounds: usize,
    pub d_params: usize,
    pub sensor_payload_bits: u64,
    pub effective_compression_ratio: f64,
    pub energy: EnergyBreakdown,
    pub participation_mean: f64,
    pub latency_mean_s: f64,
    pub latency_total_s: f64,
    pub battery_min_final: f64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub objective: f64,
    pub threshold: f64,
    pub percentile: f64,
    pub detection: DetectionResult,
}

impl RunSummary {
    pub fn from_output(cfg: &ExperimentConfig, out: &RunOutput) -> Self {
        let r = &out.reports;
        let sum = |f: fn(&metrics::RoundReport) -> f64| r.iter().map(f).sum::<f64>();
        let e_round = sum(|x| x.e_round);
        let energy = EnergyBreakdown {
            e_s2f: sum(|x| x.e_s2f),
            e_f2f: sum(|x| x.e_f2f),
            e_f2g: sum(|x| x.e_f2g),
            e_rx: sum(|x| x.e_rx),
            e_comp: sum(|x| x.e_comp),
            e_round,
            e_total: sum(|x| x.e_total),
            e_round_per_sensor: e_round / out.n_sensors.max(1) as f64,
        };
        let mean = |v: f64| if r.is_empty() { 0.0 } else { v / r.len() as f64 };
        let energies: Vec<f64> = r.iter().map(|x| x.e_round).collect();
        let latencies: Vec<f64> = r.iter().map(|x| x.latency_s).collect();
        let final_loss = out.evaluation.final_train_loss;
        Self {
            method: out.method,
            n_sensors: out.n_sensors,
            n_fogs: out.n_fogs,
            seed: out.seed,
            rounds: r.len(),
            d_params: out.d_params,
            sensor_payload_bits: cfg.compression.sensor_payload_bits(out.d_params),
            effective_compression_ratio: cfg.compression.effective_ratio(out.d_params),
            energy,
            participation_mean: mean(sum(|x| x.participation)),
            latency_mean_s: mean(sum(|x| x.latency_s)),
            latency_total_s: sum(|x| x.latency_s),
            battery_min_final: r.last().map_or(cfg.energy.e_init, |x| x.battery_min),
            initial_train_loss: out.initial_train_loss,
            final_train_loss: final_loss,
            objective: metrics::objective_value(final_loss, &energies, &latencies, cfg.lambda_e, cfg.lambda_tau),
            threshold: out.evaluation.threshold,
            percentile: out.evaluation.percentile,
            detection: out.evaluation.detection,
        }
    }
}

/// Writes `rounds.csv`, `summary.json` and the final model into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    let file = fs::File::create(dir.join("rounds.csv"))?;
    metrics::write_reports_csv(std::io::BufWriter::new(file), &out.reports)?;
    let summary = RunSummary::from_output(cfg, out);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    out.model.save(&dir.join("model.bin"))?;
    Ok(summary)
}

/// Runs one cell and writes its files under `out_dir`.
pub fn run_cell(cfg: &ExperimentConfig, cell: Cell, out_dir: &Path) -> Result<RunSummary> {
    let c = cell.config(cfg);
    let out = federation::run_experiment(&c, cell.seed)?;
    write_run(&out_dir.join(cell.dir_name()), &c, &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: Cell,
    pub dir: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct GridResult {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<Failure>,
}

pub fn grid_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let scales = match &cfg.benchmark {
        Some(spec) => vec![spec.entity_names()?.len()],
        None => cfg.grid.n_sensors.clone(),
    };
    let mut cells = Vec::new();
    for &method in &cfg.grid.methods {
        for &n_sensors in &scales {
            for &seed in &cfg.seeds {
                cells.push(Cell { method, n_sensors, seed });
            }
        }
    }
    Ok(cells)
}

/// Runs every cell on at most `jobs` threads and writes the grid-level
/// tables. Outputs do not depend on `jobs`.
pub fn run_grid(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<GridResult> {
    cfg.validate()?;
    let cells = grid_cells(cfg)?;
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let results: Vec<(Cell, Result<RunSummary>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| (cell, run_cell(cfg, cell, out_dir)))
            .collect()
    });
    let mut grid = GridResult::default();
    for (cell, r) in results {
        match r {
            Ok(s) => grid.summaries.push(s),
            Err(e) => grid.failures.push(Failure {
                cell,
                dir: cell.dir_name(),
                error: e.to_string(),
            }),
        }
    }
    write_runs_csv(&out_dir.join("runs.csv"), &grid.summaries)?;
    write_summary_csv(&out_dir.join("summary.csv"), &summarize(&grid.summaries))?;
    fs::write(
        out_dir.join("failures.json"),
        serde_json::to_string_pretty(&grid.failures)? + "\n",
    )?;
    Ok(grid)
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: MethodKind,
    pub n_sensors: usize,
    pub seed: u64,
    pub n_fogs: usize,
    pub participation: f64,
    pub f1: f64,
    pub pa_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub e_s2f: f64,
    pub e_f2f: f64,
    pub e_f2g: f64,
    pub e_rx: f64,
    pub e_comp: f64,
    pub e_round: f64,
    pub e_total: f64,
    pub e_round_per_sensor: f64,
    pub latency_mean_s: f64,
    pub final_train_loss: f64,
}

/// Numeric columns of [`RunRow`] aggregated in `summary.csv`.
pub const SUMMARY_METRICS: [&str; 16] = [
    "participation",
    "f1",
    "pa_f1",
    "precision",
    "recall",
    "threshold",
    "e_s2f",
    "e_f2f",
    "e_f2g",
    "e_rx",
    "e_comp",
    "e_round",
    "e_total",
    "e_round_per_sensor",
    "latency_mean_s",
    "final_train_loss",
];

impl RunRow {
    pub fn from_summary(s: &RunSummary) -> Self {
        Self {
            method: s.method,
            n_sensors: s.n_sensors,
            seed: s.seed,
            n_fogs: s.n_fogs,
            participation: s.participation_mean,
            f1: s.detection.f1,
            pa_f1: s.detection.pa_f1,
            precision: s.detection.precision,
            recall: s.detection.recall,
            threshold: s.threshold,
            e_s2f: s.energy.e_s2f,
            e_f2f: s.energy.e_f2f,
            e_f2g: s.energy.e_f2g,
            e_rx: s.energy.e_rx,
            e_comp: s.energy.e_comp,
            e_round: s.energy.e_round,
            e_total: s.energy.e_total,
            e_round_per_sensor: s.energy.e_round_per_sensor,
            latency_mean_s: s.latency_mean_s,
            final_train_loss: s.final_train_loss,
        }
    }

    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "participation" => self.participation,
            "f1" => self.f1,
            "pa_f1" => self.pa_f1,
            "precision" => self.precision,
            "recall" => self.recall,
            "threshold" => self.threshold,
            "e_s2f" => self.e_s2f,
            "e_f2f" => self.e_f2f,
            "e_f2g" => self.e_f2g,
            "e_rx" => self.e_rx,
            "e_comp" => self.e_comp,
            "e_round" => self.e_round,
            "e_total" => self.e_total,
            "e_round_per_sensor" => self.e_round_per_sensor,
            "latency_mean_s" => self.latency_mean_s,
            "final_train_loss" => self.final_train_loss,
            other => panic!("unknown metric {other}"),
        }
    }
}

pub fn write_runs_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        w.serialize(RunRow::from_summary(s))?;
    }
    if summaries.is_empty() {
        w.write_record(runs_header())?;
    }
    w.flush()?;
    Ok(())
}

fn runs_header() -> Vec<&'static str> {
    let mut h = vec!["method", "n_sensors", "seed", "n_fogs"];
    h.extend(SUMMARY_METRICS);
    h
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation (zero for one seed) per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: MethodKind,
    pub n_sensors: usize,
    pub n_seeds: usize,
    pub stats: Vec<(f64, f64)>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(summaries: &[RunSummary]) -> Vec<SummaryRow> {
    let rows: Vec<RunRow> = summaries.iter().map(RunRow::from_summary).collect();
    let mut keys: Vec<(MethodKind, usize)> = rows.iter().map(|r| (r.method, r.n_sensors)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(method, n_sensors)| {
            let group: Vec<&RunRow> = rows
                .iter()
                .filter(|r| r.method == method && r.n_sensors == n_sensors)
                .collect();
            let stats = SUMMARY_METRICS
                .iter()
                .map(|m| mean_std(&group.iter().map(|r| r.metric(m)).collect::<Vec<_>>()))
                .collect();
            SummaryRow {
                method,
                n_sensors,
                n_seeds: group.len(),
                stats,
            }
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "n_sensors".into(), "n_seeds".into()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.to_string(), r.n_sensors.to_string(), r.n_seeds.to_string()];
        for (m, s) in &r.stats {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reachability of one deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachRow {
    pub n_sensors: usize,
    pub n_fogs: usize,
    pub seed: u64,
    pub direct: f64,
    pub fog: f64,
    pub fog_path: f64,
}

/// Topology-only Monte Carlo over scales and seeds.
pub fn reach_sweep(cfg: &ExperimentConfig, scales: &[usize], seeds: &[u64]) -> Result<Vec<ReachRow>> {
    let mut jobs = Vec::new();
    for &n in scales {
        for &s in seeds {
            jobs.push((n, s));
        }
    }
    jobs.par_iter()
        .map(|&(n, seed)| {
            let mut d = cfg.deployment.clone();
            d.n_sensors = n;
            d.seed = seed;
            let topo = topology::deploy(&d)?;
            let g = topology::build_graph(&topo, &cfg.acoustic)?;
            Ok(ReachRow {
                n_sensors: n,
                n_fogs: topo.n_fogs(),
                seed,
                direct: topology::direct_reachability(&g),
                fog: topology::fog_reachability(&g),
                fog_path: topology::fog_path_reachability(&g),
            })
        })
        .collect()
}

pub fn write_reach_csv(path: &Path, rows: &[ReachRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Output directory: explicit value, then the config, then `UWHFL_OUT`,
/// then `./results`.
pub fn resolve_output_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("UWHFL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}
