//! Association, fog cooperation, aggregation and the per-round training
//! loop for the hierarchical methods, flat FedAvg/FedProx and the
//! centralised reference.
//!
//! The fog tier of a round is the set of fogs with a feasible uplink to the
//! gateway. Sensors associate with their nearest feasible tier fog; every
//! tier fog forwards a model each round, an empty cluster forwarding the
//! current global model with zero aggregation weight.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoenc::{self, ModelParams, SgdConfig};
use crate::channel::{self, AcousticParams, LinkBudget};
use crate::compression::{CompressedUpdate, ErrorBuffer};
use crate::config::ExperimentConfig;
use crate::data::{self, LocalDataset, Matrix};
use crate::error::{Error, Result};
use crate::metrics::{self, BatteryState, DetectionResult, RoundReport};
use crate::seeds;
use crate::topology::{self, FeasibilityGraph, FogDrift, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Centralised,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "hfl-nocoop")]
    HflNoCoop,
    HflSelective,
    HflNearest,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Centralised,
        MethodKind::FedAvg,
        MethodKind::FedProx,
        MethodKind::HflNoCoop,
        MethodKind::HflSelective,
        MethodKind::HflNearest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Centralised => "centralised",
            MethodKind::FedAvg => "fedavg",
            MethodKind::FedProx => "fedprox",
            MethodKind::HflNoCoop => "hfl-nocoop",
            MethodKind::HflSelective => "hfl-selective",
            MethodKind::HflNearest => "hfl-nearest",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(
            self,
            MethodKind::HflNoCoop | MethodKind::HflSelective | MethodKind::HflNearest
        )
    }

    pub fn is_flat(self) -> bool {
        matches!(self, MethodKind::FedAvg | MethodKind::FedProx)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = MethodKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Proximal coefficient used by FedProx only.
    pub prox_mu: f64,
    /// `(self, neighbours)` mixing weights.
    pub nearest_weights: [f64; 2],
    pub selective_weights: [f64; 2],
    /// Neighbour distance cut as a quantile of feasible fog-fog distances.
    pub selective_distance_quantile: f64,
    /// A cluster is small when `c_m <= max(small_cluster_floor, factor·c̄)`.
    pub small_cluster_factor: f64,
    pub small_cluster_floor: f64,
    /// Neighbours per cooperating fog.
    pub max_neighbours: usize,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            kind: MethodKind::HflSelective,
            prox_mu: 0.01,
            nearest_weights: [0.7, 0.3],
            selective_weights: [0.8, 0.2],
            selective_distance_quantile: 0.25,
            small_cluster_factor: 0.75,
            small_cluster_floor: 2.0,
            max_neighbours: 1,
        }
    }
}

impl MethodSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("nearest_weights", self.nearest_weights), ("selective_weights", self.selective_weights)] {
            if w.iter().any(|&x| !(x >= 0.0)) || ((w[0] + w[1]) - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "method.{name} must be non-negative and sum to 1, got {w:?}"
                )));
            }
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::config("method.prox_mu must be non-negative"));
        }
        if !(self.selective_distance_quantile > 0.0 && self.selective_distance_quantile <= 1.0) {
            return Err(Error::config("method.selective_distance_quantile must lie in (0, 1]"));
        }
        if !(self.small_cluster_factor >= 0.0 && self.small_cluster_floor >= 0.0) {
            return Err(Error::config("method small-cluster parameters must be non-negative"));
        }
        Ok(())
    }

    /// Local optimiser settings for this method.
    pub fn local_sgd(&self, base: &SgdConfig) -> SgdConfig {
        SgdConfig {
            prox_mu: if self.kind == MethodKind::FedProx { self.prox_mu } else { 0.0 },
            ..base.clone()
        }
    }
}

/// Cooperation edge: fog `fog` mixes its model with `neighbours`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoopEdge {
    pub fog: usize,
    pub neighbours: Vec<usize>,
    pub self_weight: f64,
    pub neighbour_weights: Vec<f64>,
}

impl CoopEdge {
    fn new(fog: usize, neighbours: Vec<usize>, weights: [f64; 2]) -> Self {
        let share = weights[1] / neighbours.len() as f64;
        let neighbour_weights = vec![share; neighbours.len()];
        Self {
            fog,
            neighbours,
            self_weight: weights[0],
            neighbour_weights,
        }
    }
}

/// Sensors with a feasible direct link to the gateway.
pub fn associate_flat(graph: &FeasibilityGraph) -> Vec<bool> {
    graph.s2g.iter().map(|lb| lb.feasible).collect()
}

/// Nearest feasible fog among `tier` for every sensor (lower index on
/// ties); `None` when no tier fog is reachable.
pub fn associate_hfl(graph: &FeasibilityGraph, tier: &[bool]) -> Vec<Option<usize>> {
    graph
        .s2f
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (m, lb) in row.iter().enumerate() {
                if tier[m] && lb.feasible && best.is_none_or(|(_, d)| lb.distance_m < d) {
                    best = Some((m, lb.distance_m));
                }
            }
            best.map(|(m, _)| m)
        })
        .collect()
}

pub fn clusters(assignments: &[Option<usize>], n_fogs: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_fogs];
    for (i, a) in assignments.iter().enumerate() {
        if let Some(m) = a {
            out[*m].push(i);
        }
    }
    out
}

/// `theta_t + Σ (n_i / Σ n_k)·Δ_i` over the cluster.
pub fn fog_aggregate(theta_t: &[f64], updates: &[(&[f64], usize)]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if updates.is_empty() || total == 0 {
        return Err(Error::domain("cannot aggregate an empty cluster"));
    }
    let mut out = theta_t.to_vec();
    for (delta, n) in updates {
        if delta.len() != out.len() {
            return Err(Error::domain("update length does not match the model"));
        }
        let w = *n as f64 / total as f64;
        for (o, d) in out.iter_mut().zip(delta.iter()) {
            *o += w * d;
        }
    }
    Ok(out)
}

fn nearest_feasible(graph: &FeasibilityGraph, m: usize, ok: impl Fn(usize) -> bool, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = graph.f2f[m]
        .iter()
        .enumerate()
        .filter(|&(j, lb)| j != m && lb.feasible && ok(j))
        .map(|(j, lb)| (lb.distance_m, j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Every tier fog cooperates with its nearest feasible tier neighbour(s).
pub fn coop_select_nearest(graph: &FeasibilityGraph, tier: &[bool], spec: &MethodSpec) -> Vec<CoopEdge> {
    if spec.max_neighbours == 0 {
        return Vec::new();
    }
    (0..graph.n_fogs())
        .filter(|&m| tier[m])
        .filter_map(|m| {
            let nb = nearest_feasible(graph, m, |j| tier[j], spec.max_neighbours);
            (!nb.is_empty()).then(|| CoopEdge::new(m, nb, spec.nearest_weights))
        })
        .collect()
}

/// Nearest-rank quantile of the feasible fog-fog distances between tier
/// fogs, one entry per unordered pair.
pub fn fog_distance_quantile(graph: &FeasibilityGraph, tier: &[bool], q: f64) -> Option<f64> {
    let mut d = Vec::new();
    for m in 0..graph.n_fogs() {
        for j in m + 1..graph.n_fogs() {
            if tier[m] && tier[j] && graph.f2f[m][j].feasible {
                d.push(graph.f2f[m][j].distance_m);
            }
        }
    }
    if d.is_empty() {
        return None;
    }
    autoenc::calibrate_threshold(&d, q * 100.0).ok()
}

/// A non-empty fog with a small cluster (`c_m <= max(floor, factor·c̄)`,
/// `c̄` over non-empty clusters) cooperates with the nearest feasible tier
/// fog that has a strictly larger cluster and lies within the distance
/// quantile.
pub fn coop_select_selective(
    graph: &FeasibilityGraph,
    tier: &[bool],
    cluster_sizes: &[usize],
    spec: &MethodSpec,
) -> Vec<CoopEdge> {
    let nonempty: Vec<usize> = (0..graph.n_fogs())
        .filter(|&m| tier[m] && cluster_sizes[m] > 0)
        .collect();
    if nonempty.is_empty() || spec.max_neighbours == 0 {
        return Vec::new();
    }
    let Some(q1) = fog_distance_quantile(graph, tier, spec.selective_distance_quantile) else {
        return Vec::new();
    };
    let mean = nonempty.iter().map(|&m| cluster_sizes[m]).sum::<usize>() as f64 / nonempty.len() as f64;
    let small = spec.small_cluster_floor.max(spec.small_cluster_factor * mean);
    nonempty
        .iter()
        .filter(|&&m| cluster_sizes[m] as f64 <= small)
        .filter_map(|&m| {
            let ok = |j: usize| {
                tier[j] && cluster_sizes[j] > cluster_sizes[m] && graph.f2f[m][j].distance_m <= q1
            };
            let nb = nearest_feasible(graph, m, ok, spec.max_neighbours);
            (!nb.is_empty()).then(|| CoopEdge::new(m, nb, spec.selective_weights))
        })
        .collect()
}

/// `θ̃_m = α_mm θ_m + Σ_j α_mj θ_j`, computed from the pre-mix models.
pub fn coop_mix(models: &[Vec<f64>], edges: &[CoopEdge]) -> Vec<Vec<f64>> {
    let mut out = models.to_vec();
    for e in edges {
        let mixed = &mut out[e.fog];
        for (o, s) in mixed.iter_mut().zip(&models[e.fog]) {
            *o = e.self_weight * s;
        }
        for (&j, &w) in e.neighbours.iter().zip(&e.neighbour_weights) {
            for (o, v) in mixed.iter_mut().zip(&models[j]) {
                *o += w * v;
            }
        }
    }
    out
}

/// Data-weighted mean of fog models; zero-weight fogs drop out. `None`
/// when no fog carries data.
pub fn global_aggregate(models: &[Vec<f64>], weights: &[usize]) -> Option<Vec<f64>> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return None;
    }
    let mut out = vec![0.0; models.first()?.len()];
    for (m, &w) in models.iter().zip(weights) {
        if w == 0 {
            continue;
        }
        let a = w as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(m) {
            *o += a * v;
        }
    }
    Some(out)
}

/// Transmit and receive energy of one transmission. Refuses infeasible
/// links.
pub fn charge(
    tier: &'static str,
    from: usize,
    to: usize,
    bits: u64,
    lb: &LinkBudget,
    params: &AcousticParams,
) -> Result<(f64, f64)> {
    let relabel = |e: Error| match e {
        Error::InfeasibleLink { sl_min_db, .. } => Error::InfeasibleLink {
            tier,
            from,
            to,
            sl_min_db,
        },
        other => other,
    };
    let tx = channel::tx_energy(bits, lb, params).map_err(relabel)?;
    let rx = channel::rx_energy(bits, lb, params).map_err(relabel)?;
    Ok((tx, rx))
}

/// Mutable state carried across rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub global_model: ModelParams,
    pub error_buffers: Vec<ErrorBuffer>,
    pub battery: BatteryState,
}

impl RoundState {
    pub fn new(init: ModelParams, n_sensors: usize, e_init: f64, e_min: f64) -> Self {
        let d = init.len();
        Self {
            global_model: init,
            error_buffers: vec![ErrorBuffer::zeros(d); n_sensors],
            battery: BatteryState::new(n_sensors, e_init, e_min),
        }
    }
}

/// What a round decided, for inspection and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundTrace {
    pub assignments: Vec<Option<usize>>,
    pub clusters: Vec<Vec<usize>>,
    pub coop_edges: Vec<CoopEdge>,
    /// Sensors that trained and uploaded.
    pub active: Vec<usize>,
    /// Eligible sensors skipped to protect their battery reserve.
    pub skipped_battery: Vec<usize>,
}

/// Pooled mean reconstruction loss over every sensor's training split.
pub fn global_train_loss(model: &ModelParams, datasets: &[LocalDataset]) -> Result<f64> {
    let sums = datasets
        .par_iter()
        .map(|ds| autoenc::scores(model, &ds.train).map(|s| (s.iter().sum::<f64>(), s.len())))
        .collect::<Result<Vec<_>>>()?;
    let (total, n) = sums.iter().fold((0.0, 0usize), |(a, b), (s, k)| (a + s, b + k));
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

struct LocalResult {
    sensor: usize,
    delta: Vec<f64>,
    flops: u64,
}

fn train_sensors(
    state: &mut RoundState,
    datasets: &[LocalDataset],
    active: &[usize],
    cfg: &ExperimentConfig,
    sgd: &SgdConfig,
    round: usize,
    seed: u64,
) -> Result<Vec<LocalResult>> {
    let theta = &state.global_model;
    let mut is_active = vec![false; datasets.len()];
    active.iter().for_each(|&i| is_active[i] = true);
    let jobs: Vec<(usize, &mut ErrorBuffer)> = state
        .error_buffers
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| is_active[*i])
        .collect();
    jobs.into_par_iter()
        .map(|(i, buf)| {
            let mut rng = seeds::stream(seed, seeds::LOCAL_SGD, round as u64, i as u64);
            let (local, flops) = autoenc::local_sgd(theta, &datasets[i].train, sgd, &mut rng)
                .map_err(|e| Error::Numeric(format!("sensor {i}, round {round}: {e}")))?;
            let raw: Vec<f64> = local.values.iter().zip(&theta.values).map(|(a, b)| a - b).collect();
            let c = CompressedUpdate::encode(&raw, buf, &cfg.compression, datasets[i].n_samples())?;
            Ok(LocalResult {
                sensor: i,
                delta: c.to_dense(),
                flops,
            })
        })
        .collect()
}

fn predicted_flops(model: &ModelParams, ds: &LocalDataset, sgd: &SgdConfig) -> u64 {
    autoenc::FLOPS_PER_PARAM_SAMPLE * model.len() as u64 * ds.n_samples() as u64 * sgd.epochs as u64
}

/// One round of the configured method.
pub fn run_round(
    state: &mut RoundState,
    graph: &FeasibilityGraph,
    datasets: &[LocalDataset],
    cfg: &ExperimentConfig,
    round: usize,
    seed: u64,
) -> Result<(RoundReport, RoundTrace)> {
    let kind = cfg.method.kind;
    if kind == MethodKind::Centralised {
        return Err(Error::config("the centralised reference has no federated rounds"));
    }
    let n = datasets.len();
    if graph.n_sensors() != n {
        return Err(Error::domain(format!(
            "graph has {} sensors but {n} datasets were supplied",
            graph.n_sensors()
        )));
    }
    let params = &cfg.acoustic;
    let sgd = cfg.method.local_sgd(&cfg.sgd);
    let d = state.global_model.len();
    let l_u = cfg.compression.sensor_payload_bits(d);
    let mut trace = RoundTrace::default();
    let mut report = RoundReport {
        round,
        ..Default::default()
    };

    // association: the uplink each eligible sensor would use
    let tier = graph.uplink_fogs();
    let uplink: Vec<Option<(usize, &LinkBudget)>> = if kind.is_hierarchical() {
        trace.assignments = associate_hfl(graph, &tier);
        trace.assignments
            .iter()
            .enumerate()
            .map(|(i, a)| a.map(|m| (m, &graph.s2f[i][m])))
            .collect()
    } else {
        associate_flat(graph)
            .iter()
            .enumerate()
            .map(|(i, &ok)| ok.then_some((0, &graph.s2g[i])))
            .collect()
    };

    for (i, up) in uplink.iter().enumerate() {
        let Some((_, lb)) = up else { continue };
        let comp = channel::comp_energy(predicted_flops(&state.global_model, &datasets[i], &sgd), cfg.energy.eps_op);
        let tx = channel::tx_energy(l_u, lb, params)?;
        if datasets[i].n_samples() == 0 {
            continue;
        }
        if state.battery.can_afford(i, tx + comp) {
            trace.active.push(i);
        } else {
            trace.skipped_battery.push(i);
        }
    }

    let results = train_sensors(state, datasets, &trace.active, cfg, &sgd, round, seed)?;

    let mut costs = vec![0.0; n];
    let mut s2f_times = Vec::with_capacity(results.len());
    let mut max_flops = 0u64;
    let sensor_tier = if kind.is_hierarchical() { "sensor-fog" } else { "sensor-gateway" };
    for r in &results {
        let (to, lb) = uplink[r.sensor].expect("active sensors have an uplink");
        let (tx, rx) = charge(sensor_tier, r.sensor, to, l_u, lb, params)?;
        let comp = channel::comp_energy(r.flops, cfg.energy.eps_op);
        report.e_s2f += tx;
        report.e_rx += rx;
        report.e_comp += comp;
        report.payload_bits_total += l_u;
        costs[r.sensor] = tx + comp;
        s2f_times.push(lb.latency_s(l_u));
        max_flops = max_flops.max(r.flops);
    }

    let theta = state.global_model.values.clone();
    let mut f2f_times = Vec::new();
    let mut f2g_times = Vec::new();
    let new_theta = if kind.is_hierarchical() {
        let m_count = graph.n_fogs();
        trace.clusters = vec![Vec::new(); m_count];
        for r in &results {
            let (m, _) = uplink[r.sensor].unwrap();
            trace.clusters[m].push(r.sensor);
        }
        let mut fog_models = vec![theta.clone(); m_count];
        let mut weights = vec![0usize; m_count];
        let by_sensor: std::collections::HashMap<usize, &LocalResult> =
            results.iter().map(|r| (r.sensor, r)).collect();
        for m in 0..m_count {
            if trace.clusters[m].is_empty() {
                continue;
            }
            let ups: Vec<(&[f64], usize)> = trace.clusters[m]
                .iter()
                .map(|i| (by_sensor[i].delta.as_slice(), datasets[*i].n_samples()))
                .collect();
            weights[m] = ups.iter().map(|(_, k)| k).sum();
            fog_models[m] = fog_aggregate(&theta, &ups)?;
        }
        let sizes: Vec<usize> = trace.clusters.iter().map(Vec::len).collect();
        trace.coop_edges = match kind {
            MethodKind::HflNearest => coop_select_nearest(graph, &tier, &cfg.method),
            MethodKind::HflSelective => coop_select_selective(graph, &tier, &sizes, &cfg.method),
            _ => Vec::new(),
        };
        let l_f = cfg.compression.fog_bits(d);
        for e in &trace.coop_edges {
            for &j in &e.neighbours {
                let lb = &graph.f2f[j][e.fog];
                let (tx, rx) = charge("fog-fog", j, e.fog, l_f, lb, params)?;
                report.e_f2f += tx;
                report.e_rx += rx;
                report.payload_bits_total += l_f;
                f2f_times.push(lb.latency_s(l_f));
            }
        }
        let mixed = coop_mix(&fog_models, &trace.coop_edges);
        let l_g = cfg.compression.gateway_bits(d);
        for m in (0..m_count).filter(|&m| tier[m]) {
            let lb = &graph.f2g[m];
            let (tx, rx) = charge("fog-gateway", m, 0, l_g, lb, params)?;
            report.e_f2g += tx;
            report.e_rx += rx;
            report.payload_bits_total += l_g;
            f2g_times.push(lb.latency_s(l_g));
        }
        global_aggregate(&mixed, &weights)
    } else if results.is_empty() {
        None
    } else {
        let ups: Vec<(&[f64], usize)> = results
            .iter()
            .map(|r| (r.delta.as_slice(), datasets[r.sensor].n_samples()))
            .collect();
        Some(fog_aggregate(&theta, &ups)?)
    };
    if let Some(v) = new_theta {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("round {round}: aggregated model is not finite")));
        }
        state.global_model.values = v;
    }

    state.battery.step(&costs)?;
    report.latency_s = metrics::round_latency(
        &[&s2f_times, &f2f_times, &f2g_times],
        max_flops as f64 / cfg.energy.flops_per_s,
    );
    report.participation = results.len() as f64 / n as f64;
    report.mean_train_loss = global_train_loss(&state.global_model, datasets)?;
    report.battery_min = state.battery.min();
    report.battery_mean = state.battery.mean();
    report.finalize_totals();
    Ok((report, trace))
}

/// Topology, data and initial model shared by every method for one seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub datasets: Vec<LocalDataset>,
    pub init: ModelParams,
    /// Entity names when the data came from a benchmark directory.
    pub entities: Vec<String>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut deployment = cfg.deployment.clone();
        deployment.seed = seed;
        let (datasets, entities) = match &cfg.benchmark {
            Some(spec) => {
                let loaded = data::load_benchmark(spec)?;
                deployment.n_sensors = loaded.len();
                if deployment.n_fogs.is_none() {
                    deployment.n_fogs = Some((loaded.len() / 10).max(2));
                }
                let (names, ds) = loaded.into_iter().unzip();
                (ds, names)
            }
            None => {
                let mut synth = cfg.data.clone();
                synth.n_sensors = deployment.n_sensors;
                synth.seed = seed;
                (data::synth_generate(&synth)?, Vec::new())
            }
        };
        let topology = topology::deploy(&deployment)?;
        let dim = datasets.first().map_or(cfg.data.dim, LocalDataset::dim);
        let mut layers = cfg.hidden_layers.clone();
        layers.insert(0, dim);
        layers.push(dim);
        let init = autoenc::init_params(&layers, &mut seeds::stream(seed, seeds::INIT, 0, 0))?;
        Ok(Self {
            topology,
            datasets,
            init,
            entities,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: f64,
    pub percentile: f64,
    pub detection: DetectionResult,
    pub final_train_loss: f64,
}

/// Global-threshold evaluation: calibrate on the pooled validation errors
/// of every sensor, then score every sensor's test split.
pub fn evaluate(model: &ModelParams, datasets: &[LocalDataset], percentile: f64) -> Result<Evaluation> {
    let val: Vec<f64> = datasets
        .par_iter()
        .map(|ds| autoenc::scores(model, &ds.val))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let threshold = autoenc::calibrate_threshold(&val, percentile)?;
    let per_sensor = datasets
        .par_iter()
        .map(|ds| {
            let s = autoenc::scores(model, &ds.test)?;
            Ok((autoenc::flag(&s, threshold), ds.test_labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        threshold,
        percentile,
        detection: metrics::pooled_detection(&per_sensor)?,
        final_train_loss: global_train_loss(model, datasets)?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: MethodKind,
    pub seed: u64,
    pub n_sensors: usize,
    pub n_fogs: usize,
    pub d_params: usize,
    pub reports: Vec<RoundReport>,
    pub model: ModelParams,
    pub evaluation: Evaluation,
    /// Loss of the initial model, for convergence checks.
    pub initial_train_loss: f64,
}

/// Runs `cfg.rounds` rounds of `cfg.method.kind` on a prepared scenario.
pub fn simulate(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let datasets = &scenario.datasets;
    let initial_train_loss = global_train_loss(&scenario.init, datasets)?;
    if cfg.method.kind == MethodKind::Centralised {
        return run_centralised(cfg, scenario, seed, initial_train_loss);
    }
    let mut topo = scenario.topology.clone();
    let mut graph = topology::build_graph(&topo, &cfg.acoustic)?;
    let mut drift = cfg.mobility.enabled.then(|| {
        FogDrift::new(
            topo.n_fogs(),
            &cfg.mobility,
            &mut seeds::stream(seed, seeds::MOBILITY, 0, 0),
        )
    });
    let mut state = RoundState::new(scenario.init.clone(), datasets.len(), cfg.energy.e_init, cfg.energy.e_min);
    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        if let Some(drift) = drift.as_mut() {
            if t > 1 {
                let mut rng = seeds::stream(seed, seeds::MOBILITY, t as u64, 0);
                let mut deployment = cfg.deployment.clone();
                deployment.n_sensors = topo.n_sensors();
                drift.step(&mut topo.fog_pos, &cfg.mobility, &deployment, &mut rng);
                graph = topology::build_graph(&topo, &cfg.acoustic)?;
            }
        }
        let (report, _) = run_round(&mut state, &graph, datasets, cfg, t, seed)?;
        reports.push(report);
    }
    let evaluation = evaluate(&state.global_model, datasets, cfg.percentile)?;
    Ok(RunOutput {
        method: cfg.method.kind,
        seed,
        n_sensors: datasets.len(),
        n_fogs: topo.n_fogs(),
        d_params: state.global_model.len(),
        reports,
        model: state.global_model,
        evaluation,
        initial_train_loss,
    })
}

/// Builds the scenario for `seed` and simulates it.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let scenario = Scenario::build(cfg, seed)?;
    simulate(cfg, &scenario, seed)
}

/// All-data reference: every training split pooled at the gateway and
/// trained with the same optimiser for `rounds·epochs` epochs. Energy is the
/// raw upload of `32·D` bits per training sample, charged on feasible
/// direct links only.
fn run_centralised(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64, initial_train_loss: f64) -> Result<RunOutput> {
    let datasets = &scenario.datasets;
    if datasets.is_empty() {
        return Err(Error::domain("centralised training needs at least one sensor"));
    }
    let mut pooled = Matrix::default();
    for ds in datasets {
        pooled = pooled.stacked(&ds.train)?;
    }
    let graph = topology::build_graph(&scenario.topology, &cfg.acoustic)?;
    let mut battery = BatteryState::new(datasets.len(), cfg.energy.e_init, cfg.energy.e_min);
    let sgd = SgdConfig {
        prox_mu: 0.0,
        ..cfg.sgd.clone()
    };
    let mut model = scenario.init.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let mut report = RoundReport {
            round: t,
            participation: 1.0,
            ..Default::default()
        };
        let mut costs = vec![0.0; datasets.len()];
        let mut times = Vec::new();
        if t == 1 {
            for (i, ds) in datasets.iter().enumerate() {
                let lb = &graph.s2g[i];
                if !lb.feasible {
                    continue;
                }
                let bits = 32 * ds.dim() as u64 * ds.n_samples() as u64;
                let (tx, rx) = charge("sensor-gateway", i, 0, bits, lb, &cfg.acoustic)?;
                report.e_s2f += tx;
                report.e_rx += rx;
                report.payload_bits_total += bits;
                costs[i] = tx;
                times.push(lb.latency_s(bits));
            }
        }
        let mut rng = seeds::stream(seed, seeds::CENTRAL_SGD, t as u64, 0);
        let (next, flops) = autoenc::local_sgd(&model, &pooled, &sgd, &mut rng)?;
        model = next;
        battery.step(&costs)?;
        report.latency_s = metrics::round_latency(&[&times], flops as f64 / cfg.energy.flops_per_s);
        report.mean_train_loss = global_train_loss(&model, datasets)?;
        report.battery_min = battery.min();
        report.battery_mean = battery.mean();
        report.finalize_totals();
        reports.push(report);
    }
    let evaluation = evaluate(&model, datasets, cfg.percentile)?;
    Ok(RunOutput {
        method: MethodKind::Centralised,
        seed,
        n_sensors: datasets.len(),
        n_fogs: scenario.topology.n_fogs(),
        d_params: model.len(),
        reports,
        model,
        evaluation,
        initial_train_loss,
    })
}
