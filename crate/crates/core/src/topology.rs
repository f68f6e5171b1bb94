//! Stratified 3-D deployment and the per-round feasibility graph.
//!
//! The volume is `[0, lx] × [0, ly] × [0, h]` with `z = 0` at the surface.
//! Sensors sit in the deep stratum, fog aggregators mid-water, and a single
//! gateway floats at the surface.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{link_budget, AcousticParams, LinkBudget};
use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploymentConfig {
    pub lx_m: f64,
    pub ly_m: f64,
    pub h_m: f64,
    pub n_sensors: usize,
    /// `None` means one fog per ten sensors.
    pub n_fogs: Option<usize>,
    pub sensor_depth: [f64; 2],
    pub fog_depth: [f64; 2],
    /// `None` places the gateway above the centre of the area.
    pub gateway_xy: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            lx_m: 2000.0,
            ly_m: 2000.0,
            h_m: 1000.0,
            n_sensors: 100,
            n_fogs: None,
            sensor_depth: [500.0, 1000.0],
            fog_depth: [100.0, 400.0],
            gateway_xy: None,
            seed: 0,
        }
    }
}

impl DeploymentConfig {
    pub fn fog_count(&self) -> usize {
        self.n_fogs.unwrap_or((self.n_sensors / 10).max(1))
    }

    pub fn gateway(&self) -> Point3 {
        let [x, y] = self.gateway_xy.unwrap_or([self.lx_m / 2.0, self.ly_m / 2.0]);
        [x, y, 0.0]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lx_m", self.lx_m), ("ly_m", self.ly_m), ("h_m", self.h_m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("deployment.{name} must be positive")));
            }
        }
        if self.n_sensors == 0 {
            return Err(Error::config("deployment.n_sensors must be at least 1"));
        }
        if self.fog_count() == 0 {
            return Err(Error::config("deployment.n_fogs must be at least 1"));
        }
        let [fz0, fz1] = self.fog_depth;
        let [sz0, sz1] = self.sensor_depth;
        let ordered = 0.0 <= fz0 && fz0 <= fz1 && fz1 <= sz0 && sz0 <= sz1 && sz1 <= self.h_m;
        if !ordered {
            return Err(Error::config(format!(
                "strata must satisfy 0 <= fog_depth[0] <= fog_depth[1] <= sensor_depth[0] <= sensor_depth[1] <= h_m, got fog {:?}, sensor {:?}, h {}",
                self.fog_depth, self.sensor_depth, self.h_m
            )));
        }
        let [gx, gy, _] = self.gateway();
        if !(0.0..=self.lx_m).contains(&gx) || !(0.0..=self.ly_m).contains(&gy) {
            return Err(Error::config("deployment.gateway_xy lies outside the area"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub sensor_pos: Vec<Point3>,
    pub fog_pos: Vec<Point3>,
    pub gateway_pos: Point3,
    pub seed: u64,
}

fn uniform_in(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Uniform placement in (x, y) over the area and in depth within each
/// stratum. Deterministic in `config.seed`.
pub fn deploy(config: &DeploymentConfig) -> Result<Topology> {
    config.validate()?;
    let mut rng = crate::seeds::stream(config.seed, crate::seeds::TOPOLOGY, 0, 0);
    let mut place = |n: usize, depth: [f64; 2]| -> Vec<Point3> {
        (0..n)
            .map(|_| {
                let x = uniform_in(&mut rng, [0.0, config.lx_m]);
                let y = uniform_in(&mut rng, [0.0, config.ly_m]);
                let z = uniform_in(&mut rng, depth);
                [x, y, z]
            })
            .collect()
    };
    let sensor_pos = place(config.n_sensors, config.sensor_depth);
    let fog_pos = place(config.fog_count(), config.fog_depth);
    Ok(Topology {
        sensor_pos,
        fog_pos,
        gateway_pos: config.gateway(),
        seed: config.seed,
    })
}

impl Topology {
    pub fn n_sensors(&self) -> usize {
        self.sensor_pos.len()
    }

    pub fn n_fogs(&self) -> usize {
        self.fog_pos.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let topo: Topology = serde_json::from_str(text)?;
        if topo.gateway_pos[2] != 0.0 {
            return Err(Error::config("gateway must sit at the surface (z = 0)"));
        }
        Ok(topo)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::load(path, e.to_string()))
    }
}

/// Link budgets between every pair of nodes that may talk to each other.
/// Indexing is `[sensor][fog]`, `[fog][fog]` and so on; the f2f diagonal is
/// present but never used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityGraph {
    pub s2f: Vec<Vec<LinkBudget>>,
    pub s2g: Vec<LinkBudget>,
    pub f2f: Vec<Vec<LinkBudget>>,
    pub f2g: Vec<LinkBudget>,
}

pub fn build_graph(topo: &Topology, params: &AcousticParams) -> Result<FeasibilityGraph> {
    params.validate()?;
    let s2f = topo
        .sensor_pos
        .iter()
        .map(|s| {
            topo.fog_pos
                .iter()
                .map(|f| link_budget(distance(s, f), params))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let s2g = topo
        .sensor_pos
        .iter()
        .map(|s| link_budget(distance(s, &topo.gateway_pos), params))
        .collect::<Result<Vec<_>>>()?;
    let f2f = topo
        .fog_pos
        .iter()
        .map(|a| {
            topo.fog_pos
                .iter()
                .map(|b| link_budget(distance(a, b), params))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let f2g = topo
        .fog_pos
        .iter()
        .map(|f| link_budget(distance(f, &topo.gateway_pos), params))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeasibilityGraph { s2f, s2g, f2f, f2g })
}

impl FeasibilityGraph {
    pub fn n_sensors(&self) -> usize {
        self.s2g.len()
    }

    pub fn n_fogs(&self) -> usize {
        self.f2g.len()
    }

    /// Fogs that can deliver to the gateway in one hop.
    pub fn uplink_fogs(&self) -> Vec<bool> {
        self.f2g.iter().map(|lb| lb.feasible).collect()
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of sensors with a feasible direct link to the gateway.
pub fn direct_reachability(graph: &FeasibilityGraph) -> f64 {
    let hits = graph.s2g.iter().filter(|lb| lb.feasible).count();
    fraction(hits, graph.n_sensors())
}

/// Fraction of sensors with at least one feasible fog link.
pub fn fog_reachability(graph: &FeasibilityGraph) -> f64 {
    let hits = graph
        .s2f
        .iter()
        .filter(|row| row.iter().any(|lb| lb.feasible))
        .count();
    fraction(hits, graph.n_sensors())
}

/// Fraction of sensors with a complete two-hop path: a feasible link to a
/// fog that itself reaches the gateway. This is what hierarchical
/// association can actually use.
pub fn fog_path_reachability(graph: &FeasibilityGraph) -> f64 {
    let up = graph.uplink_fogs();
    let hits = graph
        .s2f
        .iter()
        .filter(|row| row.iter().zip(&up).any(|(lb, &u)| u && lb.feasible))
        .count();
    fraction(hits, graph.n_sensors())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub enabled: bool,
    pub mean_speed: f64,
    /// Gauss-Markov memory in [0, 1]; 1 keeps velocity constant.
    pub memory_alpha: f64,
    /// Seconds between graph refreshes (one federated round).
    pub dt: f64,
    pub speed_std: f64,
    /// Heading noise in radians.
    pub heading_std: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mean_speed: 0.5,
            memory_alpha: 0.75,
            dt: 60.0,
            speed_std: 0.1,
            heading_std: 0.3,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.memory_alpha) {
            return Err(Error::config("mobility.memory_alpha must lie in [0, 1]"));
        }
        for (name, v) in [
            ("mean_speed", self.mean_speed),
            ("dt", self.dt),
            ("speed_std", self.speed_std),
            ("heading_std", self.heading_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("mobility.{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Horizontal Gauss-Markov drift state for the fog layer. Speed and heading
/// each follow `x' = α x + (1 − α) x̄ + √(1 − α²) σ w`; depth is held.
#[derive(Debug, Clone)]
pub struct FogDrift {
    speed: Vec<f64>,
    heading: Vec<f64>,
    mean_heading: Vec<f64>,
}

impl FogDrift {
    /// Starts every fog at the mean speed on a random mean heading.
    pub fn new(n_fogs: usize, mobility: &MobilityConfig, rng: &mut impl Rng) -> Self {
        let mean_heading: Vec<f64> = (0..n_fogs).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self {
            speed: vec![mobility.mean_speed; n_fogs],
            heading: mean_heading.clone(),
            mean_heading,
        }
    }

    /// One drift step, positions clamped to the area and their stratum.
    /// Fogs that hit a wall bounce.
    pub fn step(
        &mut self,
        fog_pos: &mut [Point3],
        mobility: &MobilityConfig,
        bounds: &DeploymentConfig,
        rng: &mut impl Rng,
    ) {
        let a = mobility.memory_alpha;
        let innov = (1.0 - a * a).max(0.0).sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (m, pos) in fog_pos.iter_mut().enumerate() {
            let ws: f64 = std_normal.sample(rng);
            let wh: f64 = std_normal.sample(rng);
            self.speed[m] =
                a * self.speed[m] + (1.0 - a) * mobility.mean_speed + innov * mobility.speed_std * ws;
            self.heading[m] = a * self.heading[m]
                + (1.0 - a) * self.mean_heading[m]
                + innov * mobility.heading_std * wh;
            let v = self.speed[m].abs();
            pos[0] += v * self.heading[m].cos() * mobility.dt;
            pos[1] += v * self.heading[m].sin() * mobility.dt;
            if pos[0] < 0.0 || pos[0] > bounds.lx_m {
                pos[0] = pos[0].clamp(0.0, bounds.lx_m);
                self.heading[m] = PI - self.heading[m];
                self.mean_heading[m] = PI - self.mean_heading[m];
            }
            if pos[1] < 0.0 || pos[1] > bounds.ly_m {
                pos[1] = pos[1].clamp(0.0, bounds.ly_m);
                self.heading[m] = -self.heading[m];
                self.mean_heading[m] = -self.mean_heading[m];
            }
            pos[2] = pos[2].clamp(bounds.fog_depth[0], bounds.fog_depth[1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::channel::min_source_level;

    fn graph_for(topo: &Topology) -> FeasibilityGraph {
        build_graph(topo, &AcousticParams::default()).unwrap()
    }

    #[test]
    fn degenerate_stratum_pins_depth() {
        let cfg = DeploymentConfig {
            n_sensors: 1,
            sensor_depth: [500.0, 500.0],
            ..Default::default()
        };
        let topo = deploy(&cfg).unwrap();
        assert_eq!(topo.sensor_pos[0][2], 500.0);
    }

    #[test]
    fn deploy_is_deterministic_and_in_bounds() {
        let cfg = DeploymentConfig {
            n_sensors: 200,
            seed: 7,
            ..Default::default()
        };
        let a = deploy(&cfg).unwrap();
        let b = deploy(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_fogs(), 20);
        assert_eq!(a.gateway_pos, [1000.0, 1000.0, 0.0]);
        for p in &a.sensor_pos {
            assert!((0.0..=2000.0).contains(&p[0]) && (0.0..=2000.0).contains(&p[1]));
            assert!((500.0..=1000.0).contains(&p[2]));
        }
        for p in &a.fog_pos {
            assert!((100.0..=400.0).contains(&p[2]));
        }
    }

    #[test]
    fn mean_sensor_depth_is_mid_stratum() {
        let cfg = DeploymentConfig {
            n_sensors: 10_000,
            seed: 3,
            ..Default::default()
        };
        let topo = deploy(&cfg).unwrap();
        let mean = topo.sensor_pos.iter().map(|p| p[2]).sum::<f64>() / 10_000.0;
        assert!((mean - 750.0).abs() < 10.0, "{mean}");
    }

    #[test]
    fn bad_strata_are_rejected() {
        let cfg = DeploymentConfig {
            fog_depth: [100.0, 600.0],
            ..Default::default()
        };
        assert!(matches!(deploy(&cfg), Err(Error::Config(_))));
        let cfg = DeploymentConfig {
            sensor_depth: [500.0, 1200.0],
            ..Default::default()
        };
        assert!(deploy(&cfg).is_err());
    }

    fn fixed(sensors: Vec<Point3>, fogs: Vec<Point3>) -> Topology {
        Topology {
            sensor_pos: sensors,
            fog_pos: fogs,
            gateway_pos: [1000.0, 1000.0, 0.0],
            seed: 0,
        }
    }

    #[test]
    fn vertical_and_corner_links() {
        let topo = fixed(vec![[1000.0, 1000.0, 900.0], [0.0, 0.0, 1000.0]], vec![]);
        let g = graph_for(&topo);
        assert!((g.s2g[0].distance_m - 900.0).abs() < 1e-9);
        assert!(g.s2g[0].feasible);
        assert!((g.s2g[1].distance_m - 1732.05).abs() < 0.01);
        assert!(!g.s2g[1].feasible);
        assert_eq!(direct_reachability(&g), 0.5);
        assert_eq!(fog_reachability(&g), 0.0);
    }

    #[test]
    fn single_node_graph_is_empty() {
        let g = graph_for(&fixed(vec![], vec![[10.0, 10.0, 200.0]]));
        assert!(g.s2f.is_empty() && g.s2g.is_empty());
        assert_eq!(g.f2f.len(), 1);
        assert_eq!(direct_reachability(&g), 0.0);
    }

    #[test]
    fn reachability_edges() {
        let near: Vec<Point3> = (0..5).map(|i| [1000.0 + 50.0 * i as f64, 1000.0, 500.0]).collect();
        let g = graph_for(&fixed(near.clone(), vec![]));
        assert_eq!(direct_reachability(&g), 1.0);
        assert_eq!(fog_reachability(&g), 0.0);

        let far: Vec<Point3> = (0..4).map(|i| [0.0, 2000.0 * (i % 2) as f64, 1000.0]).collect();
        let g = graph_for(&fixed(far, vec![]));
        assert_eq!(direct_reachability(&g), 0.0);
    }

    #[test]
    fn adding_a_fog_never_lowers_fog_reachability() {
        let cfg = DeploymentConfig {
            n_sensors: 60,
            n_fogs: Some(3),
            seed: 11,
            ..Default::default()
        };
        let mut topo = deploy(&cfg).unwrap();
        let before = fog_reachability(&graph_for(&topo));
        topo.fog_pos.push([1500.0, 500.0, 300.0]);
        let after = fog_reachability(&graph_for(&topo));
        assert!(after >= before);
    }

    #[test]
    fn graph_feasibility_matches_independent_check() {
        let params = AcousticParams::default();
        let cfg = DeploymentConfig {
            n_sensors: 50,
            n_fogs: Some(20),
            seed: 5,
            ..Default::default()
        };
        let topo = deploy(&cfg).unwrap();
        let g = graph_for(&topo);
        let mut checked = 0;
        for (i, s) in topo.sensor_pos.iter().enumerate() {
            for (m, f) in topo.fog_pos.iter().enumerate() {
                let d = distance(s, f);
                let ok = min_source_level(d, &params).unwrap() <= params.sl_max_db;
                assert_eq!(g.s2f[i][m].feasible, ok);
                checked += 1;
            }
        }
        for a in 0..topo.n_fogs() {
            for b in 0..topo.n_fogs() {
                assert_eq!(g.f2f[a][b].distance_m, g.f2f[b][a].distance_m);
            }
        }
        assert_eq!(checked, 1000);
    }

    #[test]
    fn topology_json_round_trip() {
        let topo = deploy(&DeploymentConfig::default()).unwrap();
        let back = Topology::from_json(&topo.to_json().unwrap()).unwrap();
        assert_eq!(topo, back);
    }

    #[test]
    fn frozen_drift_leaves_fogs_in_place() {
        let cfg = DeploymentConfig::default();
        let topo = deploy(&cfg).unwrap();
        let mob = MobilityConfig {
            enabled: true,
            mean_speed: 0.0,
            memory_alpha: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut drift = FogDrift::new(topo.n_fogs(), &mob, &mut rng);
        let mut pos = topo.fog_pos.clone();
        for _ in 0..10 {
            drift.step(&mut pos, &mob, &cfg, &mut rng);
        }
        assert_eq!(pos, topo.fog_pos);
    }

    #[test]
    fn memoryless_drift_speed_is_iid_around_mean() {
        let cfg = DeploymentConfig {
            lx_m: 1e9,
            ly_m: 1e9,
            ..Default::default()
        };
        let mob = MobilityConfig {
            enabled: true,
            mean_speed: 2.0,
            memory_alpha: 0.0,
            dt: 1.0,
            speed_std: 0.5,
            heading_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut drift = FogDrift::new(1, &mob, &mut rng);
        let mut pos = vec![[5e8, 5e8, 200.0]];
        let mut speeds = Vec::new();
        for _ in 0..4000 {
            drift.step(&mut pos, &mob, &cfg, &mut rng);
            speeds.push(drift.speed[0]);
        }
        let n = speeds.len() as f64;
        let mean = speeds.iter().sum::<f64>() / n;
        let lag1 = speeds.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0);
        let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 2.0).abs() < 0.05);
        assert!((var.sqrt() - 0.5).abs() < 0.05);
        assert!((lag1 / var).abs() < 0.1, "memoryless speeds should be uncorrelated");
    }

    #[test]
    fn drift_displacement_tracks_mean_speed() {
        let cfg = DeploymentConfig {
            lx_m: 1e7,
            ly_m: 1e7,
            ..Default::default()
        };
        let mob = MobilityConfig {
            enabled: true,
            mean_speed: 0.5,
            memory_alpha: 0.75,
            dt: 10.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut drift = FogDrift::new(1, &mob, &mut rng);
        let mut pos = vec![[5e6, 5e6, 250.0]];
        let mut total = 0.0;
        for _ in 0..1000 {
            let before = pos[0];
            drift.step(&mut pos, &mob, &cfg, &mut rng);
            total += distance(&before, &pos[0]);
            assert_eq!(pos[0][2], 250.0);
        }
        let mean_step = total / 1000.0;
        assert!((mean_step - 0.5 * mob.dt).abs() < 0.2 * 0.5 * mob.dt, "{mean_step}");
    }

    #[test]
    fn drift_respects_bounds() {
        let cfg = DeploymentConfig::default();
        let mob = MobilityConfig {
            enabled: true,
            mean_speed: 20.0,
            dt: 100.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let topo = deploy(&cfg).unwrap();
        let mut pos = topo.fog_pos.clone();
        let mut drift = FogDrift::new(pos.len(), &mob, &mut rng);
        for _ in 0..200 {
            drift.step(&mut pos, &mob, &cfg, &mut rng);
            for p in &pos {
                assert!((0.0..=2000.0).contains(&p[0]) && (0.0..=2000.0).contains(&p[1]));
                assert!((100.0..=400.0).contains(&p[2]));
            }
        }
    }
}
