//! Experiment configuration: one TOML document with a section per
//! subsystem. Every key is optional; unknown keys are rejected.
//!
//! ```toml
//! rounds = 20
//! seeds = [0, 1, 2]
//!
//! [deployment]
//! n_sensors = 150
//!
//! [method]
//! kind = "hfl-selective"
//!
//! [compression]
//! rho_s = 0.05
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoenc::SgdConfig;
use crate::channel::AcousticParams;
use crate::compression::CompressionConfig;
use crate::data::{BenchmarkSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::federation::{MethodKind, MethodSpec};
use crate::metrics::EnergyConfig;
use crate::topology::{DeploymentConfig, MobilityConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub methods: Vec<MethodKind>,
    pub n_sensors: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            methods: MethodKind::ALL.to_vec(),
            n_sensors: vec![50, 100, 150, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Percentile of pooled validation errors used as the threshold.
    pub percentile: f64,
    /// Hidden widths of the autoencoder; input and output match the data.
    pub hidden_layers: Vec<usize>,
    /// Weights of the reported energy and latency terms of the objective.
    pub lambda_e: f64,
    pub lambda_tau: f64,
    pub deployment: DeploymentConfig,
    pub acoustic: AcousticParams,
    pub sgd: SgdConfig,
    pub method: MethodSpec,
    pub compression: CompressionConfig,
    pub data: SynthConfig,
    /// Replaces the synthetic generator when present.
    pub benchmark: Option<BenchmarkSpec>,
    pub energy: EnergyConfig,
    pub mobility: MobilityConfig,
    pub grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            seeds: vec![0, 1, 2],
            output_dir: None,
            percentile: 99.0,
            hidden_layers: vec![16, 8, 16],
            lambda_e: 0.0,
            lambda_tau: 0.0,
            deployment: DeploymentConfig::default(),
            acoustic: AcousticParams::default(),
            sgd: SgdConfig::default(),
            method: MethodSpec::default(),
            compression: CompressionConfig::default(),
            data: SynthConfig::default(),
            benchmark: None,
            energy: EnergyConfig::default(),
            mobility: MobilityConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::config("percentile must lie in (0, 100]"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden_layers must be positive"));
        }
        if !(self.lambda_e >= 0.0 && self.lambda_tau >= 0.0) {
            return Err(Error::config("lambda_e and lambda_tau must be non-negative"));
        }
        if self.grid.methods.is_empty() || self.grid.n_sensors.contains(&0) {
            return Err(Error::config("grid needs at least one method and positive scales"));
        }
        self.deployment.validate()?;
        self.acoustic.validate().map_err(|e| Error::config(format!("acoustic: {e}")))?;
        self.sgd.validate()?;
        self.method.validate()?;
        self.compression.validate()?;
        if self.benchmark.is_none() {
            self.data.validate()?;
        }
        self.energy.validate()?;
        self.mobility.validate()?;
        Ok(())
    }
}

/// Reads and validates a config file. Parse errors carry line and column.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Error::load(path, e.to_string()))
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<MethodKind>,
    pub n_sensors: Option<usize>,
    pub rounds: Option<usize>,
    pub rho_s: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(m) = self.method {
            cfg.method.kind = m;
            cfg.grid.methods = vec![m];
        }
        if let Some(n) = self.n_sensors {
            cfg.deployment.n_sensors = n;
            cfg.grid.n_sensors = vec![n];
        }
        if let Some(t) = self.rounds {
            cfg.rounds = t;
        }
        if let Some(r) = self.rho_s {
            cfg.compression.rho_s = r;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.acoustic, AcousticParams::default());
        assert_eq!(cfg.deployment.fog_count(), 10);
        assert_eq!((cfg.rounds, cfg.sgd.epochs, cfg.sgd.lr), (20, 5, 0.01));
        assert_eq!(cfg.energy.e_init, 500.0);
    }

    #[test]
    fn sections_are_read() {
        let cfg = ExperimentConfig::from_toml(
            "rounds = 7\n[method]\nkind = \"hfl-nearest\"\n[compression]\nrho_s = 0.1\nquantize = false\n[deployment]\nn_sensors = 50\n",
        )
        .unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.method.kind, MethodKind::HflNearest);
        assert_eq!(cfg.compression.rho_s, 0.1);
        assert!(!cfg.compression.quantize);
        assert_eq!(cfg.deployment.fog_count(), 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = ExperimentConfig::from_toml("[sgd]\nepochz = 3\n").unwrap_err().to_string();
        assert!(err.contains("epochz") && err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("[method]\nkind = \"fedsgd\"\n").unwrap_err().to_string();
        assert!(err.contains("fedavg") && err.contains("hfl-selective"), "{err}");
        assert!(ExperimentConfig::from_toml("[compression]\nrho_s = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nseed = 4\n").is_err());
    }

    #[test]
    fn overrides_beat_file_beat_defaults() {
        let mut cfg = ExperimentConfig::from_toml("rounds = 7\n[compression]\nrho_s = 0.1\n").unwrap();
        Overrides {
            rounds: Some(3),
            seed: Some(9),
            ..Default::default()
        }
        .apply(&mut cfg)
        .unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.compression.rho_s, 0.1);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.sgd, SgdConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.method.kind = MethodKind::FedProx;
        cfg.output_dir = Some("out".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
