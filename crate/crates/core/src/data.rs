//! Local datasets: the synthetic non-IID generator and ingestion of
//! benchmark-format (SMD / SMAP / MSL style) directories.
//!
//! Benchmark layout, one directory per entity:
//!
//! ```text
//! <root>/<entity>/train.csv   numeric rows, comma separated, no header
//! <root>/<entity>/test.csv    same width as train.csv
//! <root>/<entity>/labels.csv  one 0/1 per test row
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Dense row-major matrix of feature vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "matrix buffer has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::domain(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; an empty-width matrix has no usable rows anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stacked(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::domain("cannot stack matrices of different widths"));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix::new(self.rows + other.rows, cols, data)
    }

    pub fn select_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }
}

/// One sensor's (or benchmark entity's) data. Train and validation splits
/// are normal-only.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
    pub test_labels: Vec<bool>,
}

impl LocalDataset {
    pub fn dim(&self) -> usize {
        self.train.cols()
    }

    /// `n_i`, the aggregation weight.
    pub fn n_samples(&self) -> usize {
        self.train.rows()
    }

    /// Z-scores every split with statistics from the train split.
    pub fn standardize(&mut self) {
        let st = Standardizer::fit(&self.train);
        st.apply(&mut self.train);
        st.apply(&mut self.val);
        st.apply(&mut self.test);
    }
}

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &Matrix) -> Self {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for (acc, x) in mean.iter_mut().zip(row) {
                *acc += x;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for ((acc, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (x - mu) * (x - mu);
            }
        }
        // constant features pass through centred but unscaled
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, m: &mut Matrix) {
        for i in 0..m.rows() {
            for ((x, mu), s) in m.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - mu) / s;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Set per run from the deployment.
    #[serde(skip)]
    pub n_sensors: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_modes: usize,
    pub dirichlet_alpha: f64,
    pub anomaly_rate: f64,
    /// Offset magnitude range in units of `mode_sigma`.
    pub anomaly_magnitude: [f64; 2],
    pub mode_sigma: f64,
    /// Fraction of features perturbed inside an anomalous segment.
    pub anomaly_feature_fraction: f64,
    pub mean_segment_len: f64,
    /// Set per run from the run seed.
    #[serde(skip)]
    pub seed: u64,
    /// Separate stream for anomaly placement; `None` derives it from `seed`.
    pub anomaly_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sensors: 100,
            dim: 32,
            n_train: 600,
            n_val: 200,
            n_test: 400,
            n_modes: 10,
            dirichlet_alpha: 1.0,
            anomaly_rate: 0.05,
            anomaly_magnitude: [3.0, 6.0],
            mode_sigma: 0.1,
            anomaly_feature_fraction: 0.25,
            mean_segment_len: 5.0,
            seed: 0,
            anomaly_seed: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_modes == 0 {
            return Err(Error::config("data.dim and data.n_modes must be positive"));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("data.n_train, n_val and n_test must be positive"));
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return Err(Error::config("data.dirichlet_alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return Err(Error::config("data.anomaly_rate must lie in [0, 1)"));
        }
        let [lo, hi] = self.anomaly_magnitude;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::config("data.anomaly_magnitude must be an increasing pair"));
        }
        if !(self.mode_sigma > 0.0) {
            return Err(Error::config("data.mode_sigma must be positive"));
        }
        if !(self.anomaly_feature_fraction > 0.0 && self.anomaly_feature_fraction <= 1.0) {
            return Err(Error::config("data.anomaly_feature_fraction must lie in (0, 1]"));
        }
        if !(self.mean_segment_len >= 1.0) {
            return Err(Error::config("data.mean_segment_len must be at least 1"));
        }
        Ok(())
    }

    fn anomaly_seed(&self) -> u64 {
        self.anomaly_seed
            .unwrap_or_else(|| seeds::derive(self.seed, seeds::ANOMALIES, 0, 0))
    }
}

/// One Dirichlet(α, ..., α) draw per sensor, via normalised Gamma(α, 1)
/// variates.
pub fn dirichlet_partition(
    n_modes: usize,
    alpha: f64,
    n_sensors: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if n_modes == 0 {
        return Err(Error::domain("need at least one mode"));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::domain(format!("invalid Dirichlet concentration {alpha}: {e}")))?;
    Ok((0..n_sensors)
        .map(|_| {
            let mut w: Vec<f64> = (0..n_modes).map(|_| gamma.sample(rng)).collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 && total.is_finite() {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                // every variate underflowed; fall back to a vertex of the simplex
                let k = rng.random_range(0..n_modes);
                w.iter_mut().enumerate().for_each(|(i, v)| *v = (i == k) as u8 as f64);
            }
            w
        })
        .collect())
}

/// Synthetic per-sensor datasets.
///
/// `n_modes` global Gaussian modes with means uniform in `[-1, 1]^dim` and
/// isotropic spread `mode_sigma`. Each sensor mixes the modes with its own
/// Dirichlet weights. Test splits carry contiguous anomalous segments
/// (geometric lengths) in which a random subset of features is shifted by a
/// constant `±U[lo, hi]·mode_sigma`. Anomalies come from their own RNG
/// stream, so the underlying normal samples do not depend on them.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<LocalDataset>> {
    cfg.validate()?;
    let mut mode_rng = seeds::stream(cfg.seed, seeds::MODES, 0, 0);
    let modes: Vec<Vec<f64>> = (0..cfg.n_modes)
        .map(|_| (0..cfg.dim).map(|_| mode_rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut mix_rng = seeds::stream(cfg.seed, seeds::MIXTURE, 0, 0);
    let weights = dirichlet_partition(cfg.n_modes, cfg.dirichlet_alpha, cfg.n_sensors, &mut mix_rng)?;
    let noise = Normal::new(0.0, cfg.mode_sigma).map_err(|e| Error::domain(e.to_string()))?;

    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let picker = WeightedIndex::new(w).map_err(|e| Error::domain(e.to_string()))?;
            let mut rng = seeds::stream(cfg.seed, seeds::SAMPLES, i as u64, 0);
            let mut draw = |n: usize| -> Matrix {
                let mut m = Matrix::zeros(n, cfg.dim);
                for r in 0..n {
                    let mode = &modes[picker.sample(&mut rng)];
                    for (x, mu) in m.row_mut(r).iter_mut().zip(mode) {
                        *x = mu + noise.sample(&mut rng);
                    }
                }
                m
            };
            let train = draw(cfg.n_train);
            let val = draw(cfg.n_val);
            let mut test = draw(cfg.n_test);
            let mut arng = seeds::stream(cfg.anomaly_seed(), seeds::ANOMALIES, i as u64, 0);
            let test_labels = inject_anomalies(&mut test, cfg, &mut arng)?;
            Ok(LocalDataset {
                train,
                val,
                test,
                test_labels,
            })
        })
        .collect()
}

fn inject_anomalies(test: &mut Matrix, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let n = test.rows();
    let mut labels = vec![false; n];
    let target = (cfg.anomaly_rate * n as f64).round() as usize;
    if target == 0 {
        return Ok(labels);
    }
    let geo = Geometric::new(1.0 / cfg.mean_segment_len).map_err(|e| Error::domain(e.to_string()))?;
    let n_feat = ((cfg.anomaly_feature_fraction * cfg.dim as f64).round() as usize).clamp(1, cfg.dim);
    let [lo, hi] = cfg.anomaly_magnitude;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < target && attempts < 10_000 {
        attempts += 1;
        let len = (1 + geo.sample(rng) as usize).min(target - placed).min(n);
        let start = rng.random_range(0..=n - len);
        // keep a one-row gap so segments stay distinct
        let guard_lo = start.saturating_sub(1);
        let guard_hi = (start + len + 1).min(n);
        if labels[guard_lo..guard_hi].iter().any(|&l| l) {
            continue;
        }
        let feats = index::sample(rng, cfg.dim, n_feat);
        let offsets: Vec<(usize, f64)> = feats
            .iter()
            .map(|f| {
                let mag = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (f, sign * mag * cfg.mode_sigma)
            })
            .collect();
        for r in start..start + len {
            labels[r] = true;
            let row = test.row_mut(r);
            for &(f, off) in &offsets {
                row[f] += off;
            }
        }
        placed += len;
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkKind {
    Smd,
    Smap,
    Msl,
}

impl BenchmarkKind {
    pub fn dim(self) -> usize {
        match self {
            BenchmarkKind::Smd => 38,
            BenchmarkKind::Smap => 25,
            BenchmarkKind::Msl => 55,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub root: PathBuf,
    /// Entity directory names; empty means every subdirectory, sorted.
    pub entities: Vec<String>,
    pub dim: usize,
    /// Consecutive rows concatenated into one feature vector.
    pub window: usize,
    pub stride: usize,
    /// Tail fraction of the (normal) train series held out for threshold
    /// calibration.
    pub val_fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            entities: Vec::new(),
            dim: BenchmarkKind::Smd.dim(),
            window: 1,
            stride: 1,
            val_fraction: 0.2,
        }
    }
}

impl BenchmarkSpec {
    pub fn for_kind(kind: BenchmarkKind, root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            dim: kind.dim(),
            ..Default::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.dim * self.window
    }

    pub fn entity_names(&self) -> Result<Vec<String>> {
        if !self.entities.is_empty() {
            return Ok(self.entities.clone());
        }
        let mut names = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| Error::load(&self.root, e.to_string()))?;
        for entry in entries {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::load(&self.root, "no entity directories found"));
        }
        Ok(names)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))
}

/// Reads a headerless numeric CSV; `expected_cols` guards against mixing up
/// datasets.
pub fn read_matrix(path: &Path, expected_cols: Option<usize>) -> Result<Matrix> {
    let mut rdr = csv_reader(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let width = rec.len();
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::load(
                    path,
                    format!("line {}: {width} columns, expected {c}", line + 1),
                ))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| {
                Error::load(path, format!("line {}: not a number: {field:?}", line + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(expected_cols.unwrap_or(0));
    if let Some(want) = expected_cols {
        if cols != want {
            return Err(Error::load(path, format!("has {cols} features, expected {want}")));
        }
    }
    Matrix::new(rows, cols, data)
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let m = read_matrix(path, None)?;
    if m.rows() > 0 && m.cols() != 1 {
        return Err(Error::load(path, "label file must have exactly one column"));
    }
    m.as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            _ => Err(Error::load(path, format!("line {}: label must be 0 or 1", i + 1))),
        })
        .collect()
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[bool]) -> Result<()> {
    let text: String = labels.iter().map(|&l| if l { "1\n" } else { "0\n" }).collect();
    fs::write(path, text)?;
    Ok(())
}

fn windowed(m: &Matrix, window: usize, stride: usize) -> (Matrix, Vec<usize>) {
    if window <= 1 && stride <= 1 {
        return (m.clone(), (0..m.rows()).collect());
    }
    let mut ends = Vec::new();
    let mut end = window - 1;
    while end < m.rows() {
        ends.push(end);
        end += stride;
    }
    let cols = m.cols() * window;
    let mut data = Vec::with_capacity(ends.len() * cols);
    for &e in &ends {
        for r in e + 1 - window..=e {
            data.extend_from_slice(m.row(r));
        }
    }
    (Matrix::new(ends.len(), cols, data).expect("window shape"), ends)
}

fn load_entity(spec: &BenchmarkSpec, name: &str) -> Result<LocalDataset> {
    let dir = spec.root.join(name);
    let train_raw = read_matrix(&dir.join("train.csv"), Some(spec.dim))?;
    let test_raw = read_matrix(&dir.join("test.csv"), Some(spec.dim))?;
    let labels_raw = read_labels(&dir.join("labels.csv"))?;
    if labels_raw.len() != test_raw.rows() {
        return Err(Error::load(
            dir.join("labels.csv"),
            format!("{} labels for {} test rows", labels_raw.len(), test_raw.rows()),
        ));
    }
    let window = spec.window.max(1);
    let stride = spec.stride.max(1);
    let (train_all, _) = windowed(&train_raw, window, stride);
    let (test, ends) = windowed(&test_raw, window, stride);
    let test_labels = ends.iter().map(|&e| labels_raw[e]).collect();
    if train_all.rows() < 2 {
        return Err(Error::load(&dir, "train split needs at least two feature vectors"));
    }
    let n_val = ((spec.val_fraction * train_all.rows() as f64).round() as usize)
        .clamp(1, train_all.rows() - 1);
    let n_train = train_all.rows() - n_val;
    let mut ds = LocalDataset {
        train: train_all.select_rows(0..n_train),
        val: train_all.select_rows(n_train..train_all.rows()),
        test,
        test_labels,
    };
    ds.standardize();
    Ok(ds)
}

/// Loads every entity, z-scored with its own train statistics. Entities map
/// one-to-one onto sensors in the returned order.
pub fn load_benchmark(spec: &BenchmarkSpec) -> Result<Vec<(String, LocalDataset)>> {
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::config("benchmark val_fraction must lie in [0, 1)"));
    }
    spec.entity_names()?
        .into_iter()
        .map(|name| load_entity(spec, &name).map(|ds| (name, ds)))
        .collect()
}

/// Writes datasets in the benchmark layout (`sensor_000`, ...). The train
/// file holds train rows followed by validation rows.
pub fn dump_datasets(root: &Path, datasets: &[LocalDataset]) -> Result<()> {
    for (i, ds) in datasets.iter().enumerate() {
        let dir = root.join(format!("sensor_{i:03}"));
        fs::create_dir_all(&dir)?;
        write_matrix(&dir.join("train.csv"), &ds.train.stacked(&ds.val)?)?;
        write_matrix(&dir.join("test.csv"), &ds.test)?;
        write_labels(&dir.join("labels.csv"), &ds.test_labels)?;
    }
    Ok(())
}
