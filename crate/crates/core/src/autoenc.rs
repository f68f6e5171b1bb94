//! Symmetric MLP autoencoder used as the anomaly detector.
//!
//! Parameters live in one flat vector so that compression indices refer to
//! the same coordinates everywhere. Canonical order, layer by layer:
//! the weight matrix `W` (`n_out x n_in`, row-major) followed by the bias
//! vector `b` (`n_out`). Hidden layers apply ReLU; the output layer is
//! affine.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_LAYERS: [usize; 5] = [32, 16, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layer_sizes: Vec<usize>,
    pub values: Vec<f64>,
}

/// Number of parameters of an MLP with the given layer widths.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_layers(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::domain(format!(
            "layer sizes {layer_sizes:?} must list at least two positive widths"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_layers(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values: vec![0.0; param_count(layer_sizes)],
        })
    }

    pub fn from_values(layer_sizes: &[usize], values: Vec<f64>) -> Result<Self> {
        check_layers(layer_sizes)?;
        let want = param_count(layer_sizes);
        if values.len() != want {
            return Err(Error::domain(format!(
                "{} parameter values for layers {layer_sizes:?}, expected {want}",
                values.len()
            )));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            values,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, n_in, n_out) = self.layer_offset(l);
        let w = &self.values[off..off + n_in * n_out];
        let b = &self.values[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (off, n_in, n_out) = self.layer_offset(l);
        let (w, rest) = self.values[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let off = param_count(&self.layer_sizes[..=l]);
        (off, self.layer_sizes[l], self.layer_sizes[l + 1])
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Writes the values as little-endian f64 to `path` and a JSON header
    /// (`layer_sizes`, `d_params`) next to it with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        let header = ModelHeader {
            layer_sizes: self.layer_sizes.clone(),
            d_params: self.values.len(),
        };
        fs::write(header_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let hp = header_path(path);
        let header: ModelHeader = serde_json::from_str(
            &fs::read_to_string(&hp).map_err(|e| Error::load(&hp, e.to_string()))?,
        )
        .map_err(|e| Error::load(&hp, e.to_string()))?;
        let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        if bytes.len() != header.d_params * 8 {
            return Err(Error::load(
                path,
                format!("{} bytes, header declares {} values", bytes.len(), header.d_params),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(&header.layer_sizes, values).map_err(|e| Error::load(path, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    layer_sizes: Vec<usize>,
    d_params: usize,
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(layer_sizes: &[usize], rng: &mut impl Rng) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(layer_sizes)?;
    for l in 0..p.n_layers() {
        let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let (w, _) = p.layer_mut(l);
        for v in w {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal coefficient; 0 gives the plain local step.
    pub prox_mu: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            batch_size: 32,
            prox_mu: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("sgd.epochs must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("sgd.lr must be a non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sgd.batch_size must be at least 1"));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::config("prox_mu must be non-negative"));
        }
        Ok(())
    }
}

/// Forward/backward scratch space for one mini-batch.
struct Workspace {
    /// Post-activation outputs per layer, `acts[0]` is the input batch.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    rows: usize,
}

impl Workspace {
    fn new(layer_sizes: &[usize], rows: usize) -> Self {
        Self {
            acts: layer_sizes.iter().map(|&n| vec![0.0; n * rows]).collect(),
            deltas: layer_sizes.iter().map(|&n| vec![0.0; n * rows]).collect(),
            rows,
        }
    }

    fn resize(&mut self, layer_sizes: &[usize], rows: usize) {
        if rows != self.rows {
            for (a, &n) in self.acts.iter_mut().zip(layer_sizes) {
                a.resize(n * rows, 0.0);
            }
            for (d, &n) in self.deltas.iter_mut().zip(layer_sizes) {
                d.resize(n * rows, 0.0);
            }
            self.rows = rows;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn forward_batch(p: &ModelParams, ws: &mut Workspace) {
    let sizes = &p.layer_sizes;
    let last = p.n_layers() - 1;
    for l in 0..=last {
        let (w, b) = p.layer(l);
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        let input = &lo[l];
        let output = &mut hi[0];
        for r in 0..ws.rows {
            let x = &input[r * n_in..(r + 1) * n_in];
            let y = &mut output[r * n_out..(r + 1) * n_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let z = dot(&w[o * n_in..(o + 1) * n_in], x) + b[o];
                *yo = if l < last { z.max(0.0) } else { z };
            }
        }
    }
}

/// Backpropagates the mean squared reconstruction loss of the batch held in
/// `ws.acts[0]` (after `forward_batch`), accumulating into `grad`. Returns
/// the batch loss.
fn backward_batch(p: &ModelParams, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
    let sizes = &p.layer_sizes;
    let nl = p.n_layers();
    let d_out = sizes[nl];
    let scale = 2.0 / ws.rows as f64;
    let mut loss = 0.0;
    {
        let out = &ws.acts[nl];
        let x = &ws.acts[0];
        let delta = &mut ws.deltas[nl];
        for k in 0..ws.rows * d_out {
            let e = out[k] - x[k];
            loss += e * e;
            delta[k] = scale * e;
        }
    }
    for l in (0..nl).rev() {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let off = param_count(&sizes[..=l]);
        let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        let (w, _) = p.layer(l);
        let (dlo, dhi) = ws.deltas.split_at_mut(l + 1);
        let delta = &dhi[0];
        let a_in = &ws.acts[l];
        for r in 0..ws.rows {
            let d = &delta[r * n_out..(r + 1) * n_out];
            let a = &a_in[r * n_in..(r + 1) * n_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv != 0.0 {
                    axpy(dv, a, &mut gw[o * n_in..(o + 1) * n_in]);
                    gb[o] += dv;
                }
            }
        }
        if l > 0 {
            let prev = &mut dlo[l];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..ws.rows {
                let d = &delta[r * n_out..(r + 1) * n_out];
                let pr = &mut prev[r * n_in..(r + 1) * n_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, &w[o * n_in..(o + 1) * n_in], pr);
                    }
                }
                // ReLU derivative, taken as 0 at the kink
                for (g, &a) in pr.iter_mut().zip(&a_in[r * n_in..(r + 1) * n_in]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
    }
    loss / ws.rows as f64
}

fn load_rows(ws: &mut Workspace, m: &Matrix, rows: impl Iterator<Item = usize>) {
    let d = m.cols();
    for (k, r) in rows.enumerate() {
        ws.acts[0][k * d..(k + 1) * d].copy_from_slice(m.row(r));
    }
}

fn check_input(p: &ModelParams, m: &Matrix) -> Result<()> {
    if m.cols() != p.input_dim() || p.input_dim() != p.output_dim() {
        return Err(Error::domain(format!(
            "data width {} does not match autoencoder {:?}",
            m.cols(),
            p.layer_sizes
        )));
    }
    Ok(())
}

pub fn forward(p: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != p.input_dim() {
        return Err(Error::domain(format!("input has {} values, expected {}", x.len(), p.input_dim())));
    }
    let mut ws = Workspace::new(&p.layer_sizes, 1);
    ws.acts[0].copy_from_slice(x);
    forward_batch(p, &mut ws);
    Ok(ws.acts[p.n_layers()].clone())
}

/// Per-sample squared reconstruction error.
pub fn scores(p: &ModelParams, m: &Matrix) -> Result<Vec<f64>> {
    check_input(p, m)?;
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(m.rows());
    let mut ws = Workspace::new(&p.layer_sizes, CHUNK.min(m.rows()));
    let nl = p.n_layers();
    let d = m.cols();
    let mut start = 0;
    while start < m.rows() {
        let end = (start + CHUNK).min(m.rows());
        ws.resize(&p.layer_sizes, end - start);
        load_rows(&mut ws, m, start..end);
        forward_batch(p, &mut ws);
        for k in 0..end - start {
            let x = &ws.acts[0][k * d..(k + 1) * d];
            let y = &ws.acts[nl][k * d..(k + 1) * d];
            out.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
        }
        start = end;
    }
    Ok(out)
}

/// Mean squared reconstruction error over the rows of `m`.
pub fn loss(p: &ModelParams, m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::domain("loss of an empty batch"));
    }
    let s = scores(p, m)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Exact gradient of [`loss`] with respect to the flat parameter vector.
pub fn gradient(p: &ModelParams, m: &Matrix) -> Result<Vec<f64>> {
    check_input(p, m)?;
    if m.is_empty() {
        return Err(Error::domain("gradient of an empty batch"));
    }
    let mut ws = Workspace::new(&p.layer_sizes, m.rows());
    load_rows(&mut ws, m, 0..m.rows());
    forward_batch(p, &mut ws);
    let mut g = vec![0.0; p.len()];
    backward_batch(p, &mut ws, &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(g)
}

/// Floating-point operations charged per sample and parameter for one
/// forward plus backward pass.
pub const FLOPS_PER_PARAM_SAMPLE: u64 = 6;

/// `epochs` passes of shuffled mini-batch SGD from `start`. With
/// `prox_mu > 0` each step adds `prox_mu * (theta - start)` to the gradient.
/// Returns the trained parameters and the FLOP count used for energy
/// accounting.
pub fn local_sgd(
    start: &ModelParams,
    train: &Matrix,
    cfg: &SgdConfig,
    rng: &mut impl Rng,
) -> Result<(ModelParams, u64)> {
    check_input(start, train)?;
    if train.is_empty() {
        return Err(Error::domain("local training set is empty"));
    }
    let mut p = start.clone();
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let bs = cfg.batch_size.max(1);
    let mut ws = Workspace::new(&p.layer_sizes, bs.min(train.rows()));
    let mut g = vec![0.0; p.len()];
    let mut seen = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(bs) {
            ws.resize(&p.layer_sizes, batch.len());
            load_rows(&mut ws, train, batch.iter().copied());
            forward_batch(&p, &mut ws);
            g.iter_mut().for_each(|v| *v = 0.0);
            let batch_loss = backward_batch(&p, &mut ws, &mut g);
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("local training diverged in epoch {epoch}")));
            }
            if cfg.prox_mu > 0.0 {
                for ((v, gi), s) in p.values.iter_mut().zip(&g).zip(&start.values) {
                    *v -= cfg.lr * (gi + cfg.prox_mu * (*v - s));
                }
            } else {
                axpy(-cfg.lr, &g, &mut p.values);
            }
            seen += batch.len() as u64;
        }
    }
    if !p.is_finite() {
        return Err(Error::Numeric("local training produced non-finite parameters".into()));
    }
    let flops = FLOPS_PER_PARAM_SAMPLE * p.len() as u64 * seen;
    Ok((p, flops))
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn calibrate_threshold(errors: &[f64], p: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::domain("cannot calibrate a threshold on no errors"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::domain(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

pub fn flag(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}
