//! Sensor uplink compression: Top-K sparsification with error feedback and
//! symmetric 8-bit quantisation, plus payload accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of an uncompressed parameter on the wire.
pub const FULL_PRECISION_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Fraction of coordinates kept per sensor upload.
    pub rho_s: f64,
    pub quantize: bool,
    pub b_q: u32,
    /// Fog-to-fog payload; `None` is full precision `32·d`.
    pub fog_payload_bits: Option<u64>,
    /// Fog-to-gateway payload; `None` is full precision `32·d`.
    pub gateway_payload_bits: Option<u64>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            rho_s: 0.05,
            quantize: true,
            b_q: 8,
            fog_payload_bits: None,
            gateway_payload_bits: None,
        }
    }
}

impl CompressionConfig {
    /// Dense, full-precision uploads.
    pub fn uncompressed() -> Self {
        Self {
            rho_s: 1.0,
            quantize: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_s > 0.0 && self.rho_s <= 1.0) {
            return Err(Error::config(format!("compression.rho_s = {} must lie in (0, 1]", self.rho_s)));
        }
        if self.quantize && self.b_q != 8 {
            return Err(Error::config("only 8-bit quantisation is implemented (compression.b_q = 8)"));
        }
        Ok(())
    }

    pub fn value_bits(&self) -> u32 {
        if self.quantize {
            self.b_q
        } else {
            FULL_PRECISION_BITS
        }
    }

    /// Index bits per kept coordinate; dense uploads need none.
    pub fn index_bits(&self, d: usize) -> u32 {
        if topk_count(self.rho_s, d) >= d {
            0
        } else {
            index_bits(d)
        }
    }

    pub fn sensor_payload_bits(&self, d: usize) -> u64 {
        topk_count(self.rho_s, d) as u64 * u64::from(self.value_bits() + self.index_bits(d))
    }

    pub fn fog_bits(&self, d: usize) -> u64 {
        self.fog_payload_bits.unwrap_or(FULL_PRECISION_BITS as u64 * d as u64)
    }

    pub fn gateway_bits(&self, d: usize) -> u64 {
        self.gateway_payload_bits.unwrap_or(FULL_PRECISION_BITS as u64 * d as u64)
    }

    /// Payload relative to a dense full-precision upload.
    pub fn effective_ratio(&self, d: usize) -> f64 {
        self.sensor_payload_bits(d) as f64 / (FULL_PRECISION_BITS as f64 * d as f64)
    }
}

/// `ceil(log2 d)`; zero for `d <= 1`.
pub fn index_bits(d: usize) -> u32 {
    if d <= 1 {
        0
    } else {
        usize::BITS - (d - 1).leading_zeros()
    }
}

/// `K = ceil(rho_s · d)`, at least one. Products that land within rounding
/// noise of an integer are not pushed up to the next one.
pub fn topk_count(rho_s: f64, d: usize) -> usize {
    let x = rho_s * d as f64;
    let k = (x - 1e-9 * x.max(1.0)).ceil();
    (k.max(1.0) as usize).min(d.max(1))
}

/// `ceil(rho_s·d)·(b_q + b_idx)`.
pub fn payload_bits(rho_s: f64, d: usize, b_q: u32, b_idx: u32) -> u64 {
    topk_count(rho_s, d) as u64 * u64::from(b_q + b_idx)
}

/// Per-sensor residual of coordinates not yet transmitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBuffer {
    pub residual: Vec<f64>,
}

impl ErrorBuffer {
    pub fn zeros(d: usize) -> Self {
        Self {
            residual: vec![0.0; d],
        }
    }
}

/// A sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Keeps the `K = ceil(rho_s·d)` largest-magnitude coordinates of
/// `update + buf` (ties to the lower index) and stores what was dropped back
/// into `buf`.
pub fn topk_ef(update: &[f64], buf: &mut ErrorBuffer, rho_s: f64) -> Result<SparseVec> {
    let d = update.len();
    if buf.residual.len() != d {
        return Err(Error::domain(format!(
            "update has {d} coordinates but error buffer has {}",
            buf.residual.len()
        )));
    }
    if !(rho_s > 0.0 && rho_s <= 1.0) {
        return Err(Error::domain(format!("rho_s = {rho_s} outside (0, 1]")));
    }
    let v: Vec<f64> = update.iter().zip(&buf.residual).map(|(u, e)| u + e).collect();
    let k = topk_count(rho_s, d).min(d);
    let mut order: Vec<u32> = (0..d as u32).collect();
    let by_magnitude = |a: &u32, b: &u32| {
        v[*b as usize]
            .abs()
            .total_cmp(&v[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < d {
        order.select_nth_unstable_by(k, by_magnitude);
        order.truncate(k);
    }
    order.sort_unstable();
    let values: Vec<f64> = order.iter().map(|&i| v[i as usize]).collect();
    buf.residual.copy_from_slice(&v);
    for &i in &order {
        buf.residual[i as usize] = 0.0;
    }
    Ok(SparseVec {
        dim: d,
        indices: order,
        values,
    })
}

/// Symmetric linear 8-bit quantisation: `scale = max|v|/127`,
/// `q = round(v/scale)`.
pub fn quantize(values: &[f64]) -> Result<(Vec<i8>, f64)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot quantise non-finite values".into()));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let scale = max / 127.0;
    let q = values
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((q, scale))
}

pub fn dequantize(q: &[i8], scale: f64) -> Vec<f64> {
    q.iter().map(|&x| f64::from(x) * scale).collect()
}

/// One sensor's compressed upload.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    pub dim: usize,
    pub indices: Vec<u32>,
    /// Quantised values, present when quantisation is on.
    pub qvalues: Option<Vec<i8>>,
    pub scale: f64,
    /// Full-precision kept values, used when quantisation is off.
    pub raw: Vec<f64>,
    pub payload_bits: u64,
    pub n_samples: usize,
}

impl CompressedUpdate {
    /// Compresses `update` through the sensor's error buffer.
    pub fn encode(
        update: &[f64],
        buf: &mut ErrorBuffer,
        cfg: &CompressionConfig,
        n_samples: usize,
    ) -> Result<Self> {
        let dim = update.len();
        let kept = topk_ef(update, buf, cfg.rho_s)?;
        let payload_bits = cfg.sensor_payload_bits(dim);
        if cfg.quantize {
            let (q, scale) = quantize(&kept.values)?;
            // the quantisation error also feeds back into the next round
            for ((&i, &v), &qi) in kept.indices.iter().zip(&kept.values).zip(&q) {
                buf.residual[i as usize] += v - f64::from(qi) * scale;
            }
            Ok(Self {
                dim,
                indices: kept.indices,
                qvalues: Some(q),
                scale,
                raw: Vec::new(),
                payload_bits,
                n_samples,
            })
        } else {
            Ok(Self {
                dim,
                indices: kept.indices,
                qvalues: None,
                scale: 1.0,
                raw: kept.values,
                payload_bits,
                n_samples,
            })
        }
    }

    /// The update as the receiver reconstructs it.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        match &self.qvalues {
            Some(q) => {
                for (&i, &x) in self.indices.iter().zip(q) {
                    out[i as usize] = f64::from(x) * self.scale;
                }
            }
            None => {
                for (&i, &x) in self.indices.iter().zip(&self.raw) {
                    out[i as usize] = x;
                }
            }
        }
        out
    }

    /// Wire image of a quantised update: `scale` (f32 LE), `K` (u32 LE), then
    /// `K` packed records of `b_idx` index bits and 8 value bits, MSB first.
    pub fn to_wire(&self) -> Result<Vec<u8>> {
        let q = self
            .qvalues
            .as_ref()
            .ok_or_else(|| Error::domain("only quantised updates have a wire format"))?;
        let b_idx = index_bits(self.dim);
        let mut out = Vec::new();
        out.extend_from_slice(&(self.scale as f32).to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        let mut w = BitWriter::default();
        for (&i, &x) in self.indices.iter().zip(q) {
            w.push(u64::from(i), b_idx);
            w.push(u64::from(x as u8), 8);
        }
        out.extend(w.finish());
        Ok(out)
    }

    pub fn from_wire(bytes: &[u8], dim: usize, n_samples: usize) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::domain("wire image shorter than its header"));
        }
        let scale = f32::from_le_bytes(bytes[0..4].try_into().unwrap()) as f64;
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let b_idx = index_bits(dim);
        let record = b_idx as usize + 8;
        if bytes.len() - 8 < (k * record).div_ceil(8) {
            return Err(Error::domain("wire image truncated"));
        }
        let mut r = BitReader::new(&bytes[8..]);
        let mut indices = Vec::with_capacity(k);
        let mut q = Vec::with_capacity(k);
        for _ in 0..k {
            let i = r.take(b_idx) as u32;
            if i as usize >= dim {
                return Err(Error::domain(format!("index {i} outside dimension {dim}")));
            }
            indices.push(i);
            q.push(r.take(8) as u8 as i8);
        }
        Ok(Self {
            dim,
            indices,
            qvalues: Some(q),
            scale,
            raw: Vec::new(),
            payload_bits: (k * record) as u64,
            n_samples,
        })
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, bits: u32) {
        for b in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> b) & 1);
            self.n += 1;
            if self.n == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.n = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.bytes.push((self.acc << (8 - self.n)) as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, bits: u32) -> u64 {
        let mut v = 0;
        for _ in 0..bits {
            let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | u64::from(bit);
            self.pos += 1;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_worked_topk() {
        let mut buf = ErrorBuffer::zeros(4);
        let kept = topk_ef(&[3.0, -1.0, 0.5, 2.0], &mut buf, 0.5).unwrap();
        assert_eq!(kept.to_dense(), vec![3.0, 0.0, 0.0, 2.0]);
        assert_eq!(buf.residual, vec![0.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn full_retention_keeps_everything() {
        let mut buf = ErrorBuffer::zeros(3);
        let kept = topk_ef(&[0.0, -2.0, 1.5], &mut buf, 1.0).unwrap();
        assert_eq!(kept.to_dense(), vec![0.0, -2.0, 1.5]);
        assert!(buf.residual.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mut buf = ErrorBuffer::zeros(4);
        let kept = topk_ef(&[1.0, -1.0, 1.0, 1.0], &mut buf, 0.5).unwrap();
        assert_eq!(kept.indices, vec![0, 1]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut buf = ErrorBuffer::zeros(3);
        assert!(topk_ef(&[1.0, 2.0], &mut buf, 0.5).is_err());
    }

    #[test]
    fn payload_accounting() {
        assert_eq!(topk_count(0.05, 1352), 68);
        assert_eq!(index_bits(1352), 11);
        assert_eq!(index_bits(1), 0);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(1024), 10);
        assert_eq!(payload_bits(0.05, 1352, 8, 11), 1292);
        assert_eq!(payload_bits(1.0, 1352, 32, 0), 43264);
        assert_eq!(payload_bits(1.0, 1, 8, 0), 8);
        assert_eq!(CompressionConfig::default().sensor_payload_bits(1352), 1292);
        assert_eq!(CompressionConfig::uncompressed().sensor_payload_bits(1352), 43264);
        assert_eq!(CompressionConfig::default().fog_bits(1352), 43264);
        let r = CompressionConfig::default().effective_ratio(1352);
        assert!((r - 0.0299).abs() < 1e-4);
    }

    #[test]
    fn quantize_hand_values() {
        let (q, s) = quantize(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(q, vec![-127, 0, 127]);
        assert!((s - 1.0 / 127.0).abs() < 1e-18);
        let (q, s) = quantize(&[0.0, 0.0]).unwrap();
        assert_eq!((q, s), (vec![0, 0], 0.0));
        assert_eq!(dequantize(&[0, 0], 0.0), vec![0.0, 0.0]);
        assert!(quantize(&[f64::NAN]).is_err());
    }

    /// Dyadic values keep every sum exact, so the identity can be checked
    /// with equality.
    fn dyadic(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| f64::from(rng.random_range(-512i32..512)) / 64.0).collect()
    }

    #[test]
    fn repeated_update_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = dyadic(&mut rng, 20);
        let mut buf = ErrorBuffer::zeros(20);
        let k1 = topk_ef(&u, &mut buf, 0.25).unwrap().to_dense();
        let k2 = topk_ef(&u, &mut buf, 0.25).unwrap().to_dense();
        for i in 0..20 {
            assert_eq!(k1[i] + k2[i] + buf.residual[i], 2.0 * u[i]);
        }
    }

    #[test]
    fn identity_when_dense_and_unquantised() {
        let cfg = CompressionConfig::uncompressed();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut buf = ErrorBuffer::zeros(50);
        let c = CompressedUpdate::encode(&u, &mut buf, &cfg, 10).unwrap();
        assert_eq!(c.to_dense(), u);
        assert_eq!(c.payload_bits, 32 * 50);
    }

    #[test]
    fn quantisation_error_feeds_back() {
        let cfg = CompressionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut buf = ErrorBuffer::zeros(200);
        let c = CompressedUpdate::encode(&u, &mut buf, &cfg, 1).unwrap();
        let sent = c.to_dense();
        for i in 0..200 {
            assert!((sent[i] + buf.residual[i] - u[i]).abs() < 1e-12);
        }
        assert_eq!(c.indices.len(), 10);
    }

    #[test]
    fn wire_round_trip() {
        let cfg = CompressionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u: Vec<f64> = (0..1352).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = CompressedUpdate::encode(&u, &mut ErrorBuffer::zeros(1352), &cfg, 7).unwrap();
        let wire = c.to_wire().unwrap();
        assert_eq!(wire.len(), 8 + 1292usize.div_ceil(8));
        let back = CompressedUpdate::from_wire(&wire, 1352, 7).unwrap();
        assert_eq!(back.indices, c.indices);
        assert_eq!(back.qvalues, c.qvalues);
        assert_eq!(back.payload_bits, 1292);
        assert!((back.scale - c.scale).abs() <= c.scale * 1e-7);
    }

    proptest! {
        #[test]
        fn exactly_k_nonzeros(v in prop::collection::vec(-10f64..10.0, 1..200), rho in 0.01f64..1.0) {
            let mut buf = ErrorBuffer::zeros(v.len());
            let kept = topk_ef(&v, &mut buf, rho).unwrap();
            prop_assert_eq!(kept.nnz(), topk_count(rho, v.len()));
            prop_assert!(kept.indices.windows(2).all(|w| w[0] < w[1]));
            // kept magnitudes dominate dropped ones
            let min_kept = kept.values.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            prop_assert!(buf.residual.iter().all(|e| e.abs() <= min_kept));
        }

        #[test]
        fn quantisation_round_trip_bound(v in prop::collection::vec(-1e3f64..1e3, 1..100)) {
            let (q, s) = quantize(&v).unwrap();
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (x, y) in v.iter().zip(dequantize(&q, s)) {
                prop_assert!((x - y).abs() <= max / 254.0 * (1.0 + 1e-12));
            }
        }

        #[test]
        fn ef_conserves_mass(seed: u64, rounds in 1usize..30, rho in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 40;
            let mut buf = ErrorBuffer::zeros(d);
            let mut sent = vec![0.0; d];
            let mut total = vec![0.0; d];
            for _ in 0..rounds {
                let u = dyadic(&mut rng, d);
                let k = topk_ef(&u, &mut buf, rho).unwrap().to_dense();
                for i in 0..d {
                    sent[i] += k[i];
                    total[i] += u[i];
                }
            }
            for i in 0..d {
                prop_assert_eq!(sent[i] + buf.residual[i], total[i]);
            }
        }
    }
}
