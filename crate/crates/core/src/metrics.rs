//! Per-round energy and latency reports, battery bookkeeping, detection
//! scores and the reported joint objective.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Initial battery per sensor (J).
    pub e_init: f64,
    /// Reserve a sensor must keep; uploads that would breach it are skipped.
    pub e_min: f64,
    /// Energy per floating-point operation (J).
    pub eps_op: f64,
    /// Sensor compute throughput used for the training-time term of latency.
    pub flops_per_s: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            e_init: 500.0,
            e_min: 0.0,
            eps_op: 1e-9,
            flops_per_s: 1e8,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_init.is_finite() && self.e_init > 0.0) {
            return Err(Error::config("energy.e_init must be positive"));
        }
        if !(self.e_min >= 0.0 && self.e_min < self.e_init) {
            return Err(Error::config("energy.e_min must lie in [0, e_init)"));
        }
        if !(self.eps_op.is_finite() && self.eps_op >= 0.0) {
            return Err(Error::config("energy.eps_op must be non-negative"));
        }
        if !(self.flops_per_s.is_finite() && self.flops_per_s > 0.0) {
            return Err(Error::config("energy.flops_per_s must be positive"));
        }
        Ok(())
    }
}

/// One row of the per-run CSV. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RoundReport {
    pub round: usize,
    /// Sensor uplink transmit energy (to a fog, or to the gateway for flat
    /// methods).
    pub e_s2f: f64,
    pub e_f2f: f64,
    pub e_f2g: f64,
    pub e_rx: f64,
    pub e_comp: f64,
    /// `e_s2f + e_f2f + e_f2g`.
    pub e_round: f64,
    /// `e_round + e_rx + e_comp`.
    pub e_total: f64,
    pub latency_s: f64,
    pub participation: f64,
    pub mean_train_loss: f64,
    pub battery_min: f64,
    pub battery_mean: f64,
    pub payload_bits_total: u64,
}

pub const CSV_HEADER: &str = "round,e_s2f,e_f2f,e_f2g,e_rx,e_comp,e_round,e_total,latency_s,participation,mean_train_loss,battery_min,battery_mean,payload_bits_total";

impl RoundReport {
    /// Fills the two derived totals from the tier terms.
    pub fn finalize_totals(&mut self) {
        self.e_round = self.e_s2f + self.e_f2f + self.e_f2g;
        self.e_total = self.e_round + self.e_rx + self.e_comp;
    }
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<RoundReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::domain(format!("unexpected rounds CSV header: {}", header.join(","))));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// `max` over every link latency of the round plus the computation time.
pub fn round_latency(tier_link_times: &[&[f64]], comp_time_s: f64) -> f64 {
    let comm = tier_link_times
        .iter()
        .flat_map(|tier| tier.iter())
        .fold(0.0f64, |m, &t| m.max(t));
    comm + comp_time_s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryState {
    pub residual: Vec<f64>,
    pub e_init: f64,
    pub e_min: f64,
}

impl BatteryState {
    pub fn new(n: usize, e_init: f64, e_min: f64) -> Self {
        Self {
            residual: vec![e_init; n],
            e_init,
            e_min,
        }
    }

    /// Whether sensor `i` can spend `cost` and stay at or above the reserve.
    pub fn can_afford(&self, i: usize, cost: f64) -> bool {
        self.residual[i] - cost >= self.e_min
    }

    /// Subtracts per-sensor costs; returns the sensors now below `e_min`.
    pub fn step(&mut self, costs: &[f64]) -> Result<Vec<usize>> {
        if costs.len() != self.residual.len() {
            return Err(Error::domain("one battery cost per sensor expected"));
        }
        let mut low = Vec::new();
        for (i, (r, c)) in self.residual.iter_mut().zip(costs).enumerate() {
            *r -= c;
            if *r < self.e_min {
                low.push(i);
            }
        }
        Ok(low)
    }

    pub fn min(&self) -> f64 {
        self.residual.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        if self.residual.is_empty() {
            return 0.0;
        }
        self.residual.iter().sum::<f64>() / self.residual.len() as f64
    }
}

/// Confusion counts and the scores derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PointScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            // nothing to find and nothing flagged
            return Self {
                tp,
                fp,
                fn_,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

fn check_aligned(pred: &[bool], labels: &[bool]) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn f1_point(pred: &[bool], labels: &[bool]) -> Result<PointScores> {
    check_aligned(pred, labels)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PointScores::from_counts(tp, fp, fn_))
}

/// Predictions after crediting every labelled segment that contains at
/// least one hit.
pub fn point_adjust(pred: &[bool], labels: &[bool]) -> Result<Vec<bool>> {
    check_aligned(pred, labels)?;
    let mut out = pred.to_vec();
    let mut i = 0;
    while i < labels.len() {
        if !labels[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < labels.len() && labels[i] {
            i += 1;
        }
        if pred[start..i].iter().any(|&p| p) {
            out[start..i].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

pub fn f1_point_adjusted(pred: &[bool], labels: &[bool]) -> Result<PointScores> {
    f1_point(&point_adjust(pred, labels)?, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pa_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pa_precision: f64,
    pub pa_recall: f64,
}

impl DetectionResult {
    pub fn new(point: PointScores, adjusted: PointScores) -> Self {
        Self {
            precision: point.precision,
            recall: point.recall,
            f1: point.f1,
            pa_f1: adjusted.f1,
            tp: point.tp,
            fp: point.fp,
            fn_: point.fn_,
            pa_precision: adjusted.precision,
            pa_recall: adjusted.recall,
        }
    }
}

pub fn detect(pred: &[bool], labels: &[bool]) -> Result<DetectionResult> {
    Ok(DetectionResult::new(f1_point(pred, labels)?, f1_point_adjusted(pred, labels)?))
}

/// Pools counts across sensors. Point adjustment runs per sensor so no
/// segment spans two series; sensors without labelled anomalies are left
/// out of the adjusted pool.
pub fn pooled_detection(per_sensor: &[(Vec<bool>, Vec<bool>)]) -> Result<DetectionResult> {
    let mut point = PointScores::from_counts(0, 0, 0);
    let mut adjusted = PointScores::from_counts(0, 0, 0);
    for (pred, labels) in per_sensor {
        point = point.merge(f1_point(pred, labels)?);
        if labels.iter().any(|&l| l) {
            adjusted = adjusted.merge(f1_point_adjusted(pred, labels)?);
        }
    }
    Ok(DetectionResult::new(point, adjusted))
}

/// `F(theta_T) + lambda_e·ΣE + lambda_tau·Στ`.
pub fn objective_value(
    final_loss: f64,
    energy_series: &[f64],
    latency_series: &[f64],
    lambda_e: f64,
    lambda_tau: f64,
) -> f64 {
    final_loss + lambda_e * energy_series.iter().sum::<f64>() + lambda_tau * latency_series.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn latency_of_single_link() {
        // 1000 m at 1500 m/s plus 1292 bits at 13837.726 bit/s
        let link = 1000.0 / 1500.0 + 1292.0 / 13837.726;
        let t = round_latency(&[&[link], &[], &[]], 0.25);
        assert!((t - (0.6667 + 0.0934 + 0.25)).abs() < 1e-3);
        assert_eq!(round_latency(&[&[], &[], &[]], 0.5), 0.5);
        assert_eq!(round_latency(&[&[2.0, 0.1], &[1.0]], 0.0), 2.0);
    }

    #[test]
    fn battery_step() {
        let mut bat = BatteryState::new(2, 500.0, 0.0);
        let low = bat.step(&[0.004927 + 0.1, 0.0]).unwrap();
        assert!(low.is_empty());
        assert!((bat.residual[0] - 499.895073).abs() < 1e-9);
        assert_eq!(bat.residual[1], 500.0);
        assert!(!bat.can_afford(1, 600.0));
        assert_eq!(bat.step(&[0.0, 600.0]).unwrap(), vec![1]);
        assert!(bat.step(&[0.0]).is_err());
    }

    #[test]
    fn point_f1_hand_counts() {
        let s = f1_point(&b(&[1, 0]), &b(&[1, 1])).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_point(&b(&[0, 1, 1]), &b(&[0, 1, 1])).unwrap().f1, 1.0);
        assert_eq!(f1_point(&b(&[0, 0]), &b(&[0, 1])).unwrap().f1, 0.0);
        assert_eq!(f1_point(&b(&[0, 0]), &b(&[0, 0])).unwrap().f1, 1.0);
        assert_eq!(f1_point(&b(&[1, 0]), &b(&[0, 0])).unwrap().f1, 0.0);
        assert!(f1_point(&b(&[1]), &b(&[1, 0])).is_err());
    }

    #[test]
    fn point_adjusted_hand_examples() {
        let labels = b(&[0, 1, 1, 0]);
        let pred = b(&[0, 1, 0, 0]);
        assert_eq!(point_adjust(&pred, &labels).unwrap(), b(&[0, 1, 1, 0]));
        assert_eq!(f1_point_adjusted(&pred, &labels).unwrap().f1, 1.0);

        // no hit inside any segment: nothing changes
        let pred = b(&[1, 0, 0, 1]);
        assert_eq!(
            f1_point_adjusted(&pred, &labels).unwrap(),
            f1_point(&pred, &labels).unwrap()
        );

        let ones = b(&[1, 1, 1, 1]);
        let s = f1_point_adjusted(&ones, &labels).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s, f1_point(&ones, &labels).unwrap());

        // two segments, only the second is hit
        let labels = b(&[1, 1, 0, 0, 1, 1, 1]);
        let pred = b(&[0, 0, 1, 0, 0, 0, 1]);
        assert_eq!(point_adjust(&pred, &labels).unwrap(), b(&[0, 0, 1, 0, 1, 1, 1]));
        let s = f1_point_adjusted(&pred, &labels).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (3, 1, 2));
    }

    #[test]
    fn pooled_detection_skips_clean_series_for_adjusted_counts() {
        let per = vec![
            (b(&[0, 1, 0]), b(&[0, 1, 1])),
            (b(&[1, 0, 0]), b(&[0, 0, 0])),
        ];
        let d = pooled_detection(&per).unwrap();
        assert_eq!((d.tp, d.fp, d.fn_), (1, 1, 1));
        assert_eq!(d.pa_f1, 1.0);
    }

    #[test]
    fn objective_hand_sum() {
        assert_eq!(objective_value(0.3, &[1.0, 2.0], &[0.5, 0.5], 0.0, 0.0), 0.3);
        let v = objective_value(0.3, &[1.0, 2.0], &[0.5, 0.25], 0.1, 2.0);
        assert!((v - (0.3 + 0.3 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut r = RoundReport {
            round: 1,
            e_s2f: 0.1 + 0.2,
            e_f2f: 0.0,
            e_f2g: 1.0 / 3.0,
            e_rx: 1e-7,
            e_comp: 2.5,
            latency_s: 0.76,
            participation: 0.995,
            mean_train_loss: 0.0123,
            battery_min: 499.5,
            battery_mean: 499.75,
            payload_bits_total: 12345,
            ..Default::default()
        };
        r.finalize_totals();
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[r.clone(), r.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert!(!text.contains('\r'));
        assert!(text.lines().all(|l| l.split(',').count() == 14));
        assert_eq!(read_reports_csv(&buf[..]).unwrap(), vec![r.clone(), r]);

        let mut empty = Vec::new();
        write_reports_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), format!("{CSV_HEADER}\n"));
    }

    proptest! {
        #[test]
        fn adjusted_never_below_point(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..80)) {
            let (pred, labels): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let p = f1_point(&pred, &labels).unwrap();
            let a = f1_point_adjusted(&pred, &labels).unwrap();
            prop_assert!(a.f1 >= p.f1);
            prop_assert!(a.tp >= p.tp && a.fp == p.fp);
        }

        #[test]
        fn battery_is_non_increasing(costs in prop::collection::vec(prop::collection::vec(0f64..1.0, 3), 1..10)) {
            let mut bat = BatteryState::new(3, 500.0, 0.0);
            for c in costs {
                let before = bat.residual.clone();
                bat.step(&c).unwrap();
                prop_assert!(bat.residual.iter().zip(&before).all(|(a, b)| a <= b));
            }
        }

        #[test]
        fn objective_is_linear_in_lambda_e(l in 0f64..10.0, e in prop::collection::vec(0f64..100.0, 0..10)) {
            let base = objective_value(1.0, &e, &[], 0.0, 0.0);
            let one = objective_value(1.0, &e, &[], 1.0, 0.0) - base;
            let v = objective_value(1.0, &e, &[], l, 0.0) - base;
            prop_assert!((v - l * one).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }
}
