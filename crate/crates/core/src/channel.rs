//! Underwater acoustic link model.
//!
//! Large-scale transmission loss (practical spreading plus Thorp absorption),
//! Wenz-type ambient noise, the passive sonar equation, and the energy cost
//! of moving bits over a power-controlled acoustic link. Frequencies are in
//! kHz, distances in metres, levels in dB re 1 µPa.
//!
//! Every function here is pure.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Links are referenced to the source level at 1 m; shorter links are
/// evaluated at this distance.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticParams {
    pub carrier_freq_khz: f64,
    pub bandwidth_hz: f64,
    /// 1 = cylindrical, 2 = spherical.
    pub spreading_factor: f64,
    pub sound_speed_mps: f64,
    pub wind_mps: f64,
    /// Shipping activity in [0, 1].
    pub shipping: f64,
    pub target_snr_db: f64,
    pub impl_loss_db: f64,
    /// Modem source-level cap, dB re 1 µPa @ 1 m.
    pub sl_max_db: f64,
    pub ea_efficiency: f64,
    pub circuit_tx_w: f64,
    pub circuit_rx_w: f64,
    pub water_density: f64,
    pub ref_pressure: f64,
}

impl Default for AcousticParams {
    fn default() -> Self {
        Self {
            carrier_freq_khz: 12.0,
            bandwidth_hz: 4000.0,
            spreading_factor: 1.5,
            sound_speed_mps: 1500.0,
            wind_mps: 5.0,
            shipping: 0.5,
            target_snr_db: 10.0,
            impl_loss_db: 2.0,
            sl_max_db: 140.0,
            ea_efficiency: 0.25,
            circuit_tx_w: 0.05,
            circuit_rx_w: 0.03,
            water_density: 1025.0,
            ref_pressure: 1e-6,
        }
    }
}

impl AcousticParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_freq_khz", self.carrier_freq_khz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("sound_speed_mps", self.sound_speed_mps),
            ("ea_efficiency", self.ea_efficiency),
            ("circuit_tx_w", self.circuit_tx_w),
            ("circuit_rx_w", self.circuit_rx_w),
            ("water_density", self.water_density),
            ("ref_pressure", self.ref_pressure),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(1.0..=2.0).contains(&self.spreading_factor) {
            return Err(Error::domain(format!(
                "spreading_factor must lie in [1, 2], got {}",
                self.spreading_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.shipping) {
            return Err(Error::domain(format!("shipping must lie in [0, 1], got {}", self.shipping)));
        }
        if self.ea_efficiency > 1.0 {
            return Err(Error::domain(format!(
                "ea_efficiency must lie in (0, 1], got {}",
                self.ea_efficiency
            )));
        }
        if !(self.wind_mps.is_finite() && self.wind_mps >= 0.0) {
            return Err(Error::domain(format!("wind_mps must be non-negative, got {}", self.wind_mps)));
        }
        for (name, v) in [
            ("target_snr_db", self.target_snr_db),
            ("impl_loss_db", self.impl_loss_db),
            ("sl_max_db", self.sl_max_db),
        ] {
            if !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Budget of a single directed acoustic link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub distance_m: f64,
    pub tl_db: f64,
    pub nl_db: f64,
    /// Source level needed to hit the target SNR at the receiver.
    pub sl_min_db: f64,
    /// `sl_min_db <= sl_max_db`.
    pub feasible: bool,
    pub rate_bps: f64,
    pub prop_delay_s: f64,
    /// Electrical transmit power at `sl_min_db`, i.e. acoustic power over
    /// the electro-acoustic efficiency.
    pub tx_power_w: f64,
}

impl LinkBudget {
    /// Propagation delay plus serialisation time of `bits`.
    pub fn latency_s(&self, bits: u64) -> f64 {
        self.prop_delay_s + bits as f64 / self.rate_bps
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

fn check_freq(f_khz: f64) -> Result<()> {
    if f_khz.is_finite() && f_khz > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("frequency must be positive, got {f_khz} kHz")))
    }
}

/// Thorp absorption coefficient in dB/km.
pub fn thorp_absorption(f_khz: f64) -> Result<f64> {
    check_freq(f_khz)?;
    let f2 = f_khz * f_khz;
    Ok(0.11 * f2 / (1.0 + f2) + 44.0 * f2 / (4100.0 + f2) + 2.75e-4 * f2 + 0.003)
}

/// Transmission loss in dB at `d_m` metres.
pub fn transmission_loss(d_m: f64, f_khz: f64, k: f64) -> Result<f64> {
    if !(d_m >= REFERENCE_DISTANCE_M) {
        return Err(Error::domain(format!(
            "distance {d_m} m is below the 1 m reference distance"
        )));
    }
    let alpha = thorp_absorption(f_khz)?;
    Ok(10.0 * k * d_m.log10() + alpha * d_m / 1000.0)
}

/// The four Wenz noise components, each in dB re 1 µPa²/Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseComponents {
    pub turbulence: f64,
    pub shipping: f64,
    pub wind: f64,
    pub thermal: f64,
}

impl NoiseComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.turbulence, self.shipping, self.wind, self.thermal]
    }
}

pub fn noise_components(f_khz: f64, wind_mps: f64, shipping: f64) -> Result<NoiseComponents> {
    check_freq(f_khz)?;
    if !(wind_mps.is_finite() && wind_mps >= 0.0) {
        return Err(Error::domain(format!("wind speed must be non-negative, got {wind_mps}")));
    }
    if !(0.0..=1.0).contains(&shipping) {
        return Err(Error::domain(format!("shipping must lie in [0, 1], got {shipping}")));
    }
    let lf = f_khz.log10();
    Ok(NoiseComponents {
        turbulence: 17.0 - 30.0 * lf,
        shipping: 40.0 + 20.0 * (shipping - 0.5) + 26.0 * lf - 60.0 * (f_khz + 0.03).log10(),
        wind: 50.0 + 7.5 * wind_mps.sqrt() + 20.0 * lf - 40.0 * (f_khz + 0.4).log10(),
        thermal: -15.0 + 20.0 * lf,
    })
}

/// Total ambient noise PSD: the components power-summed in linear scale.
pub fn noise_psd(f_khz: f64, wind_mps: f64, shipping: f64) -> Result<f64> {
    let c = noise_components(f_khz, wind_mps, shipping)?;
    let total: f64 = c.as_array().iter().map(|&db| db_to_linear(db)).sum();
    Ok(linear_to_db(total))
}

/// Noise level over the receiver bandwidth.
pub fn noise_level(f_khz: f64, bandwidth_hz: f64, wind_mps: f64, shipping: f64) -> Result<f64> {
    if !(bandwidth_hz.is_finite() && bandwidth_hz > 0.0) {
        return Err(Error::domain(format!("bandwidth must be positive, got {bandwidth_hz} Hz")));
    }
    Ok(noise_psd(f_khz, wind_mps, shipping)? + 10.0 * bandwidth_hz.log10())
}

pub fn min_source_level(d_m: f64, params: &AcousticParams) -> Result<f64> {
    let tl = transmission_loss(d_m, params.carrier_freq_khz, params.spreading_factor)?;
    let nl = noise_level(
        params.carrier_freq_khz,
        params.bandwidth_hz,
        params.wind_mps,
        params.shipping,
    )?;
    Ok(params.target_snr_db + tl + nl + params.impl_loss_db)
}

/// Shannon rate at the target SNR. Independent of distance once a link is
/// feasible, because transmitters power-control to the target.
pub fn link_rate_bps(params: &AcousticParams) -> f64 {
    params.bandwidth_hz * (1.0 + db_to_linear(params.target_snr_db)).log2()
}

/// Radiated acoustic power (W) for a source level in dB re 1 µPa @ 1 m.
pub fn acoustic_power_w(sl_db: f64, params: &AcousticParams) -> f64 {
    4.0 * PI * params.ref_pressure * params.ref_pressure
        / (params.water_density * params.sound_speed_mps)
        * db_to_linear(sl_db)
}

/// Full budget for a link of length `d_m`. Links shorter than the 1 m
/// reference are evaluated at 1 m; the reported distance and delay keep the
/// true length.
pub fn link_budget(d_m: f64, params: &AcousticParams) -> Result<LinkBudget> {
    if !(d_m.is_finite() && d_m >= 0.0) {
        return Err(Error::domain(format!("link distance must be non-negative, got {d_m}")));
    }
    let eval_d = d_m.max(REFERENCE_DISTANCE_M);
    let tl_db = transmission_loss(eval_d, params.carrier_freq_khz, params.spreading_factor)?;
    let nl_db = noise_level(
        params.carrier_freq_khz,
        params.bandwidth_hz,
        params.wind_mps,
        params.shipping,
    )?;
    let sl_min_db = params.target_snr_db + tl_db + nl_db + params.impl_loss_db;
    Ok(LinkBudget {
        distance_m: d_m,
        tl_db,
        nl_db,
        sl_min_db,
        feasible: sl_min_db <= params.sl_max_db,
        rate_bps: link_rate_bps(params),
        prop_delay_s: d_m / params.sound_speed_mps,
        tx_power_w: acoustic_power_w(sl_min_db, params) / params.ea_efficiency,
    })
}

fn require_feasible(lb: &LinkBudget) -> Result<()> {
    if lb.feasible {
        Ok(())
    } else {
        Err(Error::InfeasibleLink {
            tier: "acoustic",
            from: 0,
            to: 0,
            sl_min_db: lb.sl_min_db,
        })
    }
}

/// Transmit energy (J) for `bits` over a feasible link.
pub fn tx_energy(bits: u64, lb: &LinkBudget, params: &AcousticParams) -> Result<f64> {
    require_feasible(lb)?;
    Ok((lb.tx_power_w + params.circuit_tx_w) * bits as f64 / lb.rate_bps)
}

/// Receive energy (J) spent by the far end of a feasible link.
pub fn rx_energy(bits: u64, lb: &LinkBudget, params: &AcousticParams) -> Result<f64> {
    require_feasible(lb)?;
    Ok(params.circuit_rx_w * bits as f64 / lb.rate_bps)
}

/// Computation energy (J) for `flops` operations at `eps_op` J per operation.
pub fn comp_energy(flops: u64, eps_op: f64) -> f64 {
    eps_op * flops as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table1() -> AcousticParams {
        AcousticParams::default()
    }

    // Independent per-component Wenz oracle, written out longhand.
    fn wenz_linear_oracle(f: f64, w: f64, s: f64) -> f64 {
        let turb = 17.0 - 30.0 * f.log10();
        let ship = 40.0 + 20.0 * (s - 0.5) + 26.0 * f.log10() - 60.0 * (f + 0.03).log10();
        let wind = 50.0 + 7.5 * w.powf(0.5) + 20.0 * f.log10() - 40.0 * (f + 0.4).log10();
        let therm = -15.0 + 20.0 * f.log10();
        [turb, ship, wind, therm]
            .iter()
            .map(|x| 10f64.powf(x / 10.0))
            .sum()
    }

    #[test]
    fn thorp_golden_values() {
        assert!((thorp_absorption(12.0).unwrap() - 1.6448).abs() < 1e-3);
        assert!((thorp_absorption(1.0).unwrap() - 0.0690).abs() < 1e-3);
        let tiny = thorp_absorption(1e-6).unwrap();
        assert!((tiny - 0.003).abs() < 1e-9);
        assert!(thorp_absorption(0.0).is_err());
        assert!(thorp_absorption(-3.0).is_err());
    }

    #[test]
    fn transmission_loss_golden_values() {
        assert!((transmission_loss(1000.0, 12.0, 1.5).unwrap() - 46.645).abs() < 0.01);
        assert!((transmission_loss(1100.0, 12.0, 1.5).unwrap() - 47.430).abs() < 0.01);
        let at_ref = transmission_loss(1.0, 12.0, 1.5).unwrap();
        assert!((at_ref - thorp_absorption(12.0).unwrap() / 1000.0).abs() < 1e-15);
        assert!(transmission_loss(0.5, 12.0, 1.5).is_err());
    }

    #[test]
    fn noise_golden_values() {
        // Oracle values: 44.6183 (w=5) and 27.8942 (w=0), see wenz_linear_oracle.
        assert!((noise_psd(12.0, 5.0, 0.5).unwrap() - 44.62).abs() < 0.05);
        let calm = noise_psd(12.0, 0.0, 0.5).unwrap();
        assert!((calm - 27.894).abs() < 0.01, "calm sea PSD {calm}");
        let wind0 = noise_components(12.0, 0.0, 0.5).unwrap().wind;
        assert!((wind0 - 27.85).abs() < 0.01);

        assert!((noise_level(12.0, 4000.0, 5.0, 0.5).unwrap() - 80.64).abs() < 0.05);
        assert_eq!(
            noise_level(12.0, 1.0, 5.0, 0.5).unwrap(),
            noise_psd(12.0, 5.0, 0.5).unwrap()
        );
        let step = noise_level(12.0, 8000.0, 5.0, 0.5).unwrap()
            - noise_level(12.0, 4000.0, 5.0, 0.5).unwrap();
        assert!((step - 3.0103).abs() < 1e-4);

        assert!(noise_level(12.0, 0.0, 5.0, 0.5).is_err());
        assert!(noise_psd(12.0, -1.0, 0.5).is_err());
        assert!(noise_psd(12.0, 5.0, 1.5).is_err());
    }

    #[test]
    fn source_level_golden_values() {
        let p = table1();
        assert!((min_source_level(1000.0, &p).unwrap() - 139.28).abs() < 0.05);
        let sl1100 = min_source_level(1100.0, &p).unwrap();
        assert!((sl1100 - 140.07).abs() < 0.05);
        assert!(sl1100 > p.sl_max_db);
        assert!((min_source_level(1.0, &p).unwrap() - 92.64).abs() < 0.05);
    }

    #[test]
    fn link_budget_at_one_kilometre() {
        let p = table1();
        let lb = link_budget(1000.0, &p).unwrap();
        assert!(lb.feasible);
        assert!((lb.rate_bps - 13837.7).abs() < 0.5);
        assert!((lb.prop_delay_s - 1000.0 / 1500.0).abs() < 1e-15);
        // 4π(1e-6)²/(1025·1500) · 10^13.928 = 6.930e-4 W acoustic, ÷0.25.
        assert!((lb.tx_power_w - 2.7722e-3).abs() / 2.7722e-3 < 1e-3);
        assert!(!link_budget(1100.0, &p).unwrap().feasible);
        assert_eq!(link_budget(300.0, &p).unwrap().rate_bps, lb.rate_bps);
    }

    #[test]
    fn short_links_clamp_to_reference() {
        let p = table1();
        let lb = link_budget(0.2, &p).unwrap();
        assert_eq!(lb.sl_min_db, link_budget(1.0, &p).unwrap().sl_min_db);
        assert_eq!(lb.distance_m, 0.2);
        assert!(link_budget(-1.0, &p).is_err());
    }

    #[test]
    fn energy_per_transmission() {
        let p = table1();
        let lb = link_budget(1000.0, &p).unwrap();
        let e = tx_energy(1292, &lb, &p).unwrap();
        assert!((e - 4.9272e-3).abs() / 4.9272e-3 < 1e-3, "{e}");
        assert_eq!(tx_energy(0, &lb, &p).unwrap(), 0.0);
        assert!((tx_energy(2584, &lb, &p).unwrap() - 2.0 * e).abs() < 1e-15);

        let r = rx_energy(1292, &lb, &p).unwrap();
        assert!((r - 2.80e-3).abs() / 2.80e-3 < 0.02);
        assert_eq!(rx_energy(0, &lb, &p).unwrap(), 0.0);
        assert!(r < e);

        let far = link_budget(1100.0, &p).unwrap();
        assert!(matches!(tx_energy(8, &far, &p), Err(Error::InfeasibleLink { .. })));
        assert!(matches!(rx_energy(8, &far, &p), Err(Error::InfeasibleLink { .. })));
    }

    #[test]
    fn computation_energy() {
        assert!((comp_energy(100_000_000, 1e-9) - 0.1).abs() < 1e-15);
        assert_eq!(comp_energy(0, 1e-9), 0.0);
        assert_eq!(comp_energy(2_000, 1e-9), 2.0 * comp_energy(1_000, 1e-9));
    }

    #[test]
    fn feasibility_boundary_lies_between_1000_and_1100() {
        let p = table1();
        let (mut lo, mut hi) = (1000.0, 1100.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if link_budget(mid, &p).unwrap().feasible {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(lo > 1000.0 && hi < 1100.0);
        assert!((lo - 1090.91).abs() < 0.01);
    }

    #[test]
    fn params_validation() {
        assert!(table1().validate().is_ok());
        let mut p = table1();
        p.spreading_factor = 2.5;
        assert!(p.validate().is_err());
        let mut p = table1();
        p.ea_efficiency = 1.2;
        assert!(p.validate().is_err());
        let mut p = table1();
        p.bandwidth_hz = 0.0;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn noise_matches_component_oracle(f in 0.1f64..100.0, w in 0.0f64..30.0, s in 0.0f64..=1.0) {
            let ours = db_to_linear(noise_psd(f, w, s).unwrap());
            let oracle = wenz_linear_oracle(f, w, s);
            prop_assert!(((ours - oracle) / oracle).abs() < 1e-12);
            let c = noise_components(f, w, s).unwrap();
            let max = c.as_array().into_iter().fold(f64::MIN, f64::max);
            prop_assert!(noise_psd(f, w, s).unwrap() >= max - 1e-12);
        }

        #[test]
        fn source_level_monotone_in_distance(d in 1.0f64..5000.0, extra in 1e-3f64..500.0) {
            let p = AcousticParams::default();
            let near = link_budget(d, &p).unwrap();
            let far = link_budget(d + extra, &p).unwrap();
            prop_assert!(far.tl_db > near.tl_db);
            prop_assert!(far.sl_min_db > near.sl_min_db);
            if far.feasible {
                prop_assert!(near.feasible);
            }
            prop_assert_eq!(near.prop_delay_s, d / p.sound_speed_mps);
        }

        #[test]
        fn db_round_trip(x in -200.0f64..200.0) {
            let back = linear_to_db(db_to_linear(x));
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
            let lin = db_to_linear(x);
            prop_assert!(((db_to_linear(linear_to_db(lin)) - lin) / lin).abs() < 1e-9);
        }

        #[test]
        fn energy_linear_in_bits(bits in 0u64..1_000_000, d in 1.0f64..1000.0) {
            let p = AcousticParams::default();
            let lb = link_budget(d, &p).unwrap();
            let one = tx_energy(bits, &lb, &p).unwrap();
            let two = tx_energy(2 * bits, &lb, &p).unwrap();
            prop_assert!((two - 2.0 * one).abs() <= 1e-12 * two.max(1e-300));
        }
    }
}
