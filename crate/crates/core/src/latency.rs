//! Per-round latency accounting and min-max bandwidth allocation.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig, ChannelSnapshot, DeviceProfile, SnrMode};
use crate::error::{Error, Result};

/// Model/gradient payload and per-sample compute cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadSpec {
    /// Number of learnable parameters `S`.
    pub params: usize,
    /// Quantization bits per element `q`.
    pub bits_per_element: u32,
    /// FLOPs per sample for one local gradient evaluation `C`.
    pub flops_per_sample: f64,
}

impl PayloadSpec {
    /// `q·S`, identical for the model download and the gradient upload.
    pub fn bits(&self) -> f64 {
        self.bits_per_element as f64 * self.params as f64
    }
}

/// A duration that may be unbounded (a device with no bandwidth never finishes).
///
/// `Unreachable` orders above every finite latency and never enters sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Latency {
    Finite(f64),
    Unreachable,
}

impl Latency {
    pub fn seconds(self) -> Option<f64> {
        match self {
            Latency::Finite(s) => Some(s),
            Latency::Unreachable => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Latency::Finite(_))
    }
}

impl PartialOrd for Latency {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Latency::Finite(a), Latency::Finite(b)) => a.partial_cmp(b),
            (Latency::Finite(_), Latency::Unreachable) => Some(Ordering::Less),
            (Latency::Unreachable, Latency::Finite(_)) => Some(Ordering::Greater),
            (Latency::Unreachable, Latency::Unreachable) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for Latency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Latency::Finite(s) => write!(f, "{s}s"),
            Latency::Unreachable => f.write_str("unreachable"),
        }
    }
}

/// Model broadcast time `qS / (B·log2(1 + γ))`.
pub fn broadcast_latency(payload: &PayloadSpec, config: &ChannelConfig, snapshot: &ChannelSnapshot) -> f64 {
    payload.bits() / channel::downlink_rate(config, snapshot)
}

/// Local gradient time `n_k·C / f_k`.
pub fn compute_latency(profile: &DeviceProfile, payload: &PayloadSpec) -> Result<f64> {
    if !(profile.flops > 0.0) {
        return Err(Error::invalid(format!(
            "device {} has nonpositive compute speed",
            profile.id
        )));
    }
    Ok(profile.samples as f64 * payload.flops_per_sample / profile.flops)
}

/// Gradient upload time `qS / (B_k·log2(1 + γ_k))`; zero bandwidth is unreachable.
pub fn upload_latency(payload: &PayloadSpec, bandwidth_hz: f64, snr: f64) -> Result<Latency> {
    if !(snr > 0.0) {
        return Err(Error::invalid("upload needs a positive SNR"));
    }
    let rate = channel::uplink_rate(bandwidth_hz, snr)?;
    if rate == 0.0 {
        return Ok(Latency::Unreachable);
    }
    Ok(Latency::Finite(payload.bits() / rate))
}

/// Upload latency of every device if it had the whole band to itself.
pub fn full_band_upload_latencies(
    payload: &PayloadSpec,
    config: &ChannelConfig,
    snapshot: &ChannelSnapshot,
) -> Result<Vec<f64>> {
    snapshot
        .uplink_snr
        .iter()
        .map(|&g| {
            upload_latency(payload, config.bandwidth_hz, g)?
                .seconds()
                .ok_or_else(|| Error::invalid("full band upload cannot be unreachable"))
        })
        .collect()
}

/// Min-max bandwidth split: `B_m = (B/R_m) / Σ_j 1/R_j` with `R_m = log2(1 + γ_m)`.
///
/// All scheduled devices finish uploading at the same instant.
pub fn allocate_bandwidth(snrs: &[f64], total_hz: f64) -> Result<Vec<f64>> {
    if snrs.is_empty() {
        return Err(Error::invalid("bandwidth allocation over an empty set"));
    }
    if !(total_hz > 0.0) {
        return Err(Error::invalid("total bandwidth must be positive"));
    }
    if snrs.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::invalid("SNRs must be positive and finite"));
    }
    let inverse_rates: Vec<f64> = snrs
        .iter()
        .map(|&g| std::f64::consts::LN_2 / g.ln_1p())
        .collect();
    let sum: f64 = inverse_rates.iter().sum();
    Ok(inverse_rates.iter().map(|inv| total_hz * inv / sum).collect())
}

/// Min-max split when noise scales with the allocated band.
///
/// No closed form exists; the common finishing time is found by bisection,
/// inverting each device's (increasing) rate curve by an inner bisection.
pub fn allocate_bandwidth_scaled_noise(snrs_full_band: &[f64], total_hz: f64, bits: f64) -> Result<Vec<f64>> {
    let fixed = allocate_bandwidth(snrs_full_band, total_hz)?;
    if fixed.len() == 1 {
        return Ok(fixed);
    }
    let rate = |b: f64, g: f64| {
        if b <= 0.0 {
            0.0
        } else {
            b * (g * total_hz / b).ln_1p() / std::f64::consts::LN_2
        }
    };
    let needed = |target_rate: f64, g: f64| {
        let (mut lo, mut hi) = (0.0, total_hz);
        while rate(hi, g) < target_rate {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid, g) < target_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let used = |t: f64| -> f64 { snrs_full_band.iter().map(|&g| needed(bits / t, g)).sum() };
    // equal split is feasible; its worst latency brackets the optimum from above
    let worst_equal = snrs_full_band
        .iter()
        .map(|&g| bits / rate(total_hz / snrs_full_band.len() as f64, g))
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (worst_equal * 1e-9, worst_equal);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if used(mid) > total_hz {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alloc: Vec<f64> = snrs_full_band.iter().map(|&g| needed(bits / hi, g)).collect();
    let s: f64 = alloc.iter().sum();
    Ok(alloc.into_iter().map(|b| b * total_hz / s).collect())
}

/// Which compute latencies gate the start of scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComputeTerm {
    /// Max over the whole fleet: the server waits for every importance report.
    #[default]
    FleetMax,
    /// Max over the scheduled devices only (deviation, opt-in).
    ScheduledMax,
}

/// Latency components of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub broadcast_s: f64,
    /// `T_k^C` for every device.
    pub compute_s: Vec<f64>,
    /// The compute term charged to the round.
    pub compute_term_s: f64,
    /// Scheduled device indices (0-based).
    pub scheduled: Vec<usize>,
    /// Bandwidth given to each scheduled device.
    pub bandwidth_hz: Vec<f64>,
    /// `T_k^U` for each scheduled device.
    pub upload_s: Vec<f64>,
}

impl LatencyBreakdown {
    /// Slowest scheduled upload.
    pub fn upload_term_s(&self) -> f64 {
        self.upload_s.iter().cloned().fold(0.0, f64::max)
    }

    /// `T_k = T^B + max T^C + T_k^U` for the `i`-th scheduled device.
    pub fn device_total_s(&self, i: usize) -> f64 {
        self.broadcast_s + self.compute_term_s + self.upload_s[i]
    }

    /// Simulated wall-clock increment of the round.
    pub fn total_s(&self) -> f64 {
        self.broadcast_s + self.compute_term_s + self.upload_term_s()
    }
}

/// Assembles the one-round latency for a scheduled set.
///
/// A single scheduled device occupies the whole band; several share it via
/// [`allocate_bandwidth`] (or its scaled-noise counterpart).
pub fn round_latency(
    payload: &PayloadSpec,
    config: &ChannelConfig,
    snapshot: &ChannelSnapshot,
    profiles: &[DeviceProfile],
    scheduled: &[usize],
    compute_term: ComputeTerm,
) -> Result<LatencyBreakdown> {
    if scheduled.is_empty() {
        return Err(Error::invalid("round with no scheduled device"));
    }
    if profiles.len() != snapshot.uplink_snr.len() {
        return Err(Error::DimensionMismatch {
            what: "profiles vs snapshot",
            expected: profiles.len(),
            got: snapshot.uplink_snr.len(),
        });
    }
    if let Some(&bad) = scheduled.iter().find(|&&k| k >= profiles.len()) {
        return Err(Error::invalid(format!("scheduled index {bad} out of range")));
    }
    let compute_s = profiles
        .iter()
        .map(|p| compute_latency(p, payload))
        .collect::<Result<Vec<_>>>()?;
    let compute_term_s = match compute_term {
        ComputeTerm::FleetMax => compute_s.iter().cloned().fold(0.0, f64::max),
        ComputeTerm::ScheduledMax => scheduled.iter().map(|&k| compute_s[k]).fold(0.0, f64::max),
    };
    let snrs: Vec<f64> = scheduled.iter().map(|&k| snapshot.uplink_snr[k]).collect();
    let bandwidth_hz = match config.snr_mode {
        SnrMode::FixedReference => allocate_bandwidth(&snrs, config.bandwidth_hz)?,
        SnrMode::BandwidthScaledNoise => {
            allocate_bandwidth_scaled_noise(&snrs, config.bandwidth_hz, payload.bits())?
        }
    };
    let upload_s = snrs
        .iter()
        .zip(&bandwidth_hz)
        .map(|(&g, &b)| {
            let g = channel::snr_at_bandwidth(g, config.bandwidth_hz, b, config.snr_mode);
            upload_latency(payload, b, g)?
                .seconds()
                .ok_or_else(|| Error::invalid("scheduled device received no bandwidth"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyBreakdown {
        broadcast_s: broadcast_latency(payload, config, snapshot),
        compute_s,
        compute_term_s,
        scheduled: scheduled.to_vec(),
        bandwidth_hz,
        upload_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Fading;

    fn payload(bits: f64) -> PayloadSpec {
        PayloadSpec {
            params: (bits / 16.0) as usize,
            bits_per_element: 16,
            flops_per_sample: 1e6,
        }
    }

    fn snapshot(up: Vec<f64>, down: f64) -> ChannelSnapshot {
        ChannelSnapshot {
            uplink_snr: up,
            downlink_snr: down,
            round_index: 0,
        }
    }

    fn profile(id: usize, flops: f64, samples: usize) -> DeviceProfile {
        DeviceProfile {
            id,
            samples,
            flops,
            distance_km: 0.2,
            tx_power_dbm: 24.0,
        }
    }

    #[test]
    fn broadcast() {
        let cfg = ChannelConfig::default();
        assert!((broadcast_latency(&payload(16e6), &cfg, &snapshot(vec![], 1.0)) - 16.0).abs() < 1e-9);
        // rate 8e6: B = 1e6, log2(1+γ) = 8
        let t = broadcast_latency(&payload(16e3), &cfg, &snapshot(vec![], 255.0));
        assert!((t - 2e-3).abs() < 1e-12);
        assert!(broadcast_latency(&payload(16e3), &cfg, &snapshot(vec![], 300.0)) < t);
    }

    #[test]
    fn compute() {
        let p = payload(16e3);
        assert!((compute_latency(&profile(1, 1e9, 1000), &p).unwrap() - 1.0).abs() < 1e-12);
        let fast = compute_latency(&profile(1, 2e9, 1000), &p).unwrap();
        assert!((fast - 0.5).abs() < 1e-12);
        assert!(compute_latency(&profile(1, 0.0, 10), &p).is_err());
    }

    #[test]
    fn upload() {
        let p = payload(16e3);
        assert_eq!(upload_latency(&p, 1e6, 3.0).unwrap(), Latency::Finite(8e-3));
        assert_eq!(upload_latency(&p, 1e6, 1.0).unwrap(), Latency::Finite(16e-3));
        assert_eq!(upload_latency(&p, 0.5e6, 1.0).unwrap(), Latency::Finite(32e-3));
        assert_eq!(upload_latency(&p, 0.0, 1.0).unwrap(), Latency::Unreachable);
        assert!(Latency::Unreachable > Latency::Finite(1e300));
        assert!(upload_latency(&p, -1.0, 1.0).is_err());
    }

    #[test]
    fn allocation_examples() {
        let eq = allocate_bandwidth(&[7.0, 7.0], 1e6).unwrap();
        assert!((eq[0] - 0.5e6).abs() < 1e-6 && (eq[1] - 0.5e6).abs() < 1e-6);
        // R = (1, 3)
        let b = allocate_bandwidth(&[1.0, 7.0], 1e6).unwrap();
        assert!((b[0] - 0.75e6).abs() < 1e-6);
        assert!((b[1] - 0.25e6).abs() < 1e-6);
        let p = payload(16e3);
        let t0 = upload_latency(&p, b[0], 1.0).unwrap().seconds().unwrap();
        let t1 = upload_latency(&p, b[1], 7.0).unwrap().seconds().unwrap();
        assert!((t0 - t1).abs() / t0 < 1e-12);
        assert!(allocate_bandwidth(&[], 1e6).is_err());
        assert!(allocate_bandwidth(&[0.0], 1e6).is_err());
    }

    #[test]
    fn scaled_noise_allocation_equalizes() {
        let snrs = [3.0, 40.0, 900.0];
        let bits = 1e4;
        let b = allocate_bandwidth_scaled_noise(&snrs, 1e6, bits).unwrap();
        assert!((b.iter().sum::<f64>() - 1e6).abs() < 1e-3);
        let lat: Vec<f64> = snrs
            .iter()
            .zip(&b)
            .map(|(&g, &bw)| bits / channel::uplink_rate(bw, g * 1e6 / bw).unwrap())
            .collect();
        for l in &lat {
            assert!((l - lat[0]).abs() / lat[0] < 1e-6, "{lat:?}");
        }
    }

    #[test]
    fn round_latency_compute_term_is_fleet_max() {
        let cfg = ChannelConfig {
            fading: Fading::None,
            ..ChannelConfig::default()
        };
        let p = payload(16e3);
        // compute latencies 1, 5, 2 s
        let profiles = [profile(1, 1e9, 1000), profile(2, 1e9, 5000), profile(3, 1e9, 2000)];
        let snap = snapshot(vec![3.0, 3.0, 3.0], 3.0);
        for k in 0..3 {
            let lb = round_latency(&p, &cfg, &snap, &profiles, &[k], ComputeTerm::FleetMax).unwrap();
            assert!((lb.compute_term_s - 5.0).abs() < 1e-12);
            assert_eq!(lb.bandwidth_hz, vec![1e6]);
        }
        let lb = round_latency(&p, &cfg, &snap, &profiles, &[0], ComputeTerm::ScheduledMax).unwrap();
        assert!((lb.compute_term_s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_round_is_upload_only() {
        let cfg = ChannelConfig::default();
        let p = PayloadSpec {
            params: 1000,
            bits_per_element: 16,
            flops_per_sample: 0.0,
        };
        let snap = snapshot(vec![3.0], f64::INFINITY);
        let lb = round_latency(&p, &cfg, &snap, &[profile(1, 1e9, 10)], &[0], ComputeTerm::FleetMax).unwrap();
        assert_eq!(lb.broadcast_s, 0.0);
        assert_eq!(lb.total_s(), lb.upload_s[0]);
    }

    #[test]
    fn multi_device_uploads_finish_together() {
        let cfg = ChannelConfig::default();
        let p = payload(16e3);
        let profiles: Vec<_> = (1..=4).map(|i| profile(i, 1e9, 100)).collect();
        let snap = snapshot(vec![2.0, 50.0, 700.0, 9.0], 100.0);
        let lb = round_latency(&p, &cfg, &snap, &profiles, &[0, 2, 3], ComputeTerm::FleetMax).unwrap();
        for u in &lb.upload_s {
            assert!((u - lb.upload_s[0]).abs() / u < 1e-12);
        }
        assert!((lb.bandwidth_hz.iter().sum::<f64>() - 1e6).abs() < 1e-6);
    }
}
