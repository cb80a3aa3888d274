//! Device placement, path loss, block fading, per-round SNRs and Shannon rates.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static per-device facts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// 1-based device id.
    pub id: usize,
    /// Local dataset size `n_k`.
    pub samples: usize,
    /// Computational capability `f_k` in FLOP/s.
    pub flops: f64,
    pub distance_km: f64,
    pub tx_power_dbm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    None,
    /// Independent unit-mean exponential power gain per device per round.
    RayleighBlock,
}

/// Whether an SNR stays fixed when a device gets only part of the band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnrMode {
    /// SNR is stated at the full band and reused for any allocation.
    #[default]
    FixedReference,
    /// Noise power scales with the allocated band (`N₀·B_k`).
    BandwidthScaledNoise,
}

/// Log-distance path loss `intercept + slope·log10(d_km)` in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLoss {
    pub intercept_db: f64,
    pub slope_db_per_decade: f64,
}

impl Default for PathLoss {
    fn default() -> Self {
        PathLoss {
            intercept_db: 128.1,
            slope_db_per_decade: 37.6,
        }
    }
}

impl PathLoss {
    pub fn loss_db(&self, distance_km: f64) -> Result<f64> {
        if !(distance_km > 0.0) {
            return Err(Error::invalid(format!("distance {distance_km} km must be positive")));
        }
        Ok(self.intercept_db + self.slope_db_per_decade * distance_km.log10())
    }
}

/// Path loss with the LTE small-cell parameters.
pub fn path_loss_db(distance_km: f64) -> Result<f64> {
    PathLoss::default().loss_db(distance_km)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// System bandwidth `B` in Hz.
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub server_tx_power_dbm: f64,
    pub fading: Fading,
    #[serde(default)]
    pub pathloss: PathLoss,
    #[serde(default)]
    pub snr_mode: SnrMode,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            bandwidth_hz: 1e6,
            noise_dbm_per_hz: -174.0,
            server_tx_power_dbm: 46.0,
            fading: Fading::RayleighBlock,
            pathloss: PathLoss::default(),
            snr_mode: SnrMode::FixedReference,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0) || !self.bandwidth_hz.is_finite() {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        Ok(())
    }

    fn noise_dbm(&self, bandwidth_hz: f64) -> f64 {
        self.noise_dbm_per_hz + 10.0 * bandwidth_hz.log10()
    }

    /// Linear SNR at the full band for a transmitter at `distance_km`, before fading.
    pub fn mean_snr(&self, tx_power_dbm: f64, distance_km: f64) -> Result<f64> {
        let pl = self.pathloss.loss_db(distance_km)?;
        Ok(10f64.powf((tx_power_dbm - pl - self.noise_dbm(self.bandwidth_hz)) / 10.0))
    }
}

/// Per-round channel state of the fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSnapshot {
    /// Linear uplink SNR `γ_k` per device at the full band.
    pub uplink_snr: Vec<f64>,
    /// Fleet-minimum linear downlink SNR `γ`.
    pub downlink_snr: f64,
    pub round_index: usize,
}

/// Uniform placement over the disk of `radius_km`, keeping at least `min_km` from the server.
pub fn place_devices<R: Rng + ?Sized>(
    count: usize,
    radius_km: f64,
    min_km: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(radius_km > min_km) || min_km < 0.0 {
        return Err(Error::invalid("placement needs 0 <= min distance < radius"));
    }
    let (r2, m2) = (radius_km * radius_km, min_km * min_km);
    Ok((0..count)
        .map(|_| (m2 + rng.random::<f64>() * (r2 - m2)).sqrt())
        .collect())
}

fn fading_gain<R: Rng + ?Sized>(fading: Fading, rng: &mut R) -> f64 {
    match fading {
        Fading::None => 1.0,
        Fading::RayleighBlock => {
            // Exp(1) can underflow to exactly 0 only with probability ~0; keep SNR > 0 anyway.
            let h: f64 = rng.sample(Exp1);
            h.max(f64::MIN_POSITIVE)
        }
    }
}

/// Draws one round's uplink and downlink SNRs.
///
/// Per device, the uplink gain is drawn before the downlink gain, in id order.
pub fn draw_snapshot<R: Rng + ?Sized>(
    profiles: &[DeviceProfile],
    config: &ChannelConfig,
    round_index: usize,
    rng: &mut R,
) -> Result<ChannelSnapshot> {
    if profiles.is_empty() {
        return Err(Error::invalid("no devices to draw a channel for"));
    }
    config.validate()?;
    let mut uplink_snr = Vec::with_capacity(profiles.len());
    let mut downlink_snr = f64::INFINITY;
    for p in profiles {
        let up = config.mean_snr(p.tx_power_dbm, p.distance_km)? * fading_gain(config.fading, rng);
        let down = config.mean_snr(config.server_tx_power_dbm, p.distance_km)?
            * fading_gain(config.fading, rng);
        uplink_snr.push(up);
        downlink_snr = downlink_snr.min(down);
    }
    Ok(ChannelSnapshot {
        uplink_snr,
        downlink_snr,
        round_index,
    })
}

/// SNR seen on an allocated sub-band.
pub fn snr_at_bandwidth(snr_full_band: f64, full_band_hz: f64, allocated_hz: f64, mode: SnrMode) -> f64 {
    match mode {
        SnrMode::FixedReference => snr_full_band,
        SnrMode::BandwidthScaledNoise => snr_full_band * full_band_hz / allocated_hz,
    }
}

/// `B_k·log2(1 + γ_k)` in bit/s.
pub fn uplink_rate(bandwidth_hz: f64, snr: f64) -> Result<f64> {
    if bandwidth_hz < 0.0 || snr < 0.0 || !bandwidth_hz.is_finite() || snr.is_nan() {
        return Err(Error::invalid("rate needs nonnegative bandwidth and SNR"));
    }
    if bandwidth_hz == 0.0 {
        return Ok(0.0);
    }
    Ok(bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2)
}

/// Broadcast rate `B·log2(1 + γ)` with the fleet-minimum downlink SNR.
pub fn downlink_rate(config: &ChannelConfig, snapshot: &ChannelSnapshot) -> f64 {
    config.bandwidth_hz * snapshot.downlink_snr.ln_1p() / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(id: usize, d: f64) -> DeviceProfile {
        DeviceProfile {
            id,
            samples: 10,
            flops: 1e9,
            distance_km: d,
            tx_power_dbm: 24.0,
        }
    }

    #[test]
    fn path_loss_values() {
        assert!((path_loss_db(1.0).unwrap() - 128.1).abs() < 1e-12);
        assert!((path_loss_db(0.5).unwrap() - 116.78).abs() < 0.01);
        assert!((path_loss_db(0.1).unwrap() - 90.5).abs() < 0.01);
        assert!(path_loss_db(0.0).is_err());
        assert!(path_loss_db(-1.0).is_err());
    }

    #[test]
    fn snapshot_without_fading() {
        let cfg = ChannelConfig {
            fading: Fading::None,
            ..ChannelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let snap = draw_snapshot(&[profile(1, 0.5), profile(2, 0.5)], &cfg, 0, &mut rng).unwrap();
        let db = 10.0 * snap.uplink_snr[0].log10();
        assert!((db - 21.22).abs() < 0.01, "{db}");
        assert!((snap.uplink_snr[0] - 132.4).abs() / 132.4 < 0.01);
        assert_eq!(snap.uplink_snr[0], snap.uplink_snr[1]);
        assert!(draw_snapshot(&[], &cfg, 0, &mut rng).is_err());
    }

    #[test]
    fn downlink_is_fleet_minimum() {
        let cfg = ChannelConfig::default();
        let profiles = [profile(1, 0.05), profile(2, 0.3), profile(3, 0.45)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let snap = draw_snapshot(&profiles, &cfg, 2, &mut rng).unwrap();
        assert!(snap.downlink_snr > 0.0 && snap.downlink_snr.is_finite());
        assert_eq!(snap.round_index, 2);
        let nofade = ChannelConfig {
            fading: Fading::None,
            ..cfg
        };
        let snap = draw_snapshot(&profiles, &nofade, 0, &mut rng).unwrap();
        let own: Vec<f64> = profiles
            .iter()
            .map(|p| nofade.mean_snr(46.0, p.distance_km).unwrap())
            .collect();
        assert!(own.iter().all(|&g| snap.downlink_snr <= g));
        assert!((snap.downlink_snr - own[2]).abs() / own[2] < 1e-12);
    }

    #[test]
    fn rates() {
        assert!((uplink_rate(1e6, 1.0).unwrap() - 1e6).abs() < 1e-6);
        assert!((uplink_rate(1e6, 3.0).unwrap() - 2e6).abs() < 1e-6);
        let r = uplink_rate(1e6, 132.4).unwrap();
        assert!((r - 7.06e6).abs() / 7.06e6 < 0.005);
        assert_eq!(uplink_rate(0.0, 5.0).unwrap(), 0.0);
        assert!(uplink_rate(-1.0, 5.0).is_err());
        assert!(uplink_rate(1.0, -5.0).is_err());

        let snap = |g| ChannelSnapshot {
            uplink_snr: vec![],
            downlink_snr: g,
            round_index: 0,
        };
        let cfg = ChannelConfig::default();
        assert!((downlink_rate(&cfg, &snap(1.0)) - 1e6).abs() < 1e-6);
        let wide = ChannelConfig {
            bandwidth_hz: 20e6,
            ..cfg.clone()
        };
        assert!((downlink_rate(&wide, &snap(15.0)) - 80e6).abs() < 1e-3);
        assert!(downlink_rate(&cfg, &snap(2.0)) > downlink_rate(&cfg, &snap(1.0)));
    }

    #[test]
    fn placement_within_annulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = place_devices(1000, 0.5, 0.01, &mut rng).unwrap();
        assert!(d.iter().all(|&x| (0.01..=0.5).contains(&x)));
        assert!(place_devices(3, 0.1, 0.2, &mut rng).is_err());
    }

    #[test]
    fn scaled_noise_mode() {
        assert_eq!(snr_at_bandwidth(10.0, 1e6, 0.5e6, SnrMode::FixedReference), 10.0);
        assert_eq!(snr_at_bandwidth(10.0, 1e6, 0.5e6, SnrMode::BandwidthScaledNoise), 20.0);
    }
}
