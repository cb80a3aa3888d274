//! Places a fleet, draws one block-fading round and prints SNRs, rates and upload latencies.

use feel_sched::channel::{self, ChannelConfig, DeviceProfile};
use feel_sched::latency::{self, PayloadSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> feel_sched::Result<()> {
    let config = ChannelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let distances = channel::place_devices(8, 0.5, 0.01, &mut rng)?;
    let profiles: Vec<DeviceProfile> = distances
        .iter()
        .enumerate()
        .map(|(i, &d)| DeviceProfile {
            id: i + 1,
            samples: 100,
            flops: 1e9,
            distance_km: d,
            tx_power_dbm: 24.0,
        })
        .collect();
    let snapshot = channel::draw_snapshot(&profiles, &config, 0, &mut rng)?;
    let payload = PayloadSpec {
        params: 101,
        bits_per_element: 16,
        flops_per_sample: 50.0,
    };
    let uploads = latency::full_band_upload_latencies(&payload, &config, &snapshot)?;

    println!("device  distance[km]  path loss[dB]  uplink SNR[dB]  rate[Mbit/s]  upload[ms]");
    for (p, (&snr, &t)) in profiles.iter().zip(snapshot.uplink_snr.iter().zip(&uploads)) {
        println!(
            "{:>6}  {:>12.3}  {:>13.1}  {:>14.1}  {:>12.3}  {:>10.4}",
            p.id,
            p.distance_km,
            channel::path_loss_db(p.distance_km)?,
            10.0 * snr.log10(),
            channel::uplink_rate(config.bandwidth_hz, snr)? / 1e6,
            t * 1e3
        );
    }
    println!(
        "broadcast at the fleet-minimum downlink SNR ({:.1} dB): {:.4} ms",
        10.0 * snapshot.downlink_snr.log10(),
        latency::broadcast_latency(&payload, &config, &snapshot) * 1e3
    );
    Ok(())
}
