//! Splits the band across a scheduled set so every upload finishes together,
//! and checks the split against a bisection search for the minimax deadline.

use feel_sched::analysis;
use feel_sched::channel::SnrMode;
use feel_sched::latency::{self, PayloadSpec};

fn main() -> feel_sched::Result<()> {
    let snrs = [3.0, 40.0, 0.8, 150.0, 12.0];
    let total_hz = 1e6;
    let payload = PayloadSpec {
        params: 101,
        bits_per_element: 16,
        flops_per_sample: 0.0,
    };
    let bits = payload.bits();

    let split = latency::allocate_bandwidth(&snrs, total_hz)?;
    let (oracle_bw, oracle_t) = analysis::minimax_bandwidth_oracle(&snrs, total_hz, bits, SnrMode::FixedReference)?;
    println!("SNR[dB]   share[kHz]   upload[ms]   oracle share[kHz]");
    for ((g, b), ob) in snrs.iter().zip(&split).zip(&oracle_bw) {
        let t = latency::upload_latency(&payload, *b, *g)?.seconds().unwrap_or(f64::INFINITY);
        println!("{:>7.2}   {:>10.3}   {:>10.5}   {:>17.3}", 10.0 * g.log10(), b / 1e3, t * 1e3, ob / 1e3);
    }
    println!("sum of shares {:.6e} Hz, oracle deadline {:.5} ms", split.iter().sum::<f64>(), oracle_t * 1e3);

    let scaled = latency::allocate_bandwidth_scaled_noise(&snrs, total_hz, bits)?;
    let (_, scaled_t) = analysis::minimax_bandwidth_oracle(&snrs, total_hz, bits, SnrMode::BandwidthScaledNoise)?;
    println!(
        "with band-scaled noise: shares {:?} kHz, deadline {:.5} ms",
        scaled.iter().map(|b| (b / 1e3 * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        scaled_t * 1e3
    );
    Ok(())
}
