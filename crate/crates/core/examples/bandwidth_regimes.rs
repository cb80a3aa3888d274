//! One device versus ten per round, at a narrow (1 MHz) and a wide (20 MHz) band.
//!
//! Usage: `cargo run --release --example bandwidth_regimes [SEEDS]` (default 20).

use feel_sched::cli::{self, CompareEntry, TargetRule};
use feel_sched::config::ExperimentConfig;

const CONFIG: &str = include_str!("../configs/bandwidth_regimes.toml");

fn main() -> feel_sched::Result<()> {
    let count: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let base = ExperimentConfig::from_str_any(CONFIG)?;
    let seeds: Vec<u64> = (1..=count).collect();
    for bandwidth in ["1e6", "2e7"] {
        let entries = ["1", "10"]
            .iter()
            .map(|m| {
                CompareEntry::variant(
                    &base,
                    &format!("channel.bandwidth_hz={bandwidth}; scheduler.devices_per_round={m}"),
                )
            })
            .collect::<feel_sched::Result<Vec<_>>>()?;
        let cmp = cli::compare(&entries, &seeds, TargetRule::Fixed(0.9), true)?;
        print!("{}", cmp.to_table());
        println!();
    }
    Ok(())
}
