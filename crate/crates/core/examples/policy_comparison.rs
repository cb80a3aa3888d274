//! Compares the scheduling policies on the shipped non-IID task: median
//! simulated time to the target accuracy and median final accuracy.
//!
//! Usage: `cargo run --release --example policy_comparison [SEEDS] [M]` (defaults 20, 1).

use feel_sched::cli::{self, CompareEntry, TargetRule};
use feel_sched::config::ExperimentConfig;

fn main() -> feel_sched::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let m: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut base = ExperimentConfig::default();
    base.scheduler.devices_per_round = m;
    let entries = [
        CompareEntry::new(base.clone()),
        CompareEntry::variant(&base, "scheduler.policy=\"importance_aware\"")?,
        CompareEntry::variant(&base, "scheduler.policy=\"channel_aware\"")?,
        CompareEntry::variant(&base, "scheduler.policy=\"uniform_random\"")?,
    ];
    let seeds: Vec<u64> = (1..=count).collect();
    let cmp = cli::compare(&entries, &seeds, TargetRule::default(), false)?;
    print!("{}", cmp.to_table());
    Ok(())
}
