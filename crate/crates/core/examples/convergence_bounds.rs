//! Runs the strongly convex quadratic task over many seeds and prints the
//! observed mean loss gap next to the one-round, cumulative and O(1/t) bounds.
//!
//! Usage: `cargo run --release --example convergence_bounds [SEEDS]` (default 30).

use feel_sched::verify;

fn main() -> feel_sched::Result<()> {
    let count: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let seeds: Vec<u64> = (1..=count).collect();
    let trace = verify::bounds_trace(&verify::bounds_config(), &seeds)?;
    println!(
        "l = {:.4}, mu = {:.4}, initial gap {:.4e}, zeta = {:.4e}",
        trace.params.lipschitz, trace.params.strong_convexity, trace.gap1, trace.zeta
    );
    println!("round   observed gap   one-round bound   cumulative bound   envelope");
    for r in trace.rows.iter().filter(|r| r.round == 1 || r.round % 20 == 0) {
        println!(
            "{:>5}   {:>12.4e}   {:>15.4e}   {:>16.4e}   {:>8.4e}",
            r.round, r.observed_gap, r.lemma2.mean_rhs, r.theorem2.mean_rhs, r.envelope
        );
    }
    println!(
        "all rounds: one-round {}, cumulative {}, envelope {}",
        trace.lemma2_holds(),
        trace.theorem2_holds(),
        trace.envelope_holds()
    );
    Ok(())
}
