//! Solves for the optimal single-device scheduling distribution across the
//! importance/latency trade-off and compares it with the baselines.

use feel_sched::scheduler::{self, Baseline, PolicyKind};

fn main() -> feel_sched::Result<()> {
    let sizes = [120, 80, 100, 100, 60];
    let norms = [2.0, 0.5, 1.2, 3.0, 0.8];
    let upload_s = [0.8, 0.1, 0.3, 2.5, 0.2];

    println!("rho      p_1     p_2     p_3     p_4     p_5    lambda*      objective");
    for rho in [1e-3, 0.1, 0.5, 0.9, 0.999] {
        let d = scheduler::solve_optimal_distribution(&sizes, &norms, &upload_s, rho, 1e-12)?;
        let ps: Vec<String> = d.p.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "{rho:<6}  {}  {:>9.3e}  {:>12.5e}",
            ps.join("  "),
            d.lambda_star.unwrap_or(f64::NAN),
            scheduler::scheduling_objective(&d.p, &sizes, &norms, &upload_s, rho)
        );
    }

    for policy in [PolicyKind::ImportanceAware, PolicyKind::UniformRandom, PolicyKind::ChannelAware] {
        match scheduler::baseline_distribution(policy, &sizes, &norms, &upload_s, 1)? {
            Baseline::Random(d) => println!("{:<17} p = {:.4?}", policy.name(), d.p),
            Baseline::Deterministic(pick) => println!("{:<17} always device {}", policy.name(), pick[0] + 1),
        }
    }
    Ok(())
}
