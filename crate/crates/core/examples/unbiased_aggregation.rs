//! Importance-scaled aggregation recovers the full-batch gradient in expectation,
//! for one device per round and for sequential multi-device selection.

use feel_sched::analysis;
use feel_sched::learners::GradientVector;
use feel_sched::scheduler::{self, MultiEstimator, ScheduleDecision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> feel_sched::Result<()> {
    let sizes = [50, 150, 100, 200];
    let n: usize = sizes.iter().sum();
    let grads = vec![
        GradientVector::new(vec![1.0, -2.0, 0.5]),
        GradientVector::new(vec![0.0, 1.0, 1.0]),
        GradientVector::new(vec![-3.0, 0.5, 2.0]),
        GradientVector::new(vec![0.5, 0.5, -1.0]),
    ];
    let truth: Vec<f64> = (0..3)
        .map(|j| (0..4).map(|k| sizes[k] as f64 * grads[k].values()[j]).sum::<f64>() / n as f64)
        .collect();
    let p = [0.1, 0.2, 0.3, 0.4];

    // one device: exact expectation over the four outcomes
    let mut mean = vec![0.0; 3];
    for k in 0..4 {
        let g = scheduler::aggregate_single(&grads[k], sizes[k], n, p[k])?;
        for (m, v) in mean.iter_mut().zip(g.values()) {
            *m += p[k] * v;
        }
    }
    println!("M = 1, exact expectation error {:.2e}", max_abs_diff(&mean, &truth));

    // two and three devices: every ordered selection, weighted by its probability
    for m in [2, 3] {
        for estimator in [MultiEstimator::DesRaj, MultiEstimator::Conditional] {
            let mut mean = vec![0.0; 3];
            for s in analysis::enumerate_sequences(&p, m) {
                let decision = ScheduleDecision {
                    sequence: s.sequence.clone(),
                    conditional_probs: s.conditional.clone(),
                    step_distributions: Vec::new(),
                    padded: false,
                };
                let g = scheduler::aggregate_multi(&decision, &grads, &sizes, estimator)?;
                for (acc, v) in mean.iter_mut().zip(g.values()) {
                    *acc += s.probability * v;
                }
            }
            println!("M = {m}, {estimator:?}: expectation error {:.2e}", max_abs_diff(&mean, &truth));
        }
    }

    // Monte Carlo with the sampler itself
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 100_000;
    let mut mean = vec![0.0; 3];
    for _ in 0..draws {
        let d = scheduler::sample_without_replacement(&p, 2, &mut rng)?;
        let g = scheduler::aggregate_multi(&d, &grads, &sizes, MultiEstimator::DesRaj)?;
        for (acc, v) in mean.iter_mut().zip(g.values()) {
            *acc += v / draws as f64;
        }
    }
    println!("M = 2, Monte Carlo over {draws} draws: error {:.2e}", max_abs_diff(&mean, &truth));
    Ok(())
}
