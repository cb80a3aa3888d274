//! Scheduling distributions, device sampling and unbiased gradient aggregation.
//!
//! The proposed policy trades the variance of the importance-scaled gradient
//! against the expected upload latency:
//!
//! ```text
//! minimize  Σ_k ρ·(n_k/n)²·‖g_k‖² / p_k + (1 − ρ)·p_k·T_k^U   s.t. Σ p_k = 1, p ≥ 0
//! ```
//!
//! whose minimizer is `p_k = (n_k/n)·‖g_k‖·sqrt(ρ / ((1 − ρ)·T_k^U + λ*))`,
//! with the multiplier `λ*` found by bisection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{dot, GradientVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Closed-form importance- and channel-aware distribution with weight ρ.
    ImportanceChannel,
    /// Deterministic pick of the fastest uploaders (the ρ → 0 limit).
    ChannelAware,
    /// `p_k ∝ n_k·‖g_k‖` (the ρ = 1 case).
    ImportanceAware,
    UniformRandom,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::ImportanceChannel => "importance_channel",
            PolicyKind::ChannelAware => "channel_aware",
            PolicyKind::ImportanceAware => "importance_aware",
            PolicyKind::UniformRandom => "uniform_random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoRho {
    Auto,
}

/// The importance–latency weight: a fixed value or calibrated on round 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSetting {
    Value(f64),
    Auto(AutoRho),
}

/// How several sequentially sampled gradients are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiEstimator {
    /// Successive-sampling (Des Raj) estimator: exactly unbiased for any M.
    #[default]
    DesRaj,
    /// `(1/(M·n))·Σ_m n_{Y_m}/q_{Y_m}·g_{Y_m}`; biased for M ≥ 2.
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: PolicyKind,
    pub rho: RhoSetting,
    /// Devices scheduled per round `M`.
    pub devices_per_round: usize,
    /// Tolerance on `|Σ p − 1|` for the multiplier search.
    pub lambda_tolerance: f64,
    #[serde(default)]
    pub multi_estimator: MultiEstimator,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: PolicyKind::ImportanceChannel,
            rho: RhoSetting::Auto(AutoRho::Auto),
            devices_per_round: 1,
            lambda_tolerance: 1e-10,
            multi_estimator: MultiEstimator::DesRaj,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self, fleet_size: usize) -> Result<()> {
        if self.devices_per_round == 0 || self.devices_per_round > fleet_size {
            return Err(Error::invalid(format!(
                "devices_per_round = {} must lie in 1..={fleet_size}",
                self.devices_per_round
            )));
        }
        if let RhoSetting::Value(rho) = self.rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid(format!("rho = {rho} outside [0, 1]")));
            }
        }
        if !(self.lambda_tolerance > 0.0) {
            return Err(Error::invalid("lambda_tolerance must be positive"));
        }
        Ok(())
    }
}

/// A probability vector over the fleet and the multiplier that produced it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchedulingDistribution {
    pub p: Vec<f64>,
    /// `λ*`, present for the closed-form policy.
    pub lambda_star: Option<f64>,
    /// Set when every gradient norm was zero and the uniform distribution was used instead.
    pub fallback_uniform: bool,
    /// Evaluations of `Σ p(λ)` spent by the multiplier search.
    pub evaluations: usize,
}

impl SchedulingDistribution {
    pub fn uniform(k: usize) -> Self {
        SchedulingDistribution {
            p: vec![1.0 / k as f64; k],
            lambda_star: None,
            fallback_uniform: false,
            evaluations: 0,
        }
    }
}

/// Gradient divergence `‖(n_k/(n·p_k))·g_k − g‖²`.
pub fn importance_indicator(
    local: &GradientVector,
    n_k: usize,
    n: usize,
    p_k: f64,
    truth: &GradientVector,
) -> Result<f64> {
    if !(p_k > 0.0) {
        return Err(Error::invalid("importance of a device with zero probability"));
    }
    if local.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "importance indicator",
            expected: truth.len(),
            got: local.len(),
        });
    }
    let scale = n_k as f64 / (n as f64 * p_k);
    Ok(local
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (scale * a - b).powi(2))
        .sum())
}

fn check_lengths(sizes: &[usize], norms: &[f64], upload_s: &[f64]) -> Result<usize> {
    let k = sizes.len();
    if k == 0 {
        return Err(Error::invalid("empty fleet"));
    }
    for (what, len) in [("gradient norms", norms.len()), ("upload latencies", upload_s.len())] {
        if len != k {
            return Err(Error::DimensionMismatch {
                what,
                expected: k,
                got: len,
            });
        }
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("device with zero samples"));
    }
    if norms.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("gradient norms must be finite and nonnegative"));
    }
    if upload_s.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("upload latencies must be nonnegative"));
    }
    Ok(k)
}

/// The variance–latency objective minimized by the proposed policy.
///
/// A device with zero gradient contributes nothing to the variance term; a
/// device with a positive gradient and `p_k = 0` makes the objective infinite.
pub fn scheduling_objective(p: &[f64], sizes: &[usize], norms: &[f64], upload_s: &[f64], rho: f64) -> f64 {
    let n: usize = sizes.iter().sum();
    let mut total = 0.0;
    for k in 0..p.len() {
        let w = sizes[k] as f64 / n as f64 * norms[k];
        if w > 0.0 {
            if p[k] <= 0.0 {
                return f64::INFINITY;
            }
            total += rho * w * w / p[k];
        }
        if p[k] > 0.0 {
            total += (1.0 - rho) * p[k] * upload_s[k];
        }
    }
    total
}

/// Sum of the closed-form probabilities for a given multiplier offset.
struct MultiplierCurve {
    /// `(n_k/n)·‖g_k‖·sqrt(ρ)`, zero for excluded devices.
    weight: Vec<f64>,
    /// `(1 − ρ)·T_k^U − min_active (1 − ρ)·T^U`, nonnegative on active devices.
    gap: Vec<f64>,
    base: f64,
}

impl MultiplierCurve {
    fn probabilities(&self, offset: f64) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.gap)
            .map(|(&w, &g)| if w > 0.0 { w / (g + offset).sqrt() } else { 0.0 })
            .collect()
    }

    fn total(&self, offset: f64) -> f64 {
        self.probabilities(offset).iter().sum()
    }

    fn lambda(&self, offset: f64) -> f64 {
        offset - self.base
    }
}

/// Optimal single-device scheduling distribution for `0 < ρ < 1`.
///
/// `Σ_k p_k(λ)` is strictly decreasing in `λ` on `λ > −min_k (1 − ρ)·T_k^U`,
/// so the multiplier is bracketed and bisected. The search runs on the offset
/// `o = λ + min_k (1 − ρ)·T_k^U`, for which `[w_j², (Σ w)²]` is an exact
/// bracket (`j` the fastest active device). Bisection is geometric because `o`
/// may span many decades, and stops once `|Σ p − 1| ≤ tolerance`.
pub fn solve_optimal_distribution(
    sizes: &[usize],
    norms: &[f64],
    upload_s: &[f64],
    rho: f64,
    tolerance: f64,
) -> Result<SchedulingDistribution> {
    let k = check_lengths(sizes, norms, upload_s)?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!(
            "rho = {rho}: the closed form needs 0 < rho < 1; use the channel-aware or importance-aware baseline"
        )));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let n: usize = sizes.iter().sum();
    let weight: Vec<f64> = (0..k)
        .map(|i| {
            if upload_s[i].is_finite() {
                sizes[i] as f64 / n as f64 * norms[i] * rho.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let active: Vec<usize> = (0..k).filter(|&i| weight[i] > 0.0).collect();
    if active.is_empty() {
        return Ok(SchedulingDistribution {
            fallback_uniform: true,
            ..SchedulingDistribution::uniform(k)
        });
    }
    let scaled: Vec<f64> = upload_s.iter().map(|t| (1.0 - rho) * t).collect();
    let fastest = *active
        .iter()
        .min_by(|&&a, &&b| scaled[a].total_cmp(&scaled[b]))
        .expect("active set is nonempty");
    let base = scaled[fastest];
    let curve = MultiplierCurve {
        gap: (0..k)
            .map(|i| if weight[i] > 0.0 { scaled[i] - base } else { 0.0 })
            .collect(),
        weight,
        base,
    };

    let mut evaluations = 0;
    let mut eval = |o: f64| {
        evaluations += 1;
        curve.total(o)
    };
    // total(lo) >= 1 because the fastest device alone contributes w_j / sqrt(w_j²) = 1;
    // total(hi) <= Σ w / sqrt((Σ w)²) = 1.
    let mut lo = curve.weight[fastest].powi(2);
    let sum_w: f64 = curve.weight.iter().sum();
    let mut hi = sum_w * sum_w;
    let mut offset = hi;
    let mut total = eval(hi);
    while total > 1.0 + tolerance {
        // only reachable through rounding
        lo = hi;
        hi *= 2.0;
        offset = hi;
        total = eval(hi);
    }
    if (total - 1.0).abs() > tolerance {
        offset = lo;
        total = eval(lo);
        while (total - 1.0).abs() > tolerance {
            let mid = (lo * hi).sqrt();
            if !(mid > lo && mid < hi) {
                break;
            }
            offset = mid;
            total = eval(mid);
            if total > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let mut p = curve.probabilities(offset);
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(SchedulingDistribution {
        p,
        lambda_star: Some(curve.lambda(offset)),
        fallback_uniform: false,
        evaluations,
    })
}

/// A baseline's output: a sampling distribution or a fixed choice.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Random(SchedulingDistribution),
    /// Device indices in ascending latency order.
    Deterministic(Vec<usize>),
}

/// Baseline policies; `m` is the number of devices per round (used by the deterministic pick).
pub fn baseline_distribution(
    policy: PolicyKind,
    sizes: &[usize],
    norms: &[f64],
    upload_s: &[f64],
    m: usize,
) -> Result<Baseline> {
    let k = check_lengths(sizes, norms, upload_s)?;
    match policy {
        PolicyKind::ChannelAware => {
            if m == 0 || m > k {
                return Err(Error::invalid("channel-aware pick size out of range"));
            }
            let mut order: Vec<usize> = (0..k).collect();
            // stable sort keeps ascending index on ties
            order.sort_by(|&a, &b| upload_s[a].total_cmp(&upload_s[b]));
            order.truncate(m);
            Ok(Baseline::Deterministic(order))
        }
        PolicyKind::ImportanceAware => {
            let w: Vec<f64> = (0..k).map(|i| sizes[i] as f64 * norms[i]).collect();
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                Ok(Baseline::Random(SchedulingDistribution {
                    p: w.iter().map(|v| v / s).collect(),
                    lambda_star: None,
                    fallback_uniform: false,
                    evaluations: 0,
                }))
            } else {
                Ok(Baseline::Random(SchedulingDistribution {
                    fallback_uniform: true,
                    ..SchedulingDistribution::uniform(k)
                }))
            }
        }
        PolicyKind::UniformRandom => Ok(Baseline::Random(SchedulingDistribution::uniform(k))),
        PolicyKind::ImportanceChannel => Err(Error::invalid(
            "importance_channel is not a baseline; use solve_optimal_distribution",
        )),
    }
}

/// Inverse-CDF draw in ascending index order.
pub fn sample_one<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    pick(p, u * p.iter().sum::<f64>(), |_| true)
}

fn pick(weights: &[f64], target: f64, eligible: impl Fn(usize) -> bool) -> usize {
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if !eligible(i) || w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if target < acc {
            return i;
        }
    }
    last.expect("at least one eligible device with positive weight")
}

/// An ordered selection of distinct devices and the conditional probabilities used.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleDecision {
    /// Device indices (0-based) in selection order.
    pub sequence: Vec<usize>,
    /// `q_{Y_m}`: probability of each pick given the earlier picks.
    pub conditional_probs: Vec<f64>,
    /// The conditional distribution in force at each step.
    pub step_distributions: Vec<Vec<f64>>,
    /// Set when picks had to fall back to uniform over zero-probability devices.
    pub padded: bool,
}

/// Sequential sampling of `m` distinct devices, renormalizing `p` after each pick.
///
/// Once every positive-probability device is taken, remaining picks are
/// uniform over the unselected devices and the decision is flagged `padded`.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    p: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<ScheduleDecision> {
    let k = p.len();
    if m == 0 || m > k {
        return Err(Error::invalid(format!("cannot pick {m} of {k} devices")));
    }
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("probabilities must be nonnegative"));
    }
    let mut selected = vec![false; k];
    let mut decision = ScheduleDecision {
        sequence: Vec::with_capacity(m),
        conditional_probs: Vec::with_capacity(m),
        step_distributions: Vec::with_capacity(m),
        padded: false,
    };
    for _ in 0..m {
        let remaining: f64 = (0..k).filter(|&i| !selected[i]).map(|i| p[i]).sum();
        let u: f64 = rng.random();
        let (choice, q) = if remaining > 0.0 {
            let choice = pick(p, u * remaining, |i| !selected[i]);
            decision
                .step_distributions
                .push((0..k).map(|i| if selected[i] { 0.0 } else { p[i] / remaining }).collect());
            (choice, p[choice] / remaining)
        } else {
            decision.padded = true;
            let left = selected.iter().filter(|s| !**s).count();
            let uniform: Vec<f64> = (0..k).map(|i| if selected[i] { 0.0 } else { 1.0 }).collect();
            let choice = pick(&uniform, u * left as f64, |i| !selected[i]);
            decision
                .step_distributions
                .push(uniform.iter().map(|v| v / left as f64).collect());
            (choice, 1.0 / left as f64)
        };
        selected[choice] = true;
        decision.sequence.push(choice);
        decision.conditional_probs.push(q);
    }
    Ok(decision)
}

/// `ĝ = (n_X/(n·p_X))·g_X`.
pub fn aggregate_single(local: &GradientVector, n_x: usize, n: usize, p_x: f64) -> Result<GradientVector> {
    if !(p_x > 0.0) {
        return Err(Error::invalid("cannot rescale by a zero scheduling probability"));
    }
    Ok(local.scaled(n_x as f64 / (n as f64 * p_x)))
}

/// Combines the gradients of a sequential multi-device selection.
///
/// `gradients` is indexed by device; a scheduled index without a gradient is an error.
pub fn aggregate_multi(
    decision: &ScheduleDecision,
    gradients: &[GradientVector],
    sizes: &[usize],
    estimator: MultiEstimator,
) -> Result<GradientVector> {
    let m = decision.sequence.len();
    if m == 0 || decision.conditional_probs.len() != m {
        return Err(Error::invalid("malformed schedule decision"));
    }
    let n: f64 = sizes.iter().sum::<usize>() as f64;
    let dim = gradients
        .first()
        .ok_or_else(|| Error::invalid("no gradients"))?
        .len();
    let fetch = |k: usize| {
        gradients
            .get(k)
            .filter(|_| k < sizes.len())
            .ok_or_else(|| Error::invalid(format!("missing gradient for scheduled device index {k}")))
    };
    if estimator == MultiEstimator::DesRaj && covers_support(decision) {
        // every device with positive probability was observed: the total is known exactly
        let mut total = vec![0.0; dim];
        for &k in &decision.sequence {
            let g = fetch(k)?;
            let share = sizes[k] as f64 / n;
            for (t, v) in total.iter_mut().zip(g.values()) {
                *t += share * v;
            }
        }
        return Ok(GradientVector::new(total));
    }
    let mut acc = vec![0.0; dim];
    // Σ_{j<m} n_{Y_j}·g_{Y_j}/n, the part of the total already observed
    let mut seen = vec![0.0; dim];
    for (&k, &q) in decision.sequence.iter().zip(&decision.conditional_probs) {
        let g = fetch(k)?;
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                what: "scheduled gradient",
                expected: dim,
                got: g.len(),
            });
        }
        if !(q > 0.0) {
            return Err(Error::invalid("conditional probability must be positive"));
        }
        let share = sizes[k] as f64 / n;
        match estimator {
            MultiEstimator::Conditional => {
                for (a, v) in acc.iter_mut().zip(g.values()) {
                    *a += share / q * v;
                }
            }
            MultiEstimator::DesRaj => {
                for ((a, s), v) in acc.iter_mut().zip(&seen).zip(g.values()) {
                    *a += s + share / q * v;
                }
                for (s, v) in seen.iter_mut().zip(g.values()) {
                    *s += share * v;
                }
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    Ok(GradientVector::new(acc.into_iter().map(|a| a * inv_m).collect()))
}

/// Whether the selection contains the whole support of the initial distribution.
///
/// This depends on `p` alone (support size ≤ M), never on the random draw.
fn covers_support(decision: &ScheduleDecision) -> bool {
    let Some(initial) = decision.step_distributions.first() else {
        return false;
    };
    initial
        .iter()
        .enumerate()
        .all(|(k, &p)| p <= 0.0 || decision.sequence.contains(&k))
}

/// Sample-size weighted average over a selected subset.
pub fn classical_subset_average(
    selected: &[usize],
    gradients: &[GradientVector],
    sizes: &[usize],
) -> Result<GradientVector> {
    if selected.is_empty() {
        return Err(Error::invalid("subset average over an empty set"));
    }
    let dim = gradients
        .get(selected[0])
        .ok_or_else(|| Error::invalid("missing gradient"))?
        .len();
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for &k in selected {
        let g = gradients
            .get(k)
            .ok_or_else(|| Error::invalid(format!("missing gradient for device index {k}")))?;
        let w = sizes[k] as f64;
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += w * v;
        }
        total += w;
    }
    Ok(GradientVector::new(acc.into_iter().map(|a| a / total).collect()))
}

/// `E‖ĝ − g‖² = Σ_k (n_k/n)²·‖g_k‖²/p_k − ‖g‖²` for single-device scheduling.
pub fn variance_closed_form(p: &[f64], sizes: &[usize], norms: &[f64], truth_norm_sq: f64) -> f64 {
    let n: usize = sizes.iter().sum();
    let second_moment: f64 = (0..p.len())
        .filter(|&k| norms[k] > 0.0)
        .map(|k| {
            let w = sizes[k] as f64 / n as f64 * norms[k];
            w * w / p[k]
        })
        .sum();
    second_moment - truth_norm_sq
}

/// ρ that makes the weighted divergence and weighted latency terms equal
/// under uniform scheduling.
pub fn auto_rho(sizes: &[usize], norms: &[f64], upload_s: &[f64], truth_norm_sq: f64) -> Result<f64> {
    let k = check_lengths(sizes, norms, upload_s)?;
    let uniform = vec![1.0 / k as f64; k];
    let divergence = variance_closed_form(&uniform, sizes, norms, truth_norm_sq).max(0.0);
    let latency = upload_s.iter().sum::<f64>() / k as f64;
    if divergence + latency <= 0.0 {
        return Ok(0.5);
    }
    let rho = latency / (divergence + latency);
    Ok(rho.clamp(1e-12, 1.0 - 1e-12))
}

/// Inputs the scheduler sees in Step 4 of a round.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleInputs<'a> {
    pub sizes: &'a [usize],
    pub norms: &'a [f64],
    /// Full-band upload latency per device.
    pub upload_s: &'a [f64],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Importance-scaled, unbiased combination.
    Unbiased(MultiEstimator),
    /// Sample-size weighted subset average (deterministic selections).
    SubsetAverage,
}

/// The scheduler's output for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSchedule {
    pub decision: ScheduleDecision,
    pub distribution: Option<SchedulingDistribution>,
    pub aggregation: Aggregation,
}

/// Runs the configured policy: solve/build a distribution, then select `M` devices.
///
/// `rho` is the resolved weight for the proposed policy; ρ = 0 and ρ = 1 are
/// routed to the channel-aware and importance-aware baselines.
pub fn schedule_round<R: Rng + ?Sized>(
    config: &SchedulerConfig,
    rho: f64,
    inputs: ScheduleInputs<'_>,
    rng: &mut R,
) -> Result<RoundSchedule> {
    let m = config.devices_per_round;
    let policy = match config.policy {
        PolicyKind::ImportanceChannel if rho <= 0.0 => PolicyKind::ChannelAware,
        PolicyKind::ImportanceChannel if rho >= 1.0 => PolicyKind::ImportanceAware,
        other => other,
    };
    let distribution = match policy {
        PolicyKind::ImportanceChannel => solve_optimal_distribution(
            inputs.sizes,
            inputs.norms,
            inputs.upload_s,
            rho,
            config.lambda_tolerance,
        )?,
        _ => match baseline_distribution(policy, inputs.sizes, inputs.norms, inputs.upload_s, m)? {
            Baseline::Random(d) => d,
            Baseline::Deterministic(sequence) => {
                let k = inputs.sizes.len();
                let step_distributions = sequence
                    .iter()
                    .map(|&c| (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
                    .collect();
                return Ok(RoundSchedule {
                    decision: ScheduleDecision {
                        conditional_probs: vec![1.0; sequence.len()],
                        sequence,
                        step_distributions,
                        padded: false,
                    },
                    distribution: None,
                    aggregation: Aggregation::SubsetAverage,
                });
            }
        },
    };
    let decision = sample_without_replacement(&distribution.p, m, rng)?;
    Ok(RoundSchedule {
        decision,
        distribution: Some(distribution),
        aggregation: Aggregation::Unbiased(config.multi_estimator),
    })
}

/// Aggregates the scheduled gradients the way the schedule prescribes.
pub fn aggregate(schedule: &RoundSchedule, gradients: &[GradientVector], sizes: &[usize]) -> Result<GradientVector> {
    match schedule.aggregation {
        Aggregation::SubsetAverage => classical_subset_average(&schedule.decision.sequence, gradients, sizes),
        Aggregation::Unbiased(_) if schedule.decision.sequence.len() == 1 => {
            let k = schedule.decision.sequence[0];
            let g = gradients
                .get(k)
                .ok_or_else(|| Error::invalid(format!("missing gradient for device index {k}")))?;
            aggregate_single(g, sizes[k], sizes.iter().sum(), schedule.decision.conditional_probs[0])
        }
        Aggregation::Unbiased(estimator) => aggregate_multi(&schedule.decision, gradients, sizes, estimator),
    }
}

/// `‖a‖² − 2aᵀg + ‖g‖²` expansion of the divergence, used as an independent check.
pub fn importance_indicator_expanded(
    local: &GradientVector,
    n_k: usize,
    n: usize,
    p_k: f64,
    truth: &GradientVector,
) -> f64 {
    let scale = n_k as f64 / (n as f64 * p_k);
    let a = local.values();
    scale * scale * dot(a, a) - 2.0 * scale * dot(a, truth.values()) + dot(truth.values(), truth.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec())
    }

    #[test]
    fn indicator_zero_cases() {
        let g = gv(&[1.0, -2.0]);
        assert_eq!(importance_indicator(&g, 5, 5, 1.0, &g).unwrap(), 0.0);
        // scaled local equals truth: n_k/(n p) = 2
        let truth = gv(&[2.0, -4.0]);
        assert!(importance_indicator(&g, 1, 2, 0.25, &truth).unwrap() < 1e-24);
        assert!(importance_indicator(&g, 1, 2, 0.0, &truth).is_err());
    }

    #[test]
    fn symmetric_instance_is_uniform() {
        let d = solve_optimal_distribution(&[5; 4], &[2.0; 4], &[0.3; 4], 0.4, 1e-10).unwrap();
        for p in &d.p {
            assert!((p - 0.25).abs() < 1e-10);
        }
        assert!(d.lambda_star.is_some());
    }

    #[test]
    fn two_device_ratio() {
        let d = solve_optimal_distribution(&[1, 1], &[3.0, 1.0], &[0.2, 0.2], 0.5, 1e-12).unwrap();
        assert!((d.p[0] - 0.75).abs() < 1e-10, "{:?}", d.p);
        assert!((d.p[1] - 0.25).abs() < 1e-10);
        // closed form reproduced with the returned multiplier
        let lam = d.lambda_star.unwrap();
        let raw = 0.5 * 3.0 * (0.5f64 / (0.5 * 0.2 + lam)).sqrt();
        assert!((raw - d.p[0]).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_fall_back_to_uniform() {
        let d = solve_optimal_distribution(&[1, 2], &[0.0, 0.0], &[1.0, 2.0], 0.5, 1e-10).unwrap();
        assert!(d.fallback_uniform);
        assert_eq!(d.p, vec![0.5, 0.5]);
        // zero-norm device excluded, not divided by
        let d = solve_optimal_distribution(&[1, 2], &[0.0, 4.0], &[0.1, 2.0], 0.5, 1e-10).unwrap();
        assert_eq!(d.p, vec![0.0, 1.0]);
    }

    #[test]
    fn endpoint_rho_is_rejected() {
        assert!(solve_optimal_distribution(&[1], &[1.0], &[1.0], 0.0, 1e-10).is_err());
        assert!(solve_optimal_distribution(&[1], &[1.0], &[1.0], 1.0, 1e-10).is_err());
    }

    #[test]
    fn baselines() {
        let sizes = [1, 2, 1];
        match baseline_distribution(PolicyKind::ChannelAware, &sizes, &[1.0; 3], &[3.0, 1.0, 2.0], 1).unwrap() {
            Baseline::Deterministic(v) => assert_eq!(v, vec![1]),
            other => panic!("{other:?}"),
        }
        match baseline_distribution(PolicyKind::ImportanceAware, &[1, 2], &[4.0, 1.0], &[1.0; 2], 1).unwrap() {
            Baseline::Random(d) => {
                assert!((d.p[0] - 2.0 / 3.0).abs() < 1e-15);
                assert!((d.p[1] - 1.0 / 3.0).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        match baseline_distribution(PolicyKind::UniformRandom, &[1; 4], &[1.0; 4], &[1.0; 4], 1).unwrap() {
            Baseline::Random(d) => assert_eq!(d.p, vec![0.25; 4]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_one_degenerate_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_one(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
        let draws = 100_000;
        let hits = (0..draws).filter(|_| sample_one(&[0.5, 0.5], &mut rng) == 0).count();
        assert!((hits as f64 / draws as f64 - 0.5).abs() < 0.01);
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_one(&[0.2, 0.3, 0.5], &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
    }

    #[test]
    fn conditional_renormalization() {
        // find a draw where device 0 goes first
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = sample_without_replacement(&[0.5, 0.3, 0.2], 2, &mut rng).unwrap();
            if d.sequence[0] == 0 {
                let q = &d.step_distributions[1];
                assert_eq!(q[0], 0.0);
                assert!((q[1] - 0.6).abs() < 1e-15 && (q[2] - 0.4).abs() < 1e-15);
                assert!((d.conditional_probs[0] - 0.5).abs() < 1e-15);
                return;
            }
        }
        panic!("device 0 never drawn first");
    }

    #[test]
    fn full_selection_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = sample_without_replacement(&[0.1, 0.2, 0.3, 0.4], 4, &mut rng).unwrap();
        let mut s = d.sequence.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
        assert!((d.conditional_probs[3] - 1.0).abs() < 1e-12);
        assert!(!d.padded);
    }

    #[test]
    fn padding_when_too_few_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = sample_without_replacement(&[0.0, 1.0, 0.0], 2, &mut rng).unwrap();
        assert_eq!(d.sequence[0], 1);
        assert!(d.padded);
        assert!((d.conditional_probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_aggregation_scale() {
        let g = gv(&[1.0, 2.0]);
        let a = aggregate_single(&g, 1, 2, 0.25).unwrap();
        assert_eq!(a.values(), &[2.0, 4.0]);
        assert_eq!(aggregate_single(&g, 3, 3, 1.0).unwrap(), g);
        assert!(aggregate_single(&g, 1, 2, 0.0).is_err());
    }

    #[test]
    fn multi_reduces_to_single() {
        let grads = [gv(&[1.0, 0.0]), gv(&[0.0, 3.0])];
        let dec = ScheduleDecision {
            sequence: vec![1],
            conditional_probs: vec![0.4],
            step_distributions: vec![],
            padded: false,
        };
        let sizes = [2, 3];
        let single = aggregate_single(&grads[1], 3, 5, 0.4).unwrap();
        for est in [MultiEstimator::DesRaj, MultiEstimator::Conditional] {
            let multi = aggregate_multi(&dec, &grads, &sizes, est).unwrap();
            for (a, b) in multi.values().iter().zip(single.values()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let missing = ScheduleDecision {
            sequence: vec![5],
            ..dec
        };
        assert!(aggregate_multi(&missing, &grads, &sizes, MultiEstimator::DesRaj).is_err());
    }

    #[test]
    fn two_device_enumeration() {
        // p = (0.6, 0.4), M = 2: orders (0,1) w.p. 0.6 and (1,0) w.p. 0.4
        let grads = [gv(&[1.0, 2.0]), gv(&[-3.0, 0.5])];
        let sizes = [2, 5];
        let truth = crate::learners::ground_truth_global_gradient(&grads, &sizes).unwrap();
        let orders = [(vec![0, 1], vec![0.6, 1.0], 0.6), (vec![1, 0], vec![0.4, 1.0], 0.4)];
        let expect = |est| {
            let mut e = [0.0; 2];
            for (seq, q, prob) in &orders {
                let dec = ScheduleDecision {
                    sequence: seq.clone(),
                    conditional_probs: q.clone(),
                    step_distributions: vec![],
                    padded: false,
                };
                let g = aggregate_multi(&dec, &grads, &sizes, est).unwrap();
                for i in 0..2 {
                    e[i] += prob * g.values()[i];
                }
            }
            e
        };
        let unbiased = expect(MultiEstimator::DesRaj);
        for i in 0..2 {
            assert!((unbiased[i] - truth.values()[i]).abs() < 1e-14);
        }
        // the conditional form has mean (1.4·n1·g1 + 1.6·n2·g2)/(2n)
        let biased = expect(MultiEstimator::Conditional);
        for i in 0..2 {
            let closed = (1.4 * 2.0 * grads[0].values()[i] + 1.6 * 5.0 * grads[1].values()[i]) / 14.0;
            assert!((biased[i] - closed).abs() < 1e-14);
            assert!((biased[i] - truth.values()[i]).abs() > 1e-3);
        }
    }

    #[test]
    fn subset_average() {
        let grads = [gv(&[4.0]), gv(&[8.0]), gv(&[100.0])];
        let sizes = [1, 3, 7];
        assert_eq!(classical_subset_average(&[1], &grads, &sizes).unwrap().values(), &[8.0]);
        assert_eq!(classical_subset_average(&[0, 1], &grads, &sizes).unwrap().values(), &[7.0]);
        let all = classical_subset_average(&[0, 1, 2], &grads, &sizes).unwrap();
        let truth = crate::learners::ground_truth_global_gradient(&grads, &sizes).unwrap();
        assert!((all.values()[0] - truth.values()[0]).abs() < 1e-12);
        assert!(classical_subset_average(&[], &grads, &sizes).is_err());
    }

    #[test]
    fn auto_rho_balances_terms() {
        let sizes = [10, 20, 30];
        let norms = [1.0, 2.0, 0.5];
        let upload = [1e-3, 2e-3, 5e-4];
        let rho = auto_rho(&sizes, &norms, &upload, 0.3).unwrap();
        let k = 3.0;
        let div = variance_closed_form(&[1.0 / k; 3], &sizes, &norms, 0.3);
        let lat = upload.iter().sum::<f64>() / k;
        assert!((rho * div - (1.0 - rho) * lat).abs() < 1e-15);
    }

    #[test]
    fn schedule_round_routes_endpoints() {
        let cfg = SchedulerConfig {
            policy: PolicyKind::ImportanceChannel,
            rho: RhoSetting::Value(0.0),
            ..SchedulerConfig::default()
        };
        let inputs = ScheduleInputs {
            sizes: &[1, 1, 1],
            norms: &[1.0, 1.0, 1.0],
            upload_s: &[3.0, 1.0, 2.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = schedule_round(&cfg, 0.0, inputs, &mut rng).unwrap();
        assert_eq!(s.decision.sequence, vec![1]);
        assert_eq!(s.aggregation, Aggregation::SubsetAverage);
        let s = schedule_round(&cfg, 1.0, inputs, &mut rng).unwrap();
        assert_eq!(s.distribution.unwrap().p, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn rho_setting_parses() {
        let v: RhoSetting = serde_json::from_str("0.25").unwrap();
        assert_eq!(v, RhoSetting::Value(0.25));
        let a: RhoSetting = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(a, RhoSetting::Auto(AutoRho::Auto));
    }
}
