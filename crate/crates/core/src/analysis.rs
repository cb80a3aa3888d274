//! Numerical checks of the convergence theory and brute-force oracles.
//!
//! Bounds are evaluated on traces produced by the trainer. Monte Carlo
//! comparisons are made per round on the seed-wise difference between the
//! observed gap and the bound, accepted when its mean is at most three
//! standard errors above zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::channel::{self, SnrMode};
use crate::error::{Error, Result};
use crate::learners::{self, LabeledSample, LearnerKind, ModelParams};
use crate::scheduler;
use crate::trainer::RunResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    /// Exact Hessian eigenvalue bounds of a quadratic loss.
    Analytic,
    /// Sampled gradient-difference ratios; not a certified bound.
    Estimated,
}

/// Smoothness `ℓ` and strong convexity `μ` of the global loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConvexityParams {
    pub lipschitz: f64,
    pub strong_convexity: f64,
    pub source: ParamSource,
}

fn design_matrix(samples: &[LabeledSample]) -> Result<DMatrix<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no samples"))?;
    let d = first.features.len();
    if samples.iter().any(|s| s.features.len() != d) {
        return Err(Error::invalid("ragged feature vectors"));
    }
    Ok(DMatrix::from_fn(samples.len(), d, |i, j| samples[i].features[j]))
}

impl ConvexityParams {
    pub fn new(lipschitz: f64, strong_convexity: f64, source: ParamSource) -> Result<Self> {
        if !(strong_convexity > 0.0 && strong_convexity <= lipschitz && lipschitz.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < mu <= l, got mu = {strong_convexity}, l = {lipschitz}"
            )));
        }
        Ok(ConvexityParams {
            lipschitz,
            strong_convexity,
            source,
        })
    }

    /// Extreme eigenvalues of the least-squares Hessian `(1/n)·XᵀX`.
    pub fn from_quadratic(samples: &[LabeledSample]) -> Result<Self> {
        let x = design_matrix(samples)?;
        let hessian = x.transpose() * &x / samples.len() as f64;
        let eig = SymmetricEigen::new(hessian).eigenvalues;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        Self::new(max, min, ParamSource::Analytic)
    }

    /// `1/(2μ)`: the largest admissible step for the cumulative bound.
    pub fn step_limit(&self) -> f64 {
        0.5 / self.strong_convexity
    }
}

/// Minimizer and minimum of the pooled least-squares loss.
pub fn quadratic_optimum(samples: &[LabeledSample]) -> Result<(ModelParams, f64)> {
    let x = design_matrix(samples)?;
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.label));
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("design matrix is rank deficient"))?
        .solve(&rhs);
    let model = ModelParams::new(w.iter().cloned().collect())?;
    let loss = learners::local_loss(&model, samples, LearnerKind::LinearRegression)?;
    Ok((model, loss))
}

/// Sampled estimate of `ℓ` and `μ` from gradient differences at random pairs.
///
/// `ℓ` is the largest observed `‖∇L(u) − ∇L(v)‖/‖u − v‖` and `μ` the smallest
/// observed `(∇L(u) − ∇L(v))ᵀ(u − v)/‖u − v‖²`, over pairs drawn from `N(0, scale²·I)`.
pub fn estimate_convexity<R: Rng + ?Sized>(
    fleet: &[&[LabeledSample]],
    kind: LearnerKind,
    params_len: usize,
    pairs: usize,
    scale: f64,
    rng: &mut R,
) -> Result<ConvexityParams> {
    let grad = |w: &ModelParams| -> Result<Vec<f64>> {
        let locals = fleet
            .iter()
            .map(|d| learners::local_gradient(w, d, kind))
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = fleet.iter().map(|d| d.len()).collect();
        Ok(learners::ground_truth_global_gradient(&locals, &sizes)?.into_values())
    };
    let mut l_max: f64 = 0.0;
    let mut mu_min = f64::INFINITY;
    for _ in 0..pairs {
        let u: Vec<f64> = (0..params_len)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let v: Vec<f64> = (0..params_len)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let gu = grad(&ModelParams::new(u.clone())?)?;
        let gv = grad(&ModelParams::new(v.clone())?)?;
        let dw: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = gu.iter().zip(&gv).map(|(a, b)| a - b).collect();
        let dw2 = learners::dot(&dw, &dw);
        if dw2 == 0.0 {
            continue;
        }
        l_max = l_max.max((learners::dot(&dg, &dg) / dw2).sqrt());
        mu_min = mu_min.min(learners::dot(&dg, &dw) / dw2);
    }
    if !(mu_min > 0.0) {
        return Err(Error::invalid(format!(
            "sampled curvature {mu_min} is not positive: loss is not strongly convex on the sample"
        )));
    }
    ConvexityParams::new(l_max.max(mu_min), mu_min, ParamSource::Estimated)
}

/// One-round bound: `gap − η(1 − ηℓ/2)‖g‖² + (ℓ/2)η²·V`.
pub fn lemma2_rhs(gap: f64, eta: f64, lipschitz: f64, grad_norm_sq: f64, variance: f64) -> f64 {
    gap - eta * (1.0 - 0.5 * eta * lipschitz) * grad_norm_sq + 0.5 * lipschitz * eta * eta * variance
}

/// The two terms of the cumulative bound after each of `t = 1..=T` rounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CumulativeBound {
    /// `Π_{i≤t}(1 − 2μη^i)·gap¹`.
    pub contraction: Vec<f64>,
    /// `(ℓ/2)·Σ_{i≤t} A^i·(η^i)²·s^i`.
    pub accumulated: Vec<f64>,
}

impl CumulativeBound {
    pub fn total(&self, t: usize) -> f64 {
        self.contraction[t] + self.accumulated[t]
    }

    pub fn len(&self) -> usize {
        self.contraction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contraction.is_empty()
    }
}

/// Cumulative bound on `E{L(w^{t+1})} − L*`.
///
/// `second_moments[i]` is the round-`i` value of
/// `(1/n)·Σ_k n_k‖g_k^i‖·sqrt(((1 − ρ)T_k^{U,i} + λ^{i*})/ρ)`, i.e. `E‖ĝ^i‖²`
/// under the optimal distribution. Every step must satisfy `η^i ≤ 1/(2μ)`.
pub fn theorem2_bound(
    gap1: f64,
    params: &ConvexityParams,
    lrs: &[f64],
    second_moments: &[f64],
) -> Result<CumulativeBound> {
    if lrs.len() != second_moments.len() {
        return Err(Error::DimensionMismatch {
            what: "learning rates vs second moments",
            expected: lrs.len(),
            got: second_moments.len(),
        });
    }
    let limit = params.step_limit();
    for (i, &eta) in lrs.iter().enumerate() {
        // the boundary value keeps the factor 1 − 2μη in [0, 1)
        if !(eta > 0.0) || eta > limit * (1.0 + 1e-12) {
            return Err(Error::StepSize {
                round: i + 1,
                eta,
                limit,
            });
        }
    }
    let factors: Vec<f64> = lrs
        .iter()
        .map(|eta| (1.0 - 2.0 * params.strong_convexity * eta).max(0.0))
        .collect();
    let mut contraction = Vec::with_capacity(lrs.len());
    let mut accumulated = Vec::with_capacity(lrs.len());
    let (mut prod, mut acc) = (gap1, 0.0);
    for i in 0..lrs.len() {
        // A^j for j < i gains the factor of round i; the new term enters with A^i = 1
        prod *= factors[i];
        acc = acc * factors[i] + 0.5 * params.lipschitz * lrs[i] * lrs[i] * second_moments[i];
        contraction.push(prod);
        accumulated.push(acc);
    }
    Ok(CumulativeBound {
        contraction,
        accumulated,
    })
}

/// `ζ = max{ℓG²χ²/(2(2μχ − 1)), (1 + ν)·gap¹}`; requires `χ > 1/(2μ)`.
pub fn corollary1_zeta(params: &ConvexityParams, chi: f64, nu: f64, g_max: f64, gap1: f64) -> Result<f64> {
    let denom = 2.0 * params.strong_convexity * chi - 1.0;
    if !(denom > 0.0) || !(nu > 0.0) {
        return Err(Error::invalid(format!(
            "envelope needs chi > 1/(2 mu) = {} and nu > 0",
            params.step_limit()
        )));
    }
    let first = params.lipschitz * g_max * g_max * chi * chi / (2.0 * denom);
    Ok(first.max((1.0 + nu) * gap1))
}

/// `ζ/(t + ν)` for `t = 1..=rounds`.
pub fn corollary1_envelope(zeta: f64, nu: f64, rounds: usize) -> Vec<f64> {
    (1..=rounds).map(|t| zeta / (t as f64 + nu)).collect()
}

/// Seed-wise comparison `lhs ≤ rhs` in the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanComparison {
    pub mean_lhs: f64,
    pub mean_rhs: f64,
    /// Standard error of the mean of `lhs − rhs`.
    pub std_error: f64,
    /// `mean_rhs − mean_lhs + 3·std_error`; nonnegative means pass.
    pub margin: f64,
}

impl MeanComparison {
    pub fn new(lhs: &[f64], rhs: &[f64]) -> Self {
        let n = lhs.len().min(rhs.len()) as f64;
        let diffs: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let mean_d = diffs.iter().sum::<f64>() / n;
        let var = if n > 1.0 {
            diffs.iter().map(|d| (d - mean_d).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std_error = (var / n).sqrt();
        MeanComparison {
            mean_lhs: lhs.iter().sum::<f64>() / n,
            mean_rhs: rhs.iter().sum::<f64>() / n,
            std_error,
            margin: -mean_d + 3.0 * std_error,
        }
    }

    pub fn holds(&self) -> bool {
        self.margin >= -1e-12 * self.mean_rhs.abs().max(1e-300)
    }
}

/// Per-round bound values against the observed Monte Carlo mean gap.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub round: usize,
    /// Mean of `L(w^{t+1}) − L*` over seeds.
    pub observed_gap: f64,
    pub lemma2: MeanComparison,
    pub theorem2: MeanComparison,
    /// Mean contraction and accumulated terms of the cumulative bound.
    pub theorem2_terms: (f64, f64),
    pub envelope: f64,
    /// Smallest `‖g^t‖² − 2μ·gap^t` over seeds.
    pub lemma5_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundTrace {
    pub params: ConvexityParams,
    pub rows: Vec<BoundRow>,
    /// Largest realized `‖ĝ^t‖` over all seeds and rounds.
    pub g_max: f64,
    pub zeta: f64,
    pub gap1: f64,
}

impl BoundTrace {
    pub fn lemma2_holds(&self) -> bool {
        self.rows.iter().all(|r| r.lemma2.holds())
    }

    pub fn theorem2_holds(&self) -> bool {
        self.rows.iter().all(|r| r.theorem2.holds())
    }

    pub fn envelope_holds(&self) -> bool {
        self.rows.iter().all(|r| r.observed_gap <= r.envelope)
    }

    pub fn lemma5_holds(&self) -> bool {
        self.rows.iter().all(|r| r.lemma5_slack >= -1e-10)
    }
}

/// Evaluates every bound on a batch of runs of the same quadratic experiment.
///
/// Runs must use single-device random scheduling so each report carries the
/// closed-form variance; the cumulative bound uses the realized
/// latency-weighted sums when present and `V + ‖g‖²` otherwise.
pub fn bound_trace(
    runs: &[RunResult],
    optimum_loss: f64,
    total_samples: usize,
    params: ConvexityParams,
    chi: f64,
    nu: f64,
) -> Result<BoundTrace> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs"))?;
    let rounds = first.reports.len();
    if runs.iter().any(|r| r.reports.len() != rounds) {
        return Err(Error::invalid("runs have different lengths"));
    }
    let gap1 = first.initial_loss - optimum_loss;
    let mut cumulative = Vec::with_capacity(runs.len());
    let mut g_max: f64 = 0.0;
    for run in runs {
        let mut lrs = Vec::with_capacity(rounds);
        let mut moments = Vec::with_capacity(rounds);
        for r in &run.reports {
            g_max = g_max.max(r.update_norm);
            lrs.push(r.lr);
            let moment = match (r.latency_weighted_sum, r.variance) {
                (Some(s), _) => s / total_samples as f64,
                (None, Some(v)) => v + r.truth_norm_sq,
                (None, None) => {
                    return Err(Error::invalid(format!(
                        "round {} has no second-moment record",
                        r.round
                    )))
                }
            };
            moments.push(moment);
        }
        cumulative.push(theorem2_bound(run.initial_loss - optimum_loss, &params, &lrs, &moments)?);
    }
    let zeta = corollary1_zeta(&params, chi, nu, g_max, gap1)?;
    let mut rows = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let mut observed = Vec::with_capacity(runs.len());
        let mut rhs2 = Vec::with_capacity(runs.len());
        let mut bound = Vec::with_capacity(runs.len());
        let mut slack = f64::INFINITY;
        let mut terms = (0.0, 0.0);
        for (run, cb) in runs.iter().zip(&cumulative) {
            let r = &run.reports[t];
            let prev_gap = if t == 0 {
                run.initial_loss
            } else {
                run.reports[t - 1].loss
            } - optimum_loss;
            let variance = r
                .variance
                .ok_or_else(|| Error::invalid("bound checks need single-device random scheduling"))?;
            observed.push(r.loss - optimum_loss);
            rhs2.push(lemma2_rhs(prev_gap, r.lr, params.lipschitz, r.truth_norm_sq, variance));
            bound.push(cb.total(t));
            terms.0 += cb.contraction[t];
            terms.1 += cb.accumulated[t];
            slack = slack.min(r.truth_norm_sq - 2.0 * params.strong_convexity * prev_gap);
        }
        let s = runs.len() as f64;
        rows.push(BoundRow {
            round: t + 1,
            observed_gap: observed.iter().sum::<f64>() / s,
            lemma2: MeanComparison::new(&observed, &rhs2),
            theorem2: MeanComparison::new(&observed, &bound),
            theorem2_terms: (terms.0 / s, terms.1 / s),
            // the gap after round t is measured at w^{t+1}
            envelope: zeta / ((t + 2) as f64 + nu),
            lemma5_slack: slack,
        });
    }
    Ok(BoundTrace {
        params,
        rows,
        g_max,
        zeta,
        gap1,
    })
}

/// Best point of the scheduling objective over the simplex grid with spacing `step`.
pub fn simplex_grid_oracle(
    sizes: &[usize],
    norms: &[f64],
    upload_s: &[f64],
    rho: f64,
    step: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = sizes.len();
    if k == 0 || k > 4 {
        return Err(Error::invalid(format!(
            "grid oracle is limited to 1..=4 devices (got {k}); use the closed form for larger fleets"
        )));
    }
    if !(step > 0.0 && step <= 0.01) {
        return Err(Error::invalid("grid step must lie in (0, 0.01]"));
    }
    let cells = (1.0 / step).round() as usize;
    let mut best = (vec![0.0; k], f64::INFINITY);
    let mut counts = vec![0usize; k];
    // enumerate compositions of `cells` into k nonnegative parts
    fn visit(
        i: usize,
        left: usize,
        counts: &mut Vec<usize>,
        eval: &mut dyn FnMut(&[usize]),
    ) {
        if i + 1 == counts.len() {
            counts[i] = left;
            eval(counts);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            visit(i + 1, left - c, counts, eval);
        }
    }
    let mut p = vec![0.0; k];
    let mut eval = |c: &[usize]| {
        for (pi, &ci) in p.iter_mut().zip(c) {
            *pi = ci as f64 / cells as f64;
        }
        let v = scheduler::scheduling_objective(&p, sizes, norms, upload_s, rho);
        if v < best.1 {
            best = (p.clone(), v);
        }
    };
    visit(0, cells, &mut counts, &mut eval);
    Ok(best)
}

/// One ordered selection with its probability under sequential sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSequence {
    pub sequence: Vec<usize>,
    /// Conditional probability of each pick given the earlier picks.
    pub conditional: Vec<f64>,
    pub probability: f64,
}

/// Every ordered selection of `m` distinct devices with positive probability.
pub fn enumerate_sequences(p: &[f64], m: usize) -> Vec<WeightedSequence> {
    fn extend(p: &[f64], m: usize, current: &mut WeightedSequence, out: &mut Vec<WeightedSequence>) {
        if current.sequence.len() == m {
            out.push(current.clone());
            return;
        }
        let remaining: f64 = (0..p.len())
            .filter(|k| !current.sequence.contains(k))
            .map(|k| p[k])
            .sum();
        for k in 0..p.len() {
            if current.sequence.contains(&k) || p[k] <= 0.0 {
                continue;
            }
            let q = p[k] / remaining;
            current.sequence.push(k);
            current.conditional.push(q);
            let before = current.probability;
            current.probability *= q;
            extend(p, m, current, out);
            current.probability = before;
            current.sequence.pop();
            current.conditional.pop();
        }
    }
    let mut out = Vec::new();
    let mut current = WeightedSequence {
        sequence: Vec::with_capacity(m),
        conditional: Vec::with_capacity(m),
        probability: 1.0,
    };
    extend(p, m, &mut current, &mut out);
    out
}

/// Minimax upload time by bisection on the deadline, and the bandwidths that achieve it.
///
/// For a deadline `T` each device needs the smallest `B_m` whose rate delivers
/// `bits` within `T`; the deadline is feasible when these fit in `total_hz`.
pub fn minimax_bandwidth_oracle(
    snrs_full_band: &[f64],
    total_hz: f64,
    bits: f64,
    mode: SnrMode,
) -> Result<(Vec<f64>, f64)> {
    if snrs_full_band.is_empty() || !(total_hz > 0.0) || !(bits > 0.0) {
        return Err(Error::invalid("oracle needs devices, bandwidth and a payload"));
    }
    let rate = |b: f64, g: f64| {
        let g = channel::snr_at_bandwidth(g, total_hz, b, mode);
        channel::uplink_rate(b, g).unwrap_or(0.0)
    };
    // smallest bandwidth meeting the deadline; rate is increasing in bandwidth
    let need = |g: f64, deadline: f64| {
        let target = bits / deadline;
        let (mut lo, mut hi) = (0.0, total_hz);
        if rate(hi, g) < target {
            return f64::INFINITY;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid, g) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let used = |deadline: f64| snrs_full_band.iter().map(|&g| need(g, deadline)).sum::<f64>();
    let fastest_alone = snrs_full_band
        .iter()
        .map(|&g| bits / rate(total_hz, g))
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (fastest_alone, fastest_alone * snrs_full_band.len() as f64 * 2.0);
    while used(hi) > total_hz {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if used(mid) <= total_hz {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= 1e-15 * hi {
            break;
        }
    }
    let alloc: Vec<f64> = snrs_full_band.iter().map(|&g| need(g, hi)).collect();
    Ok((alloc, hi))
}
