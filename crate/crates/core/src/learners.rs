//! Sample losses, local/global losses and exact gradients.
//!
//! Three learners are supported: the hinge-based SVM and linear regression
//! rows of the usual federated-learning loss table, plus multinomial
//! logistic regression as a desk-scale stand-in for a neural network. The
//! logistic learner is an extension; it is not strongly convex and is only
//! exercised empirically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which per-sample loss a task trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    /// `½·max{0, 1 − y·wᵀx} + (reg/2)·‖w‖²`, labels in {−1, +1}.
    LeastSquaresSvm { reg: f64 },
    /// `½·(y − wᵀx)²`.
    LinearRegression,
    /// Softmax cross-entropy; labels are class indices stored as reals.
    MultinomialLogistic { classes: usize },
}

impl LearnerKind {
    /// Number of learnable parameters for a given feature dimension.
    pub fn param_len(&self, feature_dim: usize) -> usize {
        match self {
            LearnerKind::MultinomialLogistic { classes } => classes * feature_dim,
            _ => feature_dim,
        }
    }

    /// Whether accuracy is meaningful (classification tasks).
    pub fn is_classifier(&self) -> bool {
        !matches!(self, LearnerKind::LinearRegression)
    }
}

/// Model parameters `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(ModelParams(values))
    }

    pub fn zeros(len: usize) -> Self {
        ModelParams(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `w ← w − lr·g`.
    pub fn descend(&mut self, gradient: &GradientVector, lr: f64) -> Result<()> {
        check_len("gradient step", self.len(), gradient.len())?;
        for (w, g) in self.0.iter_mut().zip(gradient.values()) {
            *w -= lr * g;
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model update produced non-finite parameters"));
        }
        Ok(())
    }
}

/// A dense gradient with its L2 norm computed once on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    norm: f64,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        GradientVector { values, norm }
    }

    pub fn zeros(len: usize) -> Self {
        GradientVector::new(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, factor: f64) -> GradientVector {
        GradientVector::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One labeled training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        LabeledSample { features, label }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

fn check_sample(model: &ModelParams, sample: &LabeledSample, kind: LearnerKind) -> Result<()> {
    check_len("model vs features", kind.param_len(sample.features.len()), model.len())?;
    if let LearnerKind::MultinomialLogistic { classes } = kind {
        let c = sample.label;
        if c < 0.0 || c.fract() != 0.0 || c as usize >= classes {
            return Err(Error::invalid(format!(
                "class label {c} outside 0..{classes}"
            )));
        }
    }
    Ok(())
}

fn logits(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let d = x.len();
    (0..classes).map(|c| dot(&w[c * d..(c + 1) * d], x)).collect()
}

fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Per-sample loss `ℓ(w, x, y)`.
pub fn sample_loss(model: &ModelParams, sample: &LabeledSample, kind: LearnerKind) -> Result<f64> {
    check_sample(model, sample, kind)?;
    let w = model.as_slice();
    let x = &sample.features;
    let y = sample.label;
    Ok(match kind {
        LearnerKind::LeastSquaresSvm { reg } => {
            let hinge = (1.0 - y * dot(w, x)).max(0.0);
            0.5 * hinge + 0.5 * reg * dot(w, w)
        }
        LearnerKind::LinearRegression => {
            let r = y - dot(w, x);
            0.5 * r * r
        }
        LearnerKind::MultinomialLogistic { classes } => {
            let mut z = logits(w, x, classes);
            let target = z[y as usize];
            let lse = softmax_in_place(&mut z);
            (lse - target).max(0.0)
        }
    })
}

/// Mean sample loss over one device's dataset.
pub fn local_loss(model: &ModelParams, dataset: &[LabeledSample], kind: LearnerKind) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("local loss of an empty dataset"));
    }
    if let LearnerKind::LeastSquaresSvm { reg } = kind {
        // The regularizer is shared by every sample, so evaluate it once.
        let w = model.as_slice();
        let mut hinge = 0.0;
        for s in dataset {
            check_sample(model, s, kind)?;
            hinge += (1.0 - s.label * dot(w, &s.features)).max(0.0);
        }
        return Ok(0.5 * hinge / dataset.len() as f64 + 0.5 * reg * dot(w, w));
    }
    let mut total = 0.0;
    for s in dataset {
        total += sample_loss(model, s, kind)?;
    }
    Ok(total / dataset.len() as f64)
}

/// Sample-size weighted mean of the local losses.
pub fn global_loss<D: AsRef<[LabeledSample]>>(
    model: &ModelParams,
    fleet: &[D],
    kind: LearnerKind,
) -> Result<f64> {
    let mut weighted = 0.0;
    let mut n = 0usize;
    for data in fleet {
        let data = data.as_ref();
        if data.is_empty() {
            continue;
        }
        weighted += data.len() as f64 * local_loss(model, data, kind)?;
        n += data.len();
    }
    if n == 0 {
        return Err(Error::invalid("global loss over a fleet with no samples"));
    }
    Ok(weighted / n as f64)
}

/// Exact gradient of [`local_loss`] at `model`.
///
/// The SVM hinge uses subgradient 0 at margin exactly 1.
pub fn local_gradient(
    model: &ModelParams,
    dataset: &[LabeledSample],
    kind: LearnerKind,
) -> Result<GradientVector> {
    if dataset.is_empty() {
        return Err(Error::invalid("local gradient of an empty dataset"));
    }
    let w = model.as_slice();
    let mut grad = vec![0.0; w.len()];
    for s in dataset {
        check_sample(model, s, kind)?;
        let x = &s.features;
        match kind {
            LearnerKind::LeastSquaresSvm { .. } => {
                let y = s.label;
                if 1.0 - y * dot(w, x) > 0.0 {
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g -= 0.5 * y * xi;
                    }
                }
            }
            LearnerKind::LinearRegression => {
                let r = s.label - dot(w, x);
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g -= r * xi;
                }
            }
            LearnerKind::MultinomialLogistic { classes } => {
                let d = x.len();
                let mut z = logits(w, x, classes);
                softmax_in_place(&mut z);
                z[s.label as usize] -= 1.0;
                for (c, zc) in z.iter().enumerate() {
                    for (g, xi) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += zc * xi;
                    }
                }
            }
        }
    }
    let inv_n = 1.0 / dataset.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv_n);
    if let LearnerKind::LeastSquaresSvm { reg } = kind {
        for (g, wi) in grad.iter_mut().zip(w) {
            *g += reg * wi;
        }
    }
    Ok(GradientVector::new(grad))
}

/// `g = (1/n)·Σ_k n_k·g_k`.
pub fn ground_truth_global_gradient(
    local: &[GradientVector],
    sizes: &[usize],
) -> Result<GradientVector> {
    check_len("gradients vs sizes", local.len(), sizes.len())?;
    let first = local
        .first()
        .ok_or_else(|| Error::invalid("no local gradients"))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for (g, &nk) in local.iter().zip(sizes) {
        check_len("local gradient", dim, g.len())?;
        if nk == 0 {
            return Err(Error::invalid("device with zero samples"));
        }
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += nk as f64 * v;
        }
        n += nk;
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(GradientVector::new(acc))
}

/// Predicted label: sign for the SVM, argmax class for logistic, `wᵀx` for regression.
pub fn predict(model: &ModelParams, features: &[f64], kind: LearnerKind) -> f64 {
    let w = model.as_slice();
    match kind {
        LearnerKind::LeastSquaresSvm { .. } => {
            if dot(w, features) >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        LearnerKind::LinearRegression => dot(w, features),
        LearnerKind::MultinomialLogistic { classes } => {
            let z = logits(w, features, classes);
            let mut best = 0;
            for (c, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = c;
                }
            }
            best as f64
        }
    }
}

/// Fraction of correctly classified samples; `None` for regression or an empty set.
pub fn accuracy(model: &ModelParams, samples: &[LabeledSample], kind: LearnerKind) -> Option<f64> {
    if !kind.is_classifier() || samples.is_empty() {
        return None;
    }
    let correct = samples
        .iter()
        .filter(|s| predict(model, &s.features, kind) == s.label)
        .count();
    Some(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &[f64], y: f64) -> LabeledSample {
        LabeledSample::new(x.to_vec(), y)
    }

    fn w(v: &[f64]) -> ModelParams {
        ModelParams::new(v.to_vec()).unwrap()
    }

    #[test]
    fn regression_zero_residual() {
        let l = sample_loss(&w(&[0.0, 0.0]), &s(&[1.0, 1.0], 0.0), LearnerKind::LinearRegression);
        assert_eq!(l.unwrap(), 0.0);
    }

    #[test]
    fn hinge_inactive_at_margin_one() {
        let kind = LearnerKind::LeastSquaresSvm { reg: 0.0 };
        assert_eq!(sample_loss(&w(&[1.0, 0.0]), &s(&[1.0, 0.0], 1.0), kind).unwrap(), 0.0);
        // subgradient 0 at the kink
        let g = local_gradient(&w(&[1.0, 0.0]), &[s(&[1.0, 0.0], 1.0)], kind).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0]);
    }

    #[test]
    fn regression_hand_value() {
        let l = sample_loss(&w(&[2.0]), &s(&[3.0], 1.0), LearnerKind::LinearRegression).unwrap();
        assert!((l - 12.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = sample_loss(&w(&[1.0]), &s(&[1.0, 2.0], 1.0), LearnerKind::LinearRegression);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = local_gradient(&w(&[1.0]), &[s(&[1.0, 2.0], 1.0)], LearnerKind::LinearRegression);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn local_loss_is_mean() {
        // residuals 2 and sqrt(8) give losses 2 and 4
        let data = [s(&[1.0], 2.0), s(&[1.0], 8f64.sqrt())];
        let l = local_loss(&w(&[0.0]), &data, LearnerKind::LinearRegression).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        let single = local_loss(&w(&[0.0]), &data[..1], LearnerKind::LinearRegression).unwrap();
        assert!((single - 2.0).abs() < 1e-12);
        assert!(local_loss(&w(&[0.0]), &[], LearnerKind::LinearRegression).is_err());
    }

    #[test]
    fn local_loss_matches_naive_loop() {
        let data = [s(&[1.0, 2.0], 3.0), s(&[-1.0, 0.5], 0.0), s(&[0.3, 0.3], -2.0)];
        let model = w(&[0.7, -0.2]);
        let mut naive = 0.0;
        for d in &data {
            let pred = model.as_slice()[0] * d.features[0] + model.as_slice()[1] * d.features[1];
            naive += 0.5 * (d.label - pred) * (d.label - pred);
        }
        naive /= 3.0;
        let l = local_loss(&model, &data, LearnerKind::LinearRegression).unwrap();
        assert!((l - naive).abs() < 1e-14);
    }

    #[test]
    fn global_loss_weighted_mean() {
        let kind = LearnerKind::LinearRegression;
        let zero = w(&[0.0]);
        // per-sample losses: 2 and 4
        let a = vec![s(&[1.0], 2.0)];
        let b = vec![s(&[1.0], 8f64.sqrt())];
        assert!((global_loss(&zero, &[a.clone(), b.clone()], kind).unwrap() - 3.0).abs() < 1e-12);
        // n = (1, 3), local losses (4, 0)
        let c = vec![s(&[1.0], 8f64.sqrt())];
        let d = vec![s(&[1.0], 0.0); 3];
        assert!((global_loss(&zero, &[c, d], kind).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            global_loss(&zero, std::slice::from_ref(&a), kind).unwrap(),
            local_loss(&zero, &a, kind).unwrap()
        );
        let empty: Vec<Vec<LabeledSample>> = vec![vec![], vec![]];
        assert!(global_loss(&zero, &empty, kind).is_err());
    }

    #[test]
    fn regression_gradient_vanishes_at_least_squares_optimum() {
        // y = 2x exactly, optimum w = 2
        let data = [s(&[1.0], 2.0), s(&[2.0], 4.0), s(&[-3.0], -6.0)];
        let g = local_gradient(&w(&[2.0]), &data, LearnerKind::LinearRegression).unwrap();
        assert!(g.norm() < 1e-14);
    }

    #[test]
    fn svm_gradient_is_regularizer_when_margins_exceed_one() {
        let kind = LearnerKind::LeastSquaresSvm { reg: 0.1 };
        let model = w(&[2.0, -1.0]);
        let data = [s(&[1.0, 0.0], 1.0), s(&[0.0, 1.0], -1.0), s(&[-1.0, 0.0], -1.0)];
        let g = local_gradient(&model, &data, kind).unwrap();
        assert!((g.values()[0] - 0.2).abs() < 1e-15);
        assert!((g.values()[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn global_gradient_average() {
        let g1 = GradientVector::new(vec![2.0, 0.0]);
        let g2 = GradientVector::new(vec![0.0, 2.0]);
        let g = ground_truth_global_gradient(&[g1.clone(), g2], &[1, 1]).unwrap();
        assert_eq!(g.values(), &[1.0, 1.0]);
        let same = ground_truth_global_gradient(&[g1.clone(), g1.clone()], &[3, 7]).unwrap();
        assert!((same.values()[0] - 2.0).abs() < 1e-15);
        let bad = ground_truth_global_gradient(&[g1, GradientVector::zeros(3)], &[1, 1]);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gradient_norm_cached() {
        let g = GradientVector::new(vec![3.0, 4.0]);
        assert_eq!(g.norm(), 5.0);
        assert_eq!(g.scaled(2.0).norm(), 10.0);
    }

    #[test]
    fn logistic_loss_and_accuracy() {
        let kind = LearnerKind::MultinomialLogistic { classes: 3 };
        let model = ModelParams::zeros(6);
        let l = sample_loss(&model, &s(&[1.0, 2.0], 2.0), kind).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(sample_loss(&model, &s(&[1.0, 2.0], 3.0), kind).is_err());
        let acc = accuracy(&model, &[s(&[1.0, 0.0], 0.0), s(&[1.0, 0.0], 1.0)], kind);
        assert_eq!(acc, Some(0.5));
        assert_eq!(accuracy(&model, &[], kind), None);
    }
}
