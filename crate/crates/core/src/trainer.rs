//! The six-step communication round and multi-round experiment driver.
//!
//! A round broadcasts `w^t`, has every device compute its full local gradient,
//! collects the importance scalars, schedules devices, allocates bandwidth for
//! their uploads, aggregates and steps `w^{t+1} = w^t − η^t·ĝ^t`. The simulated
//! clock advances by the round latency; evaluation happens outside simulated time.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{self, ChannelConfig, DeviceProfile};
use crate::config::{ExperimentConfig, TrainerConfig};
use crate::data::{self, FleetDatasets, PartitionSpec};
use crate::error::{Error, Result};
use crate::latency::{self, PayloadSpec};
use crate::learners::{self, GradientVector, LabeledSample, LearnerKind, ModelParams};
use crate::scheduler::{self, PolicyKind, RhoSetting, ScheduleInputs, SchedulerConfig};

const STREAM_CHANNEL: u64 = 1;
const STREAM_SCHEDULER: u64 = 2;
const STREAM_PLACEMENT: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_PARTITION: u64 = 5;
const STREAM_SPLIT: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sub-seed for one purpose, independent of every other purpose's stream.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    stream(seed, id).next_u64()
}

/// A fully materialized experiment: data, devices and every configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub kind: LearnerKind,
    pub fleet: FleetDatasets,
    /// Held-out evaluation samples (may be empty).
    pub test: Vec<LabeledSample>,
    pub profiles: Vec<DeviceProfile>,
    pub channel: ChannelConfig,
    pub payload: PayloadSpec,
    pub scheduler: SchedulerConfig,
    pub trainer: TrainerConfig,
}

fn load_samples(cfg: &ExperimentConfig, data_seed: u64) -> Result<Vec<LabeledSample>> {
    if let Some(task) = &cfg.data.synthetic {
        return data::generate_synthetic(task, cfg.data.total_samples, data_seed);
    }
    let idx = cfg
        .data
        .idx
        .as_ref()
        .ok_or_else(|| Error::invalid("no data source configured"))?;
    let samples = data::load_idx(&idx.images, &idx.labels, idx.subsample, data_seed)?;
    Ok(match &idx.keep_labels {
        None => samples,
        Some(keep) => samples
            .into_iter()
            .filter_map(|mut s| {
                let pos = keep.iter().position(|&l| l as f64 == s.label)?;
                s.label = if keep.len() == 2 {
                    if pos == 0 {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    pos as f64
                };
                Some(s)
            })
            .collect(),
    })
}

impl Experiment {
    /// Builds data, placement and compute profiles for `seed`.
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let k = cfg.fleet.devices;
        // the held-out split follows the data seed so a fixed dataset keeps a fixed test set
        let data_seed = cfg.data.seed.unwrap_or_else(|| derive_seed(seed, STREAM_DATA));
        let samples = load_samples(cfg, data_seed)?;
        let split_seed = derive_seed(data_seed, STREAM_SPLIT);
        let (train, test) = data::train_test_split(samples, cfg.data.test_fraction, split_seed)?;
        let spec = PartitionSpec {
            scheme: cfg.data.partition.clone(),
            seed: cfg
                .data
                .partition_seed
                .unwrap_or_else(|| derive_seed(seed, STREAM_PARTITION)),
            sizes: cfg.data.sizes.clone(),
        };
        let fleet = data::partition(train, k, &spec)?;

        let mut placement = match cfg.fleet.placement_seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => stream(seed, STREAM_PLACEMENT),
        };
        let distances = channel::place_devices(k, cfg.fleet.radius_km, cfg.fleet.min_distance_km, &mut placement)?;
        let spread = cfg.fleet.flops_spread;
        let profiles = fleet
            .devices()
            .iter()
            .zip(distances)
            .map(|(d, distance_km)| {
                let u: f64 = rand::Rng::random(&mut placement);
                DeviceProfile {
                    id: d.id,
                    samples: d.samples.len(),
                    flops: cfg.fleet.flops * (1.0 - spread + 2.0 * spread * u),
                    distance_km,
                    tx_power_dbm: cfg.fleet.tx_power_dbm,
                }
            })
            .collect();

        let feature_len = fleet.devices()[0].samples[0].features.len();
        let payload = PayloadSpec {
            params: cfg.payload.params.unwrap_or(cfg.learner.param_len(feature_len)),
            bits_per_element: cfg.payload.bits_per_element,
            flops_per_sample: cfg.payload.flops_per_sample,
        };
        Ok(Experiment {
            kind: cfg.learner,
            fleet,
            test,
            profiles,
            channel: cfg.channel.clone(),
            payload,
            scheduler: cfg.scheduler.clone(),
            trainer: cfg.trainer.clone(),
        })
    }

    pub fn feature_len(&self) -> usize {
        self.fleet.devices()[0].samples[0].features.len()
    }

    pub fn initial_model(&self) -> ModelParams {
        ModelParams::zeros(self.kind.param_len(self.feature_len()))
    }

    /// Held-out accuracy, or training accuracy when no samples were held out.
    pub fn evaluate_accuracy(&self, model: &ModelParams) -> Option<f64> {
        if self.test.is_empty() {
            learners::accuracy(model, &self.fleet.pooled(), self.kind)
        } else {
            learners::accuracy(model, &self.test, self.kind)
        }
    }

    pub fn training_loss(&self, model: &ModelParams) -> Result<f64> {
        learners::global_loss(model, &self.fleet.datasets(), self.kind)
    }

    /// Every device's full local gradient at `model`, in device order.
    pub fn local_gradients(&self, model: &ModelParams) -> Result<Vec<GradientVector>> {
        self.fleet
            .devices()
            .par_iter()
            .map(|d| learners::local_gradient(model, &d.samples, self.kind))
            .collect()
    }

    pub fn start(&self, seed: u64) -> TrainerState {
        TrainerState {
            model: self.initial_model(),
            round: 0,
            sim_seconds: 0.0,
            rho: match self.scheduler.rho {
                RhoSetting::Value(v) => Some(v),
                RhoSetting::Auto(_) => None,
            },
            channel_rng: stream(seed, STREAM_CHANNEL),
            scheduler_rng: stream(seed, STREAM_SCHEDULER),
        }
    }

    /// Executes one communication round and advances `state`.
    pub fn run_round(&self, state: &mut TrainerState) -> Result<RoundReport> {
        let t = state.round + 1;
        // Step 1: channel state for this round; broadcast cost is part of the latency breakdown.
        let snapshot = channel::draw_snapshot(&self.profiles, &self.channel, t, &mut state.channel_rng)?;
        // Step 2: full local gradients.
        let grads = self.local_gradients(&state.model)?;
        let sizes = self.fleet.sizes();
        let truth = learners::ground_truth_global_gradient(&grads, &sizes)?;
        // Step 3: importance scalars n_k and ‖g_k‖.
        let norms: Vec<f64> = grads.iter().map(GradientVector::norm).collect();
        // Step 4: scheduling.
        let upload_full = latency::full_band_upload_latencies(&self.payload, &self.channel, &snapshot)?;
        let inputs = ScheduleInputs {
            sizes: &sizes,
            norms: &norms,
            upload_s: &upload_full,
        };
        let rho = match (self.scheduler.policy, state.rho) {
            (PolicyKind::ImportanceChannel, None) => {
                let r = scheduler::auto_rho(&sizes, &norms, &upload_full, truth.norm_squared())?;
                state.rho = Some(r);
                r
            }
            (_, r) => r.unwrap_or(0.5),
        };
        let schedule = scheduler::schedule_round(&self.scheduler, rho, inputs, &mut state.scheduler_rng)?;
        // Step 5: bandwidth allocation and upload latency.
        let breakdown = latency::round_latency(
            &self.payload,
            &self.channel,
            &snapshot,
            &self.profiles,
            &schedule.decision.sequence,
            self.trainer.compute_term,
        )?;
        // Step 6: aggregation and update.
        let update = scheduler::aggregate(&schedule, &grads, &sizes)?;
        let lr = self.trainer.lr.at(t);
        state.model.descend(&update, lr)?;
        state.round = t;
        state.sim_seconds += breakdown.total_s();

        let evaluate = t.is_multiple_of(self.trainer.eval_every) || t == self.trainer.rounds;
        let distribution = schedule.distribution.as_ref();
        let single_random = schedule.decision.sequence.len() == 1 && distribution.is_some();
        let variance = distribution
            .filter(|_| single_random)
            .map(|d| scheduler::variance_closed_form(&d.p, &sizes, &norms, truth.norm_squared()));
        let latency_weighted_sum = match (distribution.and_then(|d| d.lambda_star), state.rho) {
            (Some(lambda), Some(rho)) if self.scheduler.policy == PolicyKind::ImportanceChannel => Some(
                (0..sizes.len())
                    .map(|k| sizes[k] as f64 * norms[k] * (((1.0 - rho) * upload_full[k] + lambda) / rho).sqrt())
                    .sum(),
            ),
            _ => None,
        };
        Ok(RoundReport {
            round: t,
            scheduled: schedule.decision.sequence.iter().map(|&k| self.profiles[k].id).collect(),
            lambda_star: distribution.and_then(|d| d.lambda_star),
            rho: state.rho.filter(|_| self.scheduler.policy == PolicyKind::ImportanceChannel),
            lr,
            broadcast_s: breakdown.broadcast_s,
            compute_s: breakdown.compute_term_s,
            upload_s: breakdown.upload_term_s(),
            round_s: breakdown.total_s(),
            sim_seconds: state.sim_seconds,
            loss: self.training_loss(&state.model)?,
            accuracy: if evaluate {
                self.evaluate_accuracy(&state.model)
            } else {
                None
            },
            grad_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
            grad_norm_max: norms.iter().cloned().fold(0.0, f64::max),
            truth_norm_sq: truth.norm_squared(),
            update_norm: update.norm(),
            variance,
            latency_weighted_sum,
            fallback_uniform: distribution.is_some_and(|d| d.fallback_uniform),
            padded: schedule.decision.padded,
        })
    }

    /// Runs up to `rounds` rounds, stopping early once the target accuracy is
    /// met on `eval_every` consecutive evaluations.
    pub fn run(&self, seed: u64) -> Result<RunResult> {
        let mut state = self.start(seed);
        let initial_loss = self.training_loss(&state.model)?;
        let initial_accuracy = self.evaluate_accuracy(&state.model);
        let mut reports = Vec::with_capacity(self.trainer.rounds);
        let mut streak = 0;
        let mut reached_target = false;
        for _ in 0..self.trainer.rounds {
            let report = self.run_round(&mut state).map_err(|e| {
                Error::invalid(format!("round {} of seed {seed} failed: {e}", state.round + 1))
            })?;
            if let (Some(target), Some(acc)) = (self.trainer.target_accuracy, report.accuracy) {
                streak = if acc >= target { streak + 1 } else { 0 };
            }
            reports.push(report);
            if streak >= self.trainer.eval_every {
                reached_target = true;
                break;
            }
        }
        Ok(RunResult {
            seed,
            initial_loss,
            initial_accuracy,
            reports,
            reached_target,
            final_model: state.model,
        })
    }
}

/// Mutable per-run state.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: ModelParams,
    /// Completed rounds.
    pub round: usize,
    pub sim_seconds: f64,
    /// Resolved importance–latency weight (set on round 1 in auto mode).
    pub rho: Option<f64>,
    channel_rng: ChaCha8Rng,
    scheduler_rng: ChaCha8Rng,
}

/// Observations of one round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    /// 1-based ids in selection order.
    pub scheduled: Vec<usize>,
    pub lambda_star: Option<f64>,
    pub rho: Option<f64>,
    pub lr: f64,
    pub broadcast_s: f64,
    /// Compute term charged to the round.
    pub compute_s: f64,
    /// Slowest scheduled upload.
    pub upload_s: f64,
    pub round_s: f64,
    pub sim_seconds: f64,
    /// Global training loss after the update.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// `‖g^t‖²` at the pre-update model.
    pub truth_norm_sq: f64,
    /// `‖ĝ^t‖`.
    pub update_norm: f64,
    /// Closed-form `E‖ĝ − g‖²` for single-device random scheduling.
    pub variance: Option<f64>,
    /// `Σ_k n_k‖g_k‖·sqrt(((1 − ρ)T_k^U + λ*)/ρ)` for the proposed policy.
    pub latency_weighted_sum: Option<f64>,
    pub fallback_uniform: bool,
    pub padded: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub initial_loss: f64,
    pub initial_accuracy: Option<f64>,
    pub reports: Vec<RoundReport>,
    pub reached_target: bool,
    pub final_model: ModelParams,
}

pub const CSV_HEADER: &str = "round,sim_seconds,loss,accuracy,scheduled,lambda_star";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunResult {
    /// Simulated seconds at the first evaluation reaching `target`.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.accuracy.is_some_and(|a| a >= target))
            .map(|r| r.sim_seconds)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.reports.iter().rev().find_map(|r| r.accuracy)
    }

    pub fn final_loss(&self) -> f64 {
        self.reports.last().map_or(self.initial_loss, |r| r.loss)
    }

    /// One row per round; scheduled ids are `;`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.reports.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            let ids: Vec<String> = r.scheduled.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round,
                r.sim_seconds,
                r.loss,
                opt(r.accuracy),
                ids.join(";"),
                opt(r.lambda_star)
            ));
        }
        out
    }
}

/// Builds the experiment for `seed` and runs it.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    Experiment::from_config(cfg, seed)?.run(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Fading;
    use crate::config::LrSchedule;
    use crate::data::{PartitionScheme, SyntheticTask};

    fn regression_config(k: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.fleet.devices = k;
        cfg.learner = LearnerKind::LinearRegression;
        cfg.data.synthetic = Some(SyntheticTask::Regression {
            dim: 4,
            noise_sd: 0.1,
            true_w_seed: 3,
        });
        cfg.data.partition = PartitionScheme::IidUniform;
        cfg.data.total_samples = 40 * k;
        cfg.data.test_fraction = 0.0;
        cfg.trainer.rounds = 5;
        cfg.trainer.lr = LrSchedule::Constant { eta: 0.1 };
        cfg
    }

    #[test]
    fn single_device_is_gradient_descent() {
        let cfg = regression_config(1);
        let exp = Experiment::from_config(&cfg, 7).unwrap();
        let mut state = exp.start(7);
        let w0 = state.model.clone();
        let g = learners::local_gradient(&w0, &exp.fleet.devices()[0].samples, exp.kind).unwrap();
        exp.run_round(&mut state).unwrap();
        for ((w1, w), gi) in state.model.as_slice().iter().zip(w0.as_slice()).zip(g.values()) {
            assert!((w1 - (w - 0.1 * gi)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let mut cfg = regression_config(4);
        cfg.trainer.lr = LrSchedule::Constant { eta: 0.0 };
        let run = run_experiment(&cfg, 1).unwrap();
        for r in &run.reports {
            assert_eq!(r.loss, run.initial_loss);
        }
    }

    #[test]
    fn full_participation_uniform_is_full_batch() {
        let mut cfg = regression_config(4);
        cfg.scheduler.policy = PolicyKind::UniformRandom;
        cfg.scheduler.devices_per_round = 4;
        let exp = Experiment::from_config(&cfg, 2).unwrap();
        let mut state = exp.start(2);
        let w0 = state.model.clone();
        let pooled = exp.fleet.pooled();
        let g = learners::local_gradient(&w0, &pooled, exp.kind).unwrap();
        exp.run_round(&mut state).unwrap();
        for ((w1, w), gi) in state.model.as_slice().iter().zip(w0.as_slice()).zip(g.values()) {
            assert!((w1 - (w - 0.1 * gi)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_clock_additive() {
        let cfg = ExperimentConfig::default();
        let mut cfg = cfg;
        cfg.trainer.rounds = 20;
        let a = run_experiment(&cfg, 11).unwrap();
        let b = run_experiment(&cfg, 11).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.reports, b.reports);
        let mut total = 0.0;
        for r in &a.reports {
            total += r.round_s;
            assert!((r.sim_seconds - total).abs() <= 1e-12 * total);
        }
        assert!(a.reports.windows(2).all(|w| w[0].sim_seconds <= w[1].sim_seconds));
        assert!(a.to_csv().starts_with(CSV_HEADER));
    }

    #[test]
    fn static_channel_aware_repeats_device() {
        let mut cfg = ExperimentConfig::default();
        cfg.channel.fading = Fading::None;
        cfg.scheduler.policy = PolicyKind::ChannelAware;
        cfg.trainer.rounds = 10;
        let run = run_experiment(&cfg, 5).unwrap();
        let first = &run.reports[0].scheduled;
        assert!(run.reports.iter().all(|r| &r.scheduled == first));
    }

    #[test]
    fn full_participation_descends_monotonically() {
        let mut cfg = regression_config(5);
        cfg.scheduler.devices_per_round = 5;
        cfg.trainer.rounds = 30;
        let run = run_experiment(&cfg, 3).unwrap();
        let mut prev = run.initial_loss;
        for r in &run.reports {
            assert!(r.loss <= prev + 1e-12);
            prev = r.loss;
        }
    }

    #[test]
    fn stops_when_target_sustained() {
        let mut cfg = ExperimentConfig::default();
        cfg.trainer.rounds = 200;
        cfg.trainer.target_accuracy = Some(0.0);
        cfg.trainer.eval_every = 2;
        let run = run_experiment(&cfg, 1).unwrap();
        assert!(run.reached_target);
        assert_eq!(run.reports.len(), 4);
    }
}
