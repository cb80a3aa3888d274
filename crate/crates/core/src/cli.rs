//! Batch execution behind the `run`, `verify` and `compare` verbs.
//!
//! Everything here is library code so that examples and tests drive the same
//! paths as the binary. Output files are written only after every seed has
//! finished, one writer per file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{apply_override, ExperimentConfig};
use crate::error::{Error, Result};
use crate::scheduler::{PolicyKind, RhoSetting};
use crate::trainer::{run_experiment, RunResult};
use crate::verify::{self, Suite, VerificationReport};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "FEEL_SCHED_THREADS";

/// Process exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// Installs the global worker pool, honouring [`THREADS_ENV`].
///
/// A second call is a no-op; the first pool stays in place.
pub fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| Error::Config {
        field: THREADS_ENV.into(),
        reason: format!("`{raw}` is not a positive integer"),
    })?;
    if n == 0 {
        return Err(Error::Config {
            field: THREADS_ENV.into(),
            reason: "must be at least 1".into(),
        });
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Seeds from `--seeds N` (1..=N), `--seed-list`, or the config, in that order of precedence.
pub fn resolve_seeds(cfg: &ExperimentConfig, count: Option<usize>, list: Option<&[u64]>) -> Result<Vec<u64>> {
    let seeds = match (list, count) {
        (Some(l), _) => l.to_vec(),
        (None, Some(n)) => (1..=n as u64).collect(),
        (None, None) => cfg.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(Error::Config {
            field: "seeds".into(),
            reason: "no seeds to run".into(),
        });
    }
    Ok(seeds)
}

/// Runs every seed on the worker pool; results come back in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunResult>> {
    seeds.par_iter().map(|&s| run_experiment(cfg, s)).collect()
}

/// Per-seed line of the summary JSON.
#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub rounds: usize,
    pub sim_seconds: f64,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub reached_target: bool,
    /// The weight actually used, after resolving `"auto"`.
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub policy: PolicyKind,
    pub rho: RhoSetting,
    pub host_runtime_s: f64,
    pub runs: Vec<SeedSummary>,
    pub config: ExperimentConfig,
}

/// File name of one run's CSV.
pub fn csv_name(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}_seed{seed}.csv", cfg.name)
}

/// Writes one CSV per run and `<name>_summary.json` into `out`.
pub fn write_run_outputs(
    cfg: &ExperimentConfig,
    results: &[RunResult],
    out: &Path,
    host_runtime_s: f64,
) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        let csv = csv_name(cfg, r.seed);
        fs::write(out.join(&csv), r.to_csv())?;
        runs.push(SeedSummary {
            seed: r.seed,
            csv,
            rounds: r.reports.len(),
            sim_seconds: r.reports.last().map_or(0.0, |x| x.sim_seconds),
            final_loss: r.final_loss(),
            final_accuracy: r.final_accuracy(),
            reached_target: r.reached_target,
            rho: r.reports.first().and_then(|x| x.rho),
        });
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: results.iter().map(|r| r.seed).collect(),
        policy: cfg.scheduler.policy,
        rho: cfg.scheduler.rho,
        host_runtime_s,
        runs,
        config: cfg.clone(),
    };
    let path = out.join(format!("{}_summary.json", cfg.name));
    fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// The `run` verb: all seeds, then CSVs and the summary.
pub fn run(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    let results = run_seeds(cfg, seeds)?;
    write_run_outputs(cfg, &results, out, start.elapsed().as_secs_f64())
}

/// The `verify` verb: runs the suite and writes `verify_<suite>.json` into `out`.
pub fn verify(suite: Suite, seed: u64, out: Option<&Path>) -> Result<VerificationReport> {
    let report = verify::run_suite(suite, seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("verify_{suite}.json"));
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

/// Human-readable verification outcome, one line per check.
pub fn render_report(report: &VerificationReport) -> String {
    let mut s = String::new();
    for c in &report.checks {
        let tag = match (c.passed, c.gated) {
            (true, _) => "ok  ",
            (false, true) => "FAIL",
            (false, false) => "info",
        };
        let _ = writeln!(s, "[{tag}] {}: margin {:.3e} ({})", c.name, c.margin, c.detail);
    }
    let failed = report.failures().count();
    let _ = writeln!(s, "{}: {} checks, {failed} gated failures", report.suite, report.checks.len());
    s
}

/// A config to compare, labelled for the output table.
#[derive(Clone, Debug)]
pub struct CompareEntry {
    pub label: String,
    pub config: ExperimentConfig,
}

impl CompareEntry {
    pub fn new(config: ExperimentConfig) -> Self {
        CompareEntry {
            label: config.name.clone(),
            config,
        }
    }

    /// Copy of `base` with `;`-separated `key=value` overrides applied.
    pub fn variant(base: &ExperimentConfig, overrides: &str) -> Result<Self> {
        let mut value = toml::Value::try_from(base).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        for o in overrides.split(';').map(str::trim).filter(|o| !o.is_empty()) {
            apply_override(&mut value, o)?;
        }
        let config: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config {
            field: overrides.into(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(CompareEntry {
            label: format!("{}[{}]", base.name, overrides.trim()),
            config,
        })
    }
}

/// Rejects entries that differ in anything but the scheduling policy and its weight.
pub fn check_comparable(entries: &[CompareEntry]) -> Result<()> {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.name.clear();
        c.seeds.clear();
        c.output.dir = PathBuf::new();
        c.scheduler.policy = PolicyKind::ImportanceChannel;
        c.scheduler.rho = RhoSetting::Value(0.5);
        c
    };
    let Some(first) = entries.first() else {
        return Err(Error::invalid("compare needs at least one config"));
    };
    let reference = strip(&first.config);
    for e in &entries[1..] {
        if strip(&e.config) != reference {
            return Err(Error::Config {
                field: e.label.clone(),
                reason: format!(
                    "differs from `{}` beyond scheduler.policy and scheduler.rho; pass --force to compare anyway",
                    first.label
                ),
            });
        }
    }
    Ok(())
}

/// Linear-interpolation percentile (`q` in [0, 1]) of finite values; `None` if there are none.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Median that keeps infinities, so runs that never reach a target count as slowest.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub label: String,
    pub policy: PolicyKind,
    pub rho: RhoSetting,
    pub devices_per_round: usize,
    pub bandwidth_hz: f64,
    pub runs: usize,
    pub reached: usize,
    /// `None` when the median run never reached the target.
    pub median_time_to_target_s: Option<f64>,
    pub median_final_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub target: Option<f64>,
    pub rows: Vec<CompareRow>,
}

/// How the time-to-target threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetRule {
    Fixed(f64),
    /// This percentile of the first entry's final accuracies.
    FirstEntryPercentile(f64),
}

impl Default for TargetRule {
    fn default() -> Self {
        TargetRule::FirstEntryPercentile(0.9)
    }
}

/// Summarises finished runs; `results[i]` belongs to `entries[i]`.
pub fn summarize(entries: &[CompareEntry], results: &[Vec<RunResult>], seeds: &[u64], rule: TargetRule) -> Comparison {
    let finals = |runs: &[RunResult]| -> Vec<f64> { runs.iter().filter_map(|r| r.final_accuracy()).collect() };
    let target = match rule {
        TargetRule::Fixed(t) => Some(t),
        TargetRule::FirstEntryPercentile(q) => results.first().and_then(|r| percentile(&finals(r), q)),
    };
    let rows = entries
        .iter()
        .zip(results)
        .map(|(e, runs)| {
            let times: Vec<f64> = match target {
                Some(t) => runs
                    .iter()
                    .map(|r| r.time_to_accuracy(t).unwrap_or(f64::INFINITY))
                    .collect(),
                None => Vec::new(),
            };
            let mid = median(&times).filter(|x| x.is_finite());
            CompareRow {
                label: e.label.clone(),
                policy: e.config.scheduler.policy,
                rho: e.config.scheduler.rho,
                devices_per_round: e.config.scheduler.devices_per_round,
                bandwidth_hz: e.config.channel.bandwidth_hz,
                runs: runs.len(),
                reached: times.iter().filter(|x| x.is_finite()).count(),
                median_time_to_target_s: mid,
                median_final_accuracy: median(&finals(runs)),
            }
        })
        .collect();
    Comparison {
        seeds: seeds.to_vec(),
        target,
        rows,
    }
}

/// The `compare` verb without file output.
pub fn compare(entries: &[CompareEntry], seeds: &[u64], rule: TargetRule, force: bool) -> Result<Comparison> {
    if !force {
        check_comparable(entries)?;
    }
    let results = entries
        .iter()
        .map(|e| run_seeds(&e.config, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(entries, &results, seeds, rule))
}

fn rho_text(r: RhoSetting) -> String {
    match r {
        RhoSetting::Value(v) => v.to_string(),
        RhoSetting::Auto(_) => "auto".into(),
    }
}

fn opt_text(v: Option<f64>, unreached: &str) -> String {
    v.map_or_else(|| unreached.to_string(), |x| format!("{x:.6e}"))
}

impl Comparison {
    pub const CSV_HEADER: &'static str =
        "label,policy,rho,devices_per_round,bandwidth_hz,runs,reached,target,median_time_to_target_s,median_final_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.label.replace(',', ";"),
                r.policy.name(),
                rho_text(r.rho),
                r.devices_per_round,
                r.bandwidth_hz,
                r.runs,
                r.reached,
                self.target.map_or(String::new(), |t| t.to_string()),
                r.median_time_to_target_s.map_or("unreached".into(), |t| t.to_string()),
                r.median_final_accuracy.map_or(String::new(), |a| a.to_string()),
            );
        }
        s
    }

    /// Column-aligned text table.
    pub fn to_table(&self) -> String {
        let head = ["config", "policy", "rho", "M", "B [Hz]", "reached", "median t-to-target [s]", "median final acc"];
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.policy.name().to_string(),
                    rho_text(r.rho),
                    r.devices_per_round.to_string(),
                    format!("{:.3e}", r.bandwidth_hz),
                    format!("{}/{}", r.reached, r.runs),
                    opt_text(r.median_time_to_target_s, "unreached"),
                    r.median_final_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                ]
            })
            .collect();
        let mut width = head.map(str::len);
        for row in &body {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&width)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = match self.target {
            Some(t) => format!("target accuracy {t:.4} over {} seeds\n", self.seeds.len()),
            None => "no target accuracy (no classifier runs)\n".to_string(),
        };
        s += &line(&head.map(String::from));
        for row in &body {
            s += &line(row);
        }
        s
    }

    /// Writes `compare.csv` and `compare.txt` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("compare.csv"), self.to_csv())?;
        fs::write(out.join("compare.txt"), self.to_table())?;
        Ok(())
    }
}
