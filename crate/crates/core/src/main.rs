use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feel_sched::cli::{self, CompareEntry, TargetRule};
use feel_sched::config::{ExperimentConfig, DEFAULT_CONFIG};
use feel_sched::verify::Suite;
use feel_sched::{Error, Result};

/// Simulate importance- and channel-aware scheduling for federated edge learning.
#[derive(Parser)]
#[command(name = "feel-sched", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one experiment over its seeds; writes a CSV per seed and a summary JSON.
    Run {
        /// Experiment file (TOML or JSON); the built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a numerical verification suite; exits 1 if a gated check fails.
    Verify {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directory for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Median time-to-target and final accuracy across configs over shared seeds.
    Compare {
        /// Experiment files; the built-in default when none are given.
        configs: Vec<PathBuf>,
        /// Extra entry derived from the first config: `key=value;key=value`.
        #[arg(long = "variant", value_name = "OVERRIDES")]
        variants: Vec<String>,
        /// Fixed target accuracy instead of the 90th percentile of the first entry's final accuracy.
        #[arg(long)]
        target: Option<f64>,
        /// Allow configs that differ beyond scheduler.policy and scheduler.rho.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Override a config value, e.g. `scheduler.rho=5e-6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seeds 1..=N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Output directory; defaults to the config's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(path: Option<&Path>, set: &[String]) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load_with_overrides(p, set),
        None => ExperimentConfig::parse_with_overrides(DEFAULT_CONFIG, set, Path::new(".")),
    }
}

fn execute(verb: Verb) -> Result<bool> {
    match verb {
        Verb::Run { config, common } => {
            let cfg = load(config.as_deref(), &common.set)?;
            let seeds = cli::resolve_seeds(&cfg, common.seeds, common.seed_list.as_deref())?;
            let out = common.out.unwrap_or_else(|| cfg.output.dir.clone());
            let summary = cli::run(&cfg, &seeds, &out)?;
            if !common.quiet {
                for r in &summary.runs {
                    let acc = r.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
                    println!(
                        "seed {:>4}: {} rounds, {:.4e} s simulated, loss {:.4e}, accuracy {acc}",
                        r.seed, r.rounds, r.sim_seconds, r.final_loss
                    );
                }
                println!("wrote {} runs to {}", summary.runs.len(), out.display());
            }
            Ok(true)
        }
        Verb::Verify { suite, seed, out, quiet } => {
            let report = cli::verify(suite, seed, out.as_deref())?;
            if !quiet {
                print!("{}", cli::render_report(&report));
            }
            for c in report.failures() {
                eprintln!("FAILED {}: margin {:.3e} ({})", c.name, c.margin, c.detail);
            }
            Ok(report.passed())
        }
        Verb::Compare { configs, variants, target, force, common } => {
            let mut entries = if configs.is_empty() {
                vec![CompareEntry::new(load(None, &common.set)?)]
            } else {
                configs
                    .iter()
                    .map(|p| load(Some(p), &common.set).map(CompareEntry::new))
                    .collect::<Result<Vec<_>>>()?
            };
            let base = entries[0].config.clone();
            for v in &variants {
                entries.push(CompareEntry::variant(&base, v)?);
            }
            let seeds = cli::resolve_seeds(&base, common.seeds, common.seed_list.as_deref())?;
            let rule = target.map_or(TargetRule::default(), TargetRule::Fixed);
            let cmp = cli::compare(&entries, &seeds, rule, force)?;
            let out = common.out.unwrap_or_else(|| base.output.dir.clone());
            cmp.write(&out)?;
            if !common.quiet {
                print!("{}", cmp.to_table());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    if let Err(e) = cli::init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(cli::exit_code(&e) as u8);
    }
    match execute(args.verb) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
