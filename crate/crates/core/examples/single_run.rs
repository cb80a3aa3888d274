//! Steps through a few rounds of the default experiment and prints each
//! round's schedule and latency components, then writes the run's CSV.

use feel_sched::config::ExperimentConfig;
use feel_sched::trainer::Experiment;

fn main() -> feel_sched::Result<()> {
    let cfg = ExperimentConfig::default();
    let exp = Experiment::from_config(&cfg, 1)?;
    let mut state = exp.start(1);
    println!("round  scheduled  rho        broadcast[ms]  compute[ms]  upload[ms]  loss     accuracy");
    for _ in 0..10 {
        let r = exp.run_round(&mut state)?;
        println!(
            "{:>5}  {:>9}  {:.3e}  {:>13.4}  {:>11.4}  {:>10.4}  {:.5}  {:.4}",
            r.round,
            format!("{:?}", r.scheduled),
            r.rho.unwrap_or(f64::NAN),
            r.broadcast_s * 1e3,
            r.compute_s * 1e3,
            r.upload_s * 1e3,
            r.loss,
            r.accuracy.unwrap_or(f64::NAN)
        );
    }
    let run = exp.run(1)?;
    let path = std::env::temp_dir().join("feel_sched_single_run.csv");
    std::fs::write(&path, run.to_csv())?;
    println!("full {}-round run written to {}", run.reports.len(), path.display());
    Ok(())
}
