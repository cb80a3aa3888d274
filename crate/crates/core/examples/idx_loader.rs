//! Trains on data read from IDX files (the MNIST container format).
//!
//! Writes a small two-class image set to a temporary directory, points a
//! config at it and runs a short experiment. Point `data.idx` at real MNIST
//! files to train on them instead.

use feel_sched::config::{ExperimentConfig, IdxSource};
use feel_sched::data::{self, PartitionScheme};
use feel_sched::trainer::run_experiment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> feel_sched::Result<()> {
    let dir = tempfile::tempdir()?;
    let (rows, cols, count) = (8u32, 8u32, 1200usize);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        // digit "0" lights the left half, digit "1" the right half
        let label = (i % 2) as u8;
        for c in 0..rows * cols {
            let lit = ((c % cols) < cols / 2) == (label == 0);
            let base: u8 = if lit { 160 } else { 40 };
            pixels.push(base.saturating_add(rng.random_range(0..80)));
        }
        labels.push(label);
    }
    let images = dir.path().join("images.idx3-ubyte");
    let label_file = dir.path().join("labels.idx1-ubyte");
    data::write_idx_images(&images, rows, cols, &pixels)?;
    data::write_idx_labels(&label_file, &labels)?;

    let mut cfg = ExperimentConfig::default();
    cfg.name = "idx-demo".into();
    cfg.data.synthetic = None;
    cfg.data.idx = Some(IdxSource {
        images,
        labels: label_file,
        subsample: 1000,
        keep_labels: Some(vec![0, 1]),
    });
    cfg.data.total_samples = 1000;
    cfg.data.partition = PartitionScheme::IidUniform;
    cfg.trainer.rounds = 100;
    cfg.validate()?;

    let run = run_experiment(&cfg, 1)?;
    println!(
        "{} rounds, {:.4} s simulated, final loss {:.4}, test accuracy {:.3}",
        run.reports.len(),
        run.reports.last().map_or(0.0, |r| r.sim_seconds),
        run.final_loss(),
        run.final_accuracy().unwrap_or(f64::NAN)
    );
    Ok(())
}
