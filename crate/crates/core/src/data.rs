//! Synthetic datasets, IDX ingestion and non-IID partitioning across devices.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LabeledSample;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Desk-scale synthetic learning tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SyntheticTask {
    /// `y = w_trueᵀx + N(0, noise_sd²)` with `x ~ N(0, I)`; `w_true` drawn from `true_w_seed`.
    Regression {
        dim: usize,
        noise_sd: f64,
        true_w_seed: u64,
    },
    /// Two linearly separable classes in {−1, +1}.
    ///
    /// Samples sit at least `separation / 2` from the hyperplane through
    /// `offset·v` with normal `u` (both random unit vectors); a constant 1
    /// is appended as a bias feature, so feature length is `dim + 1`.
    /// Each label is then flipped with probability `label_noise`.
    BinaryMargin {
        dim: usize,
        separation: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        label_noise: f64,
    },
    /// `classes` Gaussian blobs with unit covariance and centers of norm
    /// `separation`; labels are class indices; bias feature appended.
    Blobs {
        dim: usize,
        classes: usize,
        separation: f64,
    },
}

impl SyntheticTask {
    /// Length of each generated feature vector.
    pub fn feature_len(&self) -> usize {
        match *self {
            SyntheticTask::Regression { dim, .. } => dim,
            SyntheticTask::BinaryMargin { dim, .. } | SyntheticTask::Blobs { dim, .. } => dim + 1,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// The regression ground truth used by [`generate_synthetic`].
pub fn regression_true_weights(dim: usize, true_w_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(true_w_seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates `total_n` samples for `task`; deterministic in `seed`.
pub fn generate_synthetic(task: &SyntheticTask, total_n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    if total_n == 0 {
        return Err(Error::invalid("total_n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *task {
        SyntheticTask::Regression {
            dim,
            noise_sd,
            true_w_seed,
        } => {
            if dim == 0 || noise_sd < 0.0 {
                return Err(Error::invalid("regression needs dim >= 1 and noise_sd >= 0"));
            }
            let w_true = regression_true_weights(dim, true_w_seed);
            Ok((0..total_n)
                .map(|_| {
                    let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let noise: f64 = rng.sample(StandardNormal);
                    let y = crate::learners::dot(&w_true, &x) + noise_sd * noise;
                    LabeledSample::new(x, y)
                })
                .collect())
        }
        SyntheticTask::BinaryMargin {
            dim,
            separation,
            offset,
            label_noise,
        } => {
            if dim == 0 || separation <= 0.0 || !(0.0..0.5).contains(&label_noise) {
                return Err(Error::invalid(
                    "binary_margin needs dim >= 1, separation > 0 and 0 <= label_noise < 0.5",
                ));
            }
            let normal = unit_vector(&mut rng, dim);
            let shift = unit_vector(&mut rng, dim);
            Ok((0..total_n)
                .map(|i| {
                    let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let along = crate::learners::dot(&x, &normal);
                    let extra: f64 = rng.sample::<f64, _>(StandardNormal).abs();
                    let target = y * (0.5 * separation + extra);
                    for j in 0..dim {
                        x[j] += (target - along) * normal[j] + offset * shift[j];
                    }
                    x.push(1.0);
                    let flip = label_noise > 0.0 && rng.random::<f64>() < label_noise;
                    LabeledSample::new(x, if flip { -y } else { y })
                })
                .collect())
        }
        SyntheticTask::Blobs {
            dim,
            classes,
            separation,
        } => {
            if dim == 0 || classes < 2 {
                return Err(Error::invalid("blobs need dim >= 1 and classes >= 2"));
            }
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| unit_vector(&mut rng, dim).into_iter().map(|v| v * separation).collect())
                .collect();
            Ok((0..total_n)
                .map(|i| {
                    let c = i % classes;
                    let mut x: Vec<f64> = centers[c]
                        .iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    x.push(1.0);
                    LabeledSample::new(x, c as f64)
                })
                .collect())
        }
    }
}

/// Splits off a held-out evaluation set; returns `(train, test)`.
pub fn train_test_split(
    samples: Vec<LabeledSample>,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test_fraction must lie in [0, 1)"));
    }
    let mut samples = samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n_test = (samples.len() as f64 * test_fraction).round() as usize;
    let test = samples.split_off(samples.len() - n_test);
    Ok((samples, test))
}

/// How samples are dealt to devices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    IidUniform,
    /// Sort by label, cut `shard_count` equal shards, deal `shards_per_device` to each device.
    LabelSortedShards {
        shard_count: usize,
        shards_per_device: usize,
    },
    /// Every device holds samples of exactly one of two classes.
    TwoClassSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub seed: u64,
    /// Explicit per-device sample counts (iid scheme only); must sum to the sample count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
}

/// One device's local dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceData {
    /// 1-based device id.
    pub id: usize,
    pub samples: Vec<LabeledSample>,
}

/// Local datasets of the whole fleet; `n = Σ n_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FleetDatasets {
    devices: Vec<DeviceData>,
}

impl FleetDatasets {
    pub fn new(devices: Vec<DeviceData>) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::invalid("fleet needs at least one device"));
        }
        for (i, d) in devices.iter().enumerate() {
            if d.id != i + 1 {
                return Err(Error::invalid("device ids must be 1..K in order"));
            }
            if d.samples.is_empty() {
                return Err(Error::invalid(format!("device {} holds no samples", d.id)));
            }
        }
        Ok(FleetDatasets { devices })
    }

    pub fn devices(&self) -> &[DeviceData] {
        &self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// `n_k` per device.
    pub fn sizes(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.samples.len()).collect()
    }

    /// `n`.
    pub fn total(&self) -> usize {
        self.devices.iter().map(|d| d.samples.len()).sum()
    }

    pub fn datasets(&self) -> Vec<&[LabeledSample]> {
        self.devices.iter().map(|d| d.samples.as_slice()).collect()
    }

    /// All samples concatenated in device order.
    pub fn pooled(&self) -> Vec<LabeledSample> {
        self.devices.iter().flat_map(|d| d.samples.iter().cloned()).collect()
    }
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

fn build_fleet(groups: Vec<Vec<LabeledSample>>) -> Result<FleetDatasets> {
    FleetDatasets::new(
        groups
            .into_iter()
            .enumerate()
            .map(|(i, samples)| DeviceData { id: i + 1, samples })
            .collect(),
    )
}

/// Deals `samples` over `k` devices according to `spec`; every sample lands on exactly one device.
pub fn partition(samples: Vec<LabeledSample>, k: usize, spec: &PartitionSpec) -> Result<FleetDatasets> {
    if k == 0 {
        return Err(Error::invalid("device count must be positive"));
    }
    if samples.len() < k {
        return Err(Error::invalid(format!(
            "{} samples cannot cover {k} devices",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.sizes.is_some() && spec.scheme != PartitionScheme::IidUniform {
        return Err(Error::invalid("explicit device sizes are only supported by iid_uniform"));
    }
    match &spec.scheme {
        PartitionScheme::IidUniform => {
            let sizes = match &spec.sizes {
                Some(s) => {
                    if s.len() != k || s.contains(&0) || s.iter().sum::<usize>() != samples.len() {
                        return Err(Error::invalid(
                            "sizes must list K positive counts summing to the sample count",
                        ));
                    }
                    s.clone()
                }
                None => split_evenly(samples.len(), k),
            };
            let mut samples = samples;
            samples.shuffle(&mut rng);
            let mut rest = samples.into_iter();
            let groups = sizes.iter().map(|&n| rest.by_ref().take(n).collect()).collect();
            build_fleet(groups)
        }
        PartitionScheme::LabelSortedShards {
            shard_count,
            shards_per_device,
        } => {
            let (shard_count, per_device) = (*shard_count, *shards_per_device);
            if per_device == 0 || shard_count != k * per_device {
                return Err(Error::invalid(format!(
                    "label_sorted_shards needs shard_count = K x shards_per_device ({k} x {per_device})"
                )));
            }
            if !samples.len().is_multiple_of(shard_count) || samples.len() < shard_count {
                return Err(Error::invalid(format!(
                    "{} samples do not cut into {shard_count} equal shards",
                    samples.len()
                )));
            }
            let mut samples = samples;
            samples.sort_by(|a, b| a.label.total_cmp(&b.label));
            let shard_len = samples.len() / shard_count;
            let mut order: Vec<usize> = (0..shard_count).collect();
            order.shuffle(&mut rng);
            let mut groups: Vec<Vec<LabeledSample>> = vec![Vec::new(); k];
            for (j, &shard) in order.iter().enumerate() {
                groups[j % k].extend_from_slice(&samples[shard * shard_len..(shard + 1) * shard_len]);
            }
            build_fleet(groups)
        }
        PartitionScheme::TwoClassSplit => {
            if k < 2 {
                return Err(Error::invalid("two_class_split needs at least two devices"));
            }
            let mut labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
            labels.sort_by(f64::total_cmp);
            labels.dedup();
            if labels.len() != 2 {
                return Err(Error::invalid(format!(
                    "two_class_split needs exactly two labels, found {}",
                    labels.len()
                )));
            }
            let (mut first, mut second): (Vec<_>, Vec<_>) =
                samples.into_iter().partition(|s| s.label == labels[0]);
            let share = first.len() as f64 / (first.len() + second.len()) as f64;
            let k_first = ((k as f64 * share).round() as usize).clamp(1, k - 1);
            if first.len() < k_first || second.len() < k - k_first {
                return Err(Error::invalid("too few samples of one class for its devices"));
            }
            first.shuffle(&mut rng);
            second.shuffle(&mut rng);
            let mut device_order: Vec<usize> = (0..k).collect();
            device_order.shuffle(&mut rng);
            let mut groups: Vec<Vec<LabeledSample>> = vec![Vec::new(); k];
            for (class_samples, devices) in [
                (first, &device_order[..k_first]),
                (second, &device_order[k_first..]),
            ] {
                let mut rest = class_samples.into_iter();
                for (&dev, n) in devices.iter().zip(split_evenly(rest.len(), devices.len())) {
                    groups[dev] = rest.by_ref().take(n).collect();
                }
            }
            build_fleet(groups)
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an IDX image file: returns `(count, rows·cols, pixels)`.
fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let dims: Option<Vec<u32>> = (1..4).map(|i| read_u32(bytes, 4 * i)).collect();
    let dims = dims.ok_or_else(|| format_err(path, "truncated header"))?;
    let (count, pixels) = (dims[0] as usize, dims[1] as usize * dims[2] as usize);
    let body = &bytes[16..];
    if body.len() != count * pixels {
        return Err(format_err(
            path,
            format!("expected {} pixel bytes, found {}", count * pixels, body.len()),
        ));
    }
    Ok((count, pixels, body.to_vec()))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).ok_or_else(|| format_err(path, "truncated header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let count = read_u32(bytes, 4).ok_or_else(|| format_err(path, "truncated header"))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format_err(path, format!("expected {count} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Loads an MNIST-style IDX image/label pair, scales pixels to `[0, 1]` and
/// keeps `subsample_n` samples drawn uniformly with `seed` (original order preserved).
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    subsample_n: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (count, pixels, image_bytes) = parse_idx_images(images_path, &fs::read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(format_err(
            labels_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    if subsample_n == 0 || subsample_n > count {
        return Err(Error::invalid(format!(
            "subsample_n = {subsample_n} outside 1..={count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, count, subsample_n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let x = image_bytes[i * pixels..(i + 1) * pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            LabeledSample::new(x, labels[i] as f64)
        })
        .collect())
}

/// Writes an IDX image file (`count × rows × cols` unsigned bytes).
pub fn write_idx_images(path: impl AsRef<Path>, rows: u32, cols: u32, pixels: &[u8]) -> Result<()> {
    let per = (rows * cols) as usize;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / per) as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
