//! Dataset loading: a seeded synthetic classification task and IDX files.
//!
//! The synthetic task draws one fixed random template image per class and
//! adds i.i.d. Gaussian pixel noise; difficulty is tuned by the noise level.
//! Inputs of both kinds are normalized per channel with statistics computed
//! on the training split only.

use crate::error::{Error, Result};
use crate::rng::{stream, stream_indexed};
use crate::tensor::{Minibatch, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::PathBuf;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Class-conditional template images plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub resolution: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic(SyntheticDatasetSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// One split of normalized images.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[n, channels, height, width]`, flattened row-major.
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Split {
    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Materialize a minibatch from sample indices.
    pub fn minibatch(&self, indices: &[usize], num_classes: usize) -> Result<Minibatch> {
        let sl = self.sample_len();
        let mut values = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(&self.images[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        Minibatch::new(
            Tensor::new(
                vec![indices.len(), self.channels, self.height, self.width],
                values,
            )?,
            labels,
            num_classes,
        )
    }
}

/// Train/test splits plus the normalization constants used on both.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl Dataset {
    /// Shuffled sample order for one training epoch.
    pub fn epoch_order(&self, master_seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.n).collect();
        order.shuffle(&mut stream_indexed(master_seed, "shuffle", epoch));
        order
    }

    /// Full batches of a training epoch (a trailing partial batch is
    /// dropped; batch statistics need at least two rows).
    pub fn train_batches(
        &self,
        master_seed: u64,
        epoch: u64,
        batch_size: usize,
    ) -> Vec<Vec<usize>> {
        let order = self.epoch_order(master_seed, epoch);
        order
            .chunks_exact(batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        (self.train.n / batch_size) as u64
    }

    /// Sequential eval batches over a split (includes the partial tail).
    pub fn eval_batches(split: &Split, batch_size: usize) -> Vec<Vec<usize>> {
        (0..split.n)
            .collect::<Vec<usize>>()
            .chunks(batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Load either dataset kind and normalize with train-split statistics.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let (mut train, mut test, num_classes) = match spec {
        DatasetSpec::Synthetic(s) => generate_synthetic(s)?,
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = read_idx_split(train_images, train_labels)?;
            let test = read_idx_split(test_images, test_labels)?;
            let max = train
                .labels
                .iter()
                .chain(&test.labels)
                .copied()
                .max()
                .ok_or_else(|| Error::Validation("empty IDX dataset".into()))?;
            (train, test, max as usize + 1)
        }
    };
    let (mean, std) = channel_stats(&train);
    normalize(&mut train, &mean, &std);
    normalize(&mut test, &mean, &std);
    Ok(Dataset {
        train,
        test,
        num_classes,
        norm_mean: mean,
        norm_std: std,
    })
}

fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<(Split, Split, usize)> {
    if spec.num_classes < 2 {
        return Err(Error::Validation("synthetic task needs >= 2 classes".into()));
    }
    let sample_len = spec.channels * spec.resolution * spec.resolution;
    let mut template_rng = stream(spec.seed, "data/templates");
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let templates: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| {
            (0..sample_len)
                .map(|_| unit.sample(&mut template_rng) as f32)
                .collect()
        })
        .collect();

    let make_split = |label: &str, n: usize| -> Split {
        let mut rng = stream(spec.seed, &format!("data/{label}"));
        let mut images = Vec::with_capacity(n * sample_len);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            let t = &templates[class];
            for &base in t.iter() {
                images.push(base + (spec.noise_sigma * unit.sample(&mut rng)) as f32);
            }
            labels.push(class as u32);
        }
        Split {
            images,
            labels,
            n,
            channels: spec.channels,
            height: spec.resolution,
            width: spec.resolution,
        }
    };

    let train = make_split("train", spec.train_samples);
    let test = make_split("test", spec.test_samples);
    Ok((train, test, spec.num_classes))
}

fn channel_stats(split: &Split) -> (Vec<f32>, Vec<f32>) {
    let sl = split.sample_len();
    let per_channel = split.height * split.width;
    let mut mean = vec![0.0f64; split.channels];
    let mut var = vec![0.0f64; split.channels];
    let count = (split.n * per_channel) as f64;
    for i in 0..split.n {
        for c in 0..split.channels {
            let base = i * sl + c * per_channel;
            for p in 0..per_channel {
                mean[c] += f64::from(split.images[base + p]);
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..split.n {
        for c in 0..split.channels {
            let base = i * sl + c * per_channel;
            for p in 0..per_channel {
                let d = f64::from(split.images[base + p]) - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|v| ((v / count).sqrt().max(1e-6)) as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn normalize(split: &mut Split, mean: &[f32], std: &[f32]) {
    let sl = split.sample_len();
    let per_channel = split.height * split.width;
    for i in 0..split.n {
        for c in 0..split.channels {
            let base = i * sl + c * per_channel;
            for p in 0..per_channel {
                split.images[base + p] = (split.images[base + p] - mean[c]) / std[c];
            }
        }
    }
}

// ── IDX files ────────────────────────────────────────────────────────

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        let at = self.offset;
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += 4;
        Ok(u32::from_be_bytes(buf))
    }

    fn read_bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let at = self.offset;
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }
}

fn read_idx_split(images_path: &PathBuf, labels_path: &PathBuf) -> Result<Split> {
    let mut r = OffsetReader {
        inner: std::io::BufReader::new(std::fs::File::open(images_path)?),
        offset: 0,
    };
    let magic = r.read_u32_be("images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = r.read_u32_be("image count")? as usize;
    let h = r.read_u32_be("image height")? as usize;
    let w = r.read_u32_be("image width")? as usize;
    let raw = r.read_bytes(n * h * w, "image pixels")?;
    let images: Vec<f32> = raw.into_iter().map(|b| f32::from(b) / 255.0).collect();

    let mut r = OffsetReader {
        inner: std::io::BufReader::new(std::fs::File::open(labels_path)?),
        offset: 0,
    };
    let magic = r.read_u32_be("labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let ln = r.read_u32_be("label count")? as usize;
    if ln != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("label count {ln} != image count {n}"),
        });
    }
    let labels: Vec<u32> = r
        .read_bytes(ln, "labels")?
        .into_iter()
        .map(u32::from)
        .collect();

    Ok(Split {
        images,
        labels,
        n,
        channels: 1,
        height: h,
        width: w,
    })
}

/// Write an IDX image/label pair (used by tests and fixtures).
pub fn write_idx_files(
    images_path: &PathBuf,
    labels_path: &PathBuf,
    images: &[u8],
    labels: &[u8],
    h: usize,
    w: usize,
) -> Result<()> {
    let n = labels.len();
    if images.len() != n * h * w {
        return Err(Error::Validation(format!(
            "expected {} pixels, got {}",
            n * h * w,
            images.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(images);
    std::fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    std::fs::write(labels_path, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::digest_f32;
    use std::collections::HashSet;

    fn spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: 10,
            resolution: 8,
            channels: 1,
            train_samples: 40,
            test_samples: 20,
            noise_sigma: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let a = load_dataset(&DatasetSpec::Synthetic(spec())).unwrap();
        let b = load_dataset(&DatasetSpec::Synthetic(spec())).unwrap();
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.test.images, b.test.images);
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn train_test_have_no_duplicate_images() {
        let d = load_dataset(&DatasetSpec::Synthetic(spec())).unwrap();
        let sl = d.train.sample_len();
        let mut seen: HashSet<u64> = HashSet::new();
        for i in 0..d.train.n {
            seen.insert(digest_f32(&d.train.images[i * sl..(i + 1) * sl]));
        }
        assert_eq!(seen.len(), d.train.n);
        for i in 0..d.test.n {
            assert!(!seen.contains(&digest_f32(&d.test.images[i * sl..(i + 1) * sl])));
        }
    }

    #[test]
    fn normalization_uses_train_stats() {
        let d = load_dataset(&DatasetSpec::Synthetic(spec())).unwrap();
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for &v in &d.train.images {
            sum += f64::from(v);
            sq += f64::from(v) * f64::from(v);
        }
        let n = d.train.images.len() as f64;
        assert!((sum / n).abs() < 1e-4);
        assert!((sq / n - 1.0).abs() < 1e-3);
    }

    #[test]
    fn epoch_shuffles_differ_but_reproduce() {
        let d = load_dataset(&DatasetSpec::Synthetic(spec())).unwrap();
        assert_eq!(d.epoch_order(5, 0), d.epoch_order(5, 0));
        assert_ne!(d.epoch_order(5, 0), d.epoch_order(5, 1));
        let batches = d.train_batches(5, 0, 16);
        assert_eq!(batches.len(), 2); // 40 / 16, partial dropped
        assert!(batches.iter().all(|b| b.len() == 16));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<u8> = (0..10 * 16 * 16).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u8> = (0..10).map(|i| (i % 3) as u8).collect();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx_files(&ip, &lp, &images, &labels, 16, 16).unwrap();
        let split = read_idx_split(&ip, &lp).unwrap();
        assert_eq!(split.n, 10);
        assert_eq!((split.channels, split.height, split.width), (1, 16, 16));
        assert_eq!(split.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn idx_bad_magic_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, 0x12345678u32.to_be_bytes()).unwrap();
        std::fs::write(&lp, IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        let err = read_idx_split(&ip, &lp).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let images: Vec<u8> = vec![0; 5 * 4 * 4];
        write_idx_files(&ip, &lp, &images, &[0u8; 5], 4, 4).unwrap();
        // Rewrite labels with a different count.
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&4u32.to_be_bytes());
        lab.extend_from_slice(&[0u8; 4]);
        std::fs::write(&lp, lab).unwrap();
        assert!(matches!(
            read_idx_split(&ip, &lp),
            Err(Error::Format { .. })
        ));
    }
}
