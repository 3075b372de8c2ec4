//! Image datasets: CIFAR-10 binary batches, stratified subsets, synthetic
//! class-conditional textures, and crop/flip augmentation.

mod augment;
mod cifar;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use augment::{augment, flip_horizontal, AugmentPolicy};
pub use cifar::{load_cifar10, read_cifar_batch, write_cifar_batch, CIFAR_RECORD_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation used to normalize network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
    pub stats: ChannelStats,
}

impl Dataset {
    /// Validates labels and computes channel statistics from the images.
    pub fn new(images: Tensor4<f32>, labels: Vec<usize>, split: Split, classes: usize) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.dims()[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        let stats = channel_stats(&images);
        Ok(Dataset { images, labels, split, classes, stats })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalize with another split's statistics (test data uses train stats).
    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the selected samples into a batch tensor, keeping `[0, 1]` values.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4<f32>, Vec<usize>) {
        let [_, c, h, w] = self.images.dims();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let images = Tensor4::new([indices.len(), c, h, w], data).expect("gathered volume");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset { images, labels, split: self.split, classes: self.classes, stats: self.stats.clone() }
    }

    /// SHA-256 over dims, pixel bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.dims() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `(x - mean) / std` per channel.
pub fn normalize(batch: &Tensor4<f32>, stats: &ChannelStats) -> Result<Tensor4<f32>> {
    let [n, c, h, w] = batch.dims();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Shape(format!("normalization stats for {} channels, batch has {c}", stats.mean.len())));
    }
    let plane = h * w;
    let mut out = batch.clone();
    for b in 0..n {
        for ch in 0..c {
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            out.data_mut()[(b * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
    Ok(out)
}

/// Per-channel mean and (population) standard deviation, accumulated in f64.
pub fn channel_stats(images: &Tensor4<f32>) -> ChannelStats {
    let [n, c, h, w] = images.dims();
    let plane = h * w;
    let count = (n * plane).max(1) as f64;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            for &v in &images.data()[(b * c + ch) * plane..][..plane] {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    ChannelStats { mean: mean.into_iter().map(|m| m as f32).collect(), std }
}

/// Bilinear resampling to `size x size` with half-pixel centres.
pub fn resize_bilinear(images: &Tensor4<f32>, size: usize) -> Tensor4<f32> {
    let [n, c, h, w] = images.dims();
    let src = |len: usize, i: usize| {
        let x = ((i as f64 + 0.5) * len as f64 / size as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(len - 1), (x - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..size).map(|y| src(h, y)).collect();
    let cols: Vec<_> = (0..size).map(|x| src(w, x)).collect();
    let mut out = Tensor4::zeros([n, c, size, size]);
    let data = images.data();
    for (p, dst) in out.data_mut().chunks_mut(size * size).enumerate() {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[y * size + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Deterministic stratified subsample keeping `round(count * fraction)` of each class.
///
/// The selection depends only on the dataset contents, `fraction` and `seed`;
/// the surviving samples keep their original relative order.
pub fn subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..ds.classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let take = (members.len() as f64 * fraction).round() as usize;
        if take == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves class {class} ({} samples) empty",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..take]);
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// Class-conditional textured images that a small CNN separates easily.
///
/// Every class gets its own per-channel base colour and an oriented sinusoidal
/// grating; samples add i.i.d. Gaussian pixel noise and are clipped to `[0, 1]`.
/// Labels cycle through the classes, so any `n` divisible by `classes` is balanced.
pub fn synth_blobs(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_sized(n, classes, 32, seed)
}

pub fn synth_blobs_sized(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    synth_with_templates(n, classes, size, seed, seed)
}

/// Train and test splits drawn from the same class templates with disjoint
/// noise; the test split carries the training statistics.
pub fn synth_split(train_n: usize, test_n: usize, classes: usize, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synth_with_templates(train_n, classes, size, seed, seed)?;
    let mut test = synth_with_templates(test_n, classes, size, seed, !seed)?;
    test.split = Split::Test;
    let stats = train.stats.clone();
    Ok((train, test.with_stats(stats)))
}

fn synth_with_templates(n: usize, classes: usize, size: usize, seed: u64, sample_seed: u64) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(Error::InvalidArgument("synthetic data needs at least one class and pixel".into()));
    }
    // Templates come from a stream that does not depend on n.
    let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e3b_1a7e);
    let templates: Vec<(Vec<f64>, f64, f64, f64)> = (0..classes)
        .map(|_| {
            let base = (0..3).map(|_| trng.gen_range(0.3..0.7)).collect();
            let angle = trng.gen_range(0.0..std::f64::consts::PI);
            let freq = trng.gen_range(0.2..0.9);
            let phase = trng.gen_range(0.0..std::f64::consts::TAU);
            (base, angle, freq, phase)
        })
        .collect();
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (base, angle, freq, phase) = &templates[label];
        let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let wave = (fx * x as f64 + fy * y as f64 + phase + ch as f64).sin();
                    let v = base[ch] + 0.15 * wave + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor4::new([n, 3, size, size], data)?, labels, Split::Train, classes)
}
