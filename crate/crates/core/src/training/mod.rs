//! Two-stage refocusing learning and its comparison arms.
//!
//! `pretrain` fits a fresh model; `refocus_train` swaps every spatial conv for
//! a refocusing layer over the frozen pre-trained kernel and trains the rest;
//! `retrain_arm` and `finetune_arm` spend the same budget on the original
//! structure. All arms share the data order seed so their results are paired.

mod optim;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, normalize, subset, AugmentPolicy, ChannelStats, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{Layer, ModelGraph, Network, SurgeryOptions};
use crate::tensor::{softmax_crossentropy, Scalar, Tensor4};

pub use optim::Sgd;
pub use schedule::{lr_at, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub precision: Precision,
    pub data_fraction: f64,
    pub augment: AugmentPolicy,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            base_lr: 0.05,
            weight_decay: 4e-5,
            batch_size: 128,
            epochs: 30,
            warmup_epochs: 2,
            schedule: Schedule::Cosine,
            seed: 0,
            precision: Precision::F32,
            data_fraction: 1.0,
            augment: AugmentPolicy::default(),
            verbose: false,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.warmup_epochs > 0 && self.warmup_epochs >= self.epochs {
            p.push(format!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            p.push(format!("data_fraction must be in (0, 1], got {}", self.data_fraction));
        }
        if self.batch_size < 2 {
            p.push(format!("batch_size must be at least 2 for batchnorm, got {}", self.batch_size));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            p.push(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            p.push(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            p.push(format!("augment.flip_prob must be in [0, 1], got {}", self.augment.flip_prob));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// The finetune arm: constant `1e-4`, no warmup, everything else shared.
    pub fn finetune(&self) -> TrainConfig {
        TrainConfig { base_lr: 1e-4, warmup_epochs: 0, schedule: Schedule::Constant, ..self.clone() }
    }
}

/// Optimizer steps per epoch; the final partial batch is dropped.
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size.max(1)
}

// Independent streams of one seed.
const STREAM_INIT: u64 = 1;
const STREAM_SURGERY: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

/// A generator for `(seed, purpose, index)`; distinct purposes never share a stream.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (index & 0xffff_ffff));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_COLUMNS: [&str; 7] = ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"];

impl TrainLog {
    /// CSV with a header row; a missing validation split leaves its cells empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        let mut s = TRAIN_LOG_COLUMNS.join(",");
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.10},{:.8},{:.6},{},{},{:.3}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                r.val_acc.map(|x| format!("{x:.6}")).unwrap_or_default(),
                r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn prepare<T: Scalar>(images: &Tensor4<f32>, stats: &ChannelStats) -> Result<Tensor4<T>> {
    Ok(normalize(images, stats)?.cast::<T>())
}

/// Mean loss and top-1 accuracy in inference mode, normalizing with `stats`.
pub fn evaluate_with<T: Scalar>(net: &Network<T>, data: &Dataset, stats: &ChannelStats) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    const CHUNK: usize = 32;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (images, labels) = data.gather(idx);
        let logits = net.predict(&prepare::<T>(&images, stats)?)?;
        let (l, _) = softmax_crossentropy(&logits, &labels)?;
        loss += l.as_f64() * idx.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// [`evaluate_with`] using the split's own normalization statistics.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_with(net, data, &data.stats)
}

fn count_correct<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count()
}

/// Trains `net` in place. Validation, when given, is normalized with the
/// training statistics.
pub fn fit<T: Scalar>(net: &mut Network<T>, train: &Dataset, val: Option<&Dataset>, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if train.split != Split::Train {
        return Err(Error::Data("fit needs the training split; augmentation is train-only".into()));
    }
    let data = subset(train, config.data_fraction, config.seed)?;
    let spe = steps_per_epoch(data.len(), config.batch_size);
    if spe == 0 && config.epochs > 0 {
        return Err(Error::Data(format!("{} samples cannot fill one batch of {}", data.len(), config.batch_size)));
    }
    let stats = &train.stats;
    let mut opt = Sgd::<T>::new(config.momentum, config.weight_decay);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut derived_rng(config.seed, STREAM_ORDER, epoch as u64));
        let mut aug_rng = derived_rng(config.seed, STREAM_AUGMENT, epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks_exact(config.batch_size).enumerate() {
            let step = epoch * spe + b;
            let (images, labels) = data.gather(idx);
            let images = augment(&images, &config.augment, &mut aug_rng);
            let diverged = |e| match e {
                Error::NonFinite(_) => Error::Divergence { epoch, step, loss: f64::NAN },
                e => e,
            };
            let (logits, cache) = net.forward_train(&prepare::<T>(&images, stats)?).map_err(diverged)?;
            let (loss, grad) = softmax_crossentropy(&logits, &labels).map_err(diverged)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let grads = net.backward(&cache, &grad).map_err(diverged)?;
            opt.step(net, &grads, T::of(lr_at(config, step, spe)))?;
            loss_sum += loss * idx.len() as f64;
            correct += count_correct(&logits, &labels);
            seen += idx.len();
        }
        let (val_loss, val_acc) = match val {
            Some(v) => {
                let (l, a) = evaluate_with(net, v, stats)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            lr: lr_at(config, epoch * spe, spe),
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        if config.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.5}  loss {:.4}  acc {:.4}  val_acc {}  {:.1}s",
                rec.epoch,
                rec.lr,
                rec.train_loss,
                rec.train_acc,
                rec.val_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                rec.seconds
            );
        }
        log.records.push(rec);
    }
    Ok(log)
}

/// Stage one: a fresh model trained from the seeded initialization.
pub fn pretrain<T: Scalar>(
    graph: ModelGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    config.validate()?;
    let mut net = Network::init(graph, &mut derived_rng(config.seed, STREAM_INIT, 0))?;
    let log = fit(&mut net, train, val, config)?;
    Ok((net, log))
}

/// Stage two: surgery on `pretrained`, then training with the basis frozen.
///
/// Returns the network in training form (refocusing layers intact); call
/// [`Network::merged`] for the inference model.
pub fn refocus_train<T: Scalar>(
    pretrained: &Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    options: &SurgeryOptions,
) -> Result<(Network<T>, TrainLog)> {
    config.validate()?;
    let mut net = pretrained.surgery(options, &mut derived_rng(config.seed, STREAM_SURGERY, 0))?;
    let before = basis_bits(&net);
    let log = fit(&mut net, train, val, config)?;
    if !options.basis_trainable && basis_bits(&net) != before {
        return Err(Error::InvalidArgument("a frozen basis changed during refocusing".into()));
    }
    Ok((net, log))
}

fn basis_bits<T: Scalar>(net: &Network<T>) -> Vec<(String, Vec<u64>)> {
    net.params()
        .into_iter()
        .filter(|(i, _)| i.role == "basis")
        .map(|(i, d)| (i.key(), d.iter().map(|v| v.as_f64().to_bits()).collect()))
        .collect()
}

fn ensure_plain<T: Scalar>(net: &Network<T>) -> Result<()> {
    if net.layers().iter().any(|l| matches!(l, Layer::RefConv(_))) {
        return Err(Error::Stage { expected: "baseline".into(), found: "refconv".into() });
    }
    Ok(())
}

/// Comparison arm: a second full training pass from the pre-trained weights.
pub fn retrain_arm<T: Scalar>(
    pretrained: &Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    ensure_plain(pretrained)?;
    let mut net = pretrained.clone();
    let log = fit(&mut net, train, val, config)?;
    Ok((net, log))
}

/// Comparison arm: constant small learning rate from the pre-trained weights.
pub fn finetune_arm<T: Scalar>(
    pretrained: &Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    retrain_arm(pretrained, train, val, &config.finetune())
}
