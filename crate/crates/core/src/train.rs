//! Mini-batch training and evaluation of a [`ResNet`] on in-memory samples.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{class_weights, cross_entropy, weighted_cross_entropy, ClassWeights};
use crate::metrics::{confusion, report, MetricsReport};
use crate::model::ResNet;
use crate::nn::Mode;
use crate::optim::Optimizer;
use crate::tensor::{Element, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Plain,
    Weighted,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Plain => "plain",
            LossKind::Weighted => "weighted",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LossKind::Plain),
            "weighted" => Ok(LossKind::Weighted),
            _ => Err(Error::InvalidSpec(format!("unknown loss {s:?}, expected plain or weighted"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Stop once the training-mode accuracy of an epoch reaches 1.
    pub stop_at_perfect_train: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, loss: LossKind) -> Self {
        TrainConfig { epochs, batch_size, seed, loss, max_steps: None, stop_at_perfect_train: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean batch loss and accuracy over the epoch, in training mode.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,steps,train_loss,train_accuracy,val_loss,val_accuracy";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        format!(
            "{},{},{:.6},{:.6},{},{}",
            self.epoch,
            self.steps,
            self.train_loss,
            self.train_accuracy,
            opt(self.val_loss),
            opt(self.val_accuracy)
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(out, "{}", e.csv_row());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Element> {
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub class_weights: Option<ClassWeights>,
    /// Snapshot at the epoch with the highest validation accuracy (earliest
    /// on ties); absent without validation data.
    pub best: Option<(usize, ResNet<T>)>,
}

impl<T: Element> TrainOutcome<T> {
    /// First epoch (1-based) whose validation accuracy reaches `threshold`.
    pub fn epochs_to_val_accuracy(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|e| e.val_accuracy.is_some_and(|a| a >= threshold)).map(|e| e.epoch)
    }
}

/// Stack images into `[b, channels, h, w]`, repeating the single grey
/// channel `channels` times.
pub fn to_batch<T: Element>(samples: &[&Sample], channels: usize) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::InvalidData("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * channels * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::shape(format!("mixed image sizes {h}x{w} and {}x{}", s.image.height, s.image.width)));
        }
        for _ in 0..channels {
            data.extend(s.image.data.iter().map(|&v| T::from_f64(v as f64)));
        }
    }
    Tensor::new(&[samples.len(), channels, h, w], data)
}

/// Batches of `size`; a trailing batch smaller than half of `size` joins
/// the previous batch, since batch statistics over a handful of samples
/// wreck the running estimates and the step.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2 || 2 * r.len() < size) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode predictions and plain cross-entropy over `samples`.
pub fn evaluate<T: Element>(model: &mut ResNet<T>, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidData("nothing to evaluate".into()));
    }
    let classes = model.spec().num_classes;
    let channels = model.spec().in_channels;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for range in (0..samples.len()).step_by(batch_size.max(1)).map(|s| s..(s + batch_size.max(1)).min(samples.len())) {
        let batch: Vec<&Sample> = samples[range].iter().collect();
        let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let tape = Tape::new();
        let x = tape.constant(&to_batch::<T>(&batch, channels)?);
        let logits = model.forward(&tape, x, Mode::Eval)?.logits;
        let probs = logits.softmax()?;
        loss_sum += cross_entropy(probs, &targets)?.value()?.data()[0].as_f64() * batch.len() as f64;
        let values = logits.value()?;
        predictions.extend(values.data().chunks(classes).map(argmax));
    }
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = report(&confusion(&predictions, &targets, classes)?)?;
    Ok(Evaluation { report, loss: loss_sum / samples.len() as f64, predictions })
}

/// Train in place. Weighted loss derives class weights from `train` only.
/// `on_epoch` sees each finished epoch's log line.
pub fn train<T: Element>(
    model: &mut ResNet<T>,
    opt: &mut Optimizer<T>,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train.len() < 2 {
        return Err(Error::InsufficientBatch(train.len()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidSpec("batch size must be positive".into()));
    }
    let classes = model.spec().num_classes;
    let channels = model.spec().in_channels;
    let weights = match cfg.loss {
        LossKind::Plain => None,
        LossKind::Weighted => {
            let mut counts = vec![0; classes];
            for s in train {
                *counts.get_mut(s.label).ok_or(Error::InvalidTarget { target: s.label, classes })? += 1;
            }
            let w = class_weights(&counts)?;
            log::info!("class weights from train counts {counts:?}: {:?}", w.weights);
            Some(w)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ResNet<T>)> = None;
    let mut steps = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for range in batch_ranges(order.len(), cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&Sample> = order[range].iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let tape = Tape::new();
            let x = tape.constant(&to_batch::<T>(&batch, channels)?);
            let logits = model.forward(&tape, x, Mode::Train)?.logits;
            let probs = logits.softmax()?;
            let loss = match &weights {
                Some(w) => weighted_cross_entropy(probs, &targets, w)?,
                None => cross_entropy(probs, &targets)?,
            };
            let value = loss.value()?.data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::DegenerateOutput(format!("loss became {value} at step {}", steps + 1)));
            }
            model.zero_grad();
            loss.backward()?;
            opt.step(model.parameters_mut())?;
            steps += 1;
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            let lv = logits.value()?;
            correct += lv.data().chunks(classes).map(argmax).zip(&targets).filter(|(p, t)| p == *t).count();
        }
        if seen == 0 {
            break;
        }
        let (val_loss, val_accuracy) = match val {
            Some(v) if !v.is_empty() => {
                let e = evaluate(model, v, cfg.batch_size)?;
                (Some(e.loss), Some(e.report.accuracy))
            }
            _ => (None, None),
        };
        let entry = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        };
        log::debug!("{}", entry.csv_row());
        on_epoch(&entry);
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.snapshot()));
            }
        }
        let perfect = entry.train_accuracy >= 1.0;
        log.push(entry);
        if (cfg.stop_at_perfect_train && perfect) || cfg.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { log, steps, class_weights: weights, best: best.map(|(e, _, m)| (e, m)) })
}
