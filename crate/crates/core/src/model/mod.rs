//! ResNet-18/34 built from basic blocks, with configurable activation
//! placement, canonical parameter names, checkpoints and transfer loads.
//!
//! Parameter names follow `stem.{conv|bn}.*`, `stage{S}.block{B}.{conv1|bn1|
//! conv2|bn2|down.conv|down.bn}.*` (S from 1, B from 0) and `head.{weight|bias}`.
//! BN tensors use `weight`/`bias` for gamma/beta plus `running_mean` and
//! `running_var`. These names are what checkpoints and transfer loads match on.
//!
//! Activation sites are counted as: one after the stem BN, and two per block
//! (the internal one and the one after the residual addition). ResNet-18 has
//! 17 sites, ResNet-34 has 33.

pub mod checkpoint;
pub mod transfer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActivationKind, BasicBlock, BatchNorm2dParams, Conv2dParams, Downsample, LinearParams, Mode};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, OptimizerRecord, StoredData, StoredTensor};
pub use transfer::{transfer_load, LoadReport, TransferPolicy};

pub const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const MIN_SPATIAL: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationPolicy {
    /// ReLU at every site.
    #[serde(rename = "relu_all")]
    ReluAll,
    /// Mish at both sites of the final basic block.
    #[serde(rename = "mish_last_block")]
    MishLastBlock,
    /// Mish only at the activation right before global pooling.
    #[serde(rename = "mish_last_pre_fc")]
    MishLastPreFc,
    /// Mish at every site.
    #[serde(rename = "mish_all")]
    MishAll,
}

impl ActivationPolicy {
    pub const ALL: [ActivationPolicy; 4] = [
        ActivationPolicy::ReluAll,
        ActivationPolicy::MishLastBlock,
        ActivationPolicy::MishLastPreFc,
        ActivationPolicy::MishAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationPolicy::ReluAll => "relu_all",
            ActivationPolicy::MishLastBlock => "mish_last_block",
            ActivationPolicy::MishLastPreFc => "mish_last_pre_fc",
            ActivationPolicy::MishAll => "mish_all",
        }
    }
}

impl fmt::Display for ActivationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ActivationPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown activation policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub depth: usize,
    pub width_multiplier: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub activation_policy: ActivationPolicy,
}

impl Default for ResNetSpec {
    fn default() -> Self {
        ResNetSpec {
            depth: 18,
            width_multiplier: 1.0,
            num_classes: 3,
            in_channels: 3,
            activation_policy: ActivationPolicy::ReluAll,
        }
    }
}

impl ResNetSpec {
    pub fn block_counts(&self) -> Result<[usize; 4]> {
        match self.depth {
            18 => Ok([2, 2, 2, 2]),
            34 => Ok([3, 4, 6, 3]),
            d => Err(Error::InvalidSpec(format!("depth {d} is not one of 18, 34"))),
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|w| (self.width_multiplier * w as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.block_counts()?;
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidSpec(format!("width multiplier {} must be > 0", self.width_multiplier)));
        }
        if self.widths().contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "width multiplier {} rounds a stage to 0 channels",
                self.width_multiplier
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::InvalidSpec("need at least 1 input channel".into()));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "depth={}\nwidth={}\nclasses={}\nin_channels={}\nactivation={}\n",
            self.depth, self.width_multiplier, self.num_classes, self.in_channels, self.activation_policy
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = ResNetSpec::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidSpec(format!("bad line {line:?}")))?;
            let bad = |_| Error::InvalidSpec(format!("bad value for {k}: {v:?}"));
            match k {
                "depth" => spec.depth = v.parse().map_err(bad)?,
                "width" => {
                    spec.width_multiplier = v.parse().map_err(|_| Error::InvalidSpec(format!("bad width {v:?}")))?
                }
                "classes" => spec.num_classes = v.parse().map_err(bad)?,
                "in_channels" => spec.in_channels = v.parse().map_err(bad)?,
                "activation" => spec.activation_policy = v.parse()?,
                _ => {}
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Parameter,
    Buffer,
}

/// Forward results: logits plus the final stage's feature maps.
pub struct ForwardOutput<'t, T: Element> {
    pub logits: Var<'t, T>,
    /// Output of the last basic block, after its final activation.
    pub features: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct ResNet<T: Element> {
    spec: ResNetSpec,
    pub stem_conv: Conv2dParams<T>,
    pub stem_bn: BatchNorm2dParams<T>,
    pub stem_act: ActivationKind,
    pub stages: Vec<Vec<BasicBlock<T>>>,
    pub head: LinearParams<T>,
}

fn kaiming<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<T>> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>()).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::param(shape, data)
}

fn conv<T: Element>(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Conv2dParams<T>> {
    Conv2dParams::new(kaiming(rng, &[out_ch, in_ch, k, k])?, None, stride, pad)
}

fn init_head<T: Element>(rng: &mut ChaCha8Rng, in_f: usize, classes: usize) -> Result<LinearParams<T>> {
    let weight = kaiming(rng, &[classes, in_f])?;
    let bound = 1.0 / (in_f as f64).sqrt();
    let bias = (0..classes).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Ok(LinearParams { weight, bias: Tensor::param(&[classes], bias)? })
}

/// Stream used to re-initialize the head independently of the backbone.
fn head_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144_5f52_4e47)
}

fn push_bn<'a, T: Element>(
    out: &mut Vec<(String, &'a Tensor<T>, TensorRole)>,
    prefix: &str,
    bn: &'a BatchNorm2dParams<T>,
) {
    out.push((format!("{prefix}.weight"), &bn.gamma, TensorRole::Parameter));
    out.push((format!("{prefix}.bias"), &bn.beta, TensorRole::Parameter));
    out.push((format!("{prefix}.running_mean"), &bn.running_mean, TensorRole::Buffer));
    out.push((format!("{prefix}.running_var"), &bn.running_var, TensorRole::Buffer));
}

fn push_bn_mut<'a, T: Element>(
    out: &mut Vec<(String, &'a mut Tensor<T>, TensorRole)>,
    prefix: &str,
    bn: &'a mut BatchNorm2dParams<T>,
) {
    out.push((format!("{prefix}.weight"), &mut bn.gamma, TensorRole::Parameter));
    out.push((format!("{prefix}.bias"), &mut bn.beta, TensorRole::Parameter));
    out.push((format!("{prefix}.running_mean"), &mut bn.running_mean, TensorRole::Buffer));
    out.push((format!("{prefix}.running_var"), &mut bn.running_var, TensorRole::Buffer));
}

impl<T: Element> ResNet<T> {
    /// Kaiming-uniform convolutions and head, BN at (1, 0), deterministic in
    /// `seed`. The activation policy never influences parameter values.
    pub fn build(spec: &ResNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let blocks = spec.block_counts()?;
        let widths = spec.widths();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = conv(&mut rng, spec.in_channels, widths[0], 7, 2, 3)?;
        let stem_bn = BatchNorm2dParams::new(widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = widths[0];
        for (s, (&n, &out_ch)) in blocks.iter().zip(&widths).enumerate() {
            let mut stage = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let conv1 = conv(&mut rng, in_ch, out_ch, 3, stride, 1)?;
                let conv2 = conv(&mut rng, out_ch, out_ch, 3, 1, 1)?;
                let downsample = if stride != 1 || in_ch != out_ch {
                    Some(Downsample {
                        conv: conv(&mut rng, in_ch, out_ch, 1, stride, 0)?,
                        bn: BatchNorm2dParams::new(out_ch)?,
                    })
                } else {
                    None
                };
                stage.push(BasicBlock {
                    conv1,
                    bn1: BatchNorm2dParams::new(out_ch)?,
                    conv2,
                    bn2: BatchNorm2dParams::new(out_ch)?,
                    downsample,
                    act1: ActivationKind::Relu,
                    act2: ActivationKind::Relu,
                });
                in_ch = out_ch;
            }
            stages.push(stage);
        }
        let head = init_head(&mut rng, widths[3], spec.num_classes)?;
        let mut model = ResNet { spec: spec.clone(), stem_conv, stem_bn, stem_act: ActivationKind::Relu, stages, head };
        model.set_activation_policy(spec.activation_policy);
        Ok(model)
    }

    pub fn spec(&self) -> &ResNetSpec {
        &self.spec
    }

    pub fn set_activation_policy(&mut self, policy: ActivationPolicy) {
        use ActivationKind::{Mish, Relu};
        self.spec.activation_policy = policy;
        let all = if policy == ActivationPolicy::MishAll { Mish } else { Relu };
        self.stem_act = all;
        for block in self.stages.iter_mut().flatten() {
            block.act1 = all;
            block.act2 = all;
        }
        let last = self.stages.last_mut().and_then(|s| s.last_mut()).expect("four non-empty stages");
        match policy {
            ActivationPolicy::MishLastBlock => {
                last.act1 = Mish;
                last.act2 = Mish;
            }
            ActivationPolicy::MishLastPreFc => last.act2 = Mish,
            ActivationPolicy::ReluAll | ActivationPolicy::MishAll => {}
        }
    }

    /// Every activation site in forward order with its kind.
    pub fn activation_sites(&self) -> Vec<(String, ActivationKind)> {
        let mut sites = vec![("stem.act".to_string(), self.stem_act)];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                sites.push((format!("stage{}.block{b}.act1", s + 1), block.act1));
                sites.push((format!("stage{}.block{b}.act2", s + 1), block.act2));
            }
        }
        sites
    }

    /// All named tensors (parameters and BN running statistics) in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>, TensorRole)> {
        let mut out = vec![("stem.conv.weight".to_string(), &self.stem_conv.weight, TensorRole::Parameter)];
        push_bn(&mut out, "stem.bn", &self.stem_bn);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                let p = format!("stage{}.block{b}", s + 1);
                out.push((format!("{p}.conv1.weight"), &block.conv1.weight, TensorRole::Parameter));
                push_bn(&mut out, &format!("{p}.bn1"), &block.bn1);
                out.push((format!("{p}.conv2.weight"), &block.conv2.weight, TensorRole::Parameter));
                push_bn(&mut out, &format!("{p}.bn2"), &block.bn2);
                if let Some(d) = &block.downsample {
                    out.push((format!("{p}.down.conv.weight"), &d.conv.weight, TensorRole::Parameter));
                    push_bn(&mut out, &format!("{p}.down.bn"), &d.bn);
                }
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight, TensorRole::Parameter));
        out.push(("head.bias".to_string(), &self.head.bias, TensorRole::Parameter));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>, TensorRole)> {
        let mut out = vec![("stem.conv.weight".to_string(), &mut self.stem_conv.weight, TensorRole::Parameter)];
        push_bn_mut(&mut out, "stem.bn", &mut self.stem_bn);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                let p = format!("stage{}.block{b}", s + 1);
                out.push((format!("{p}.conv1.weight"), &mut block.conv1.weight, TensorRole::Parameter));
                push_bn_mut(&mut out, &format!("{p}.bn1"), &mut block.bn1);
                out.push((format!("{p}.conv2.weight"), &mut block.conv2.weight, TensorRole::Parameter));
                push_bn_mut(&mut out, &format!("{p}.bn2"), &mut block.bn2);
                if let Some(d) = &mut block.downsample {
                    out.push((format!("{p}.down.conv.weight"), &mut d.conv.weight, TensorRole::Parameter));
                    push_bn_mut(&mut out, &format!("{p}.down.bn"), &mut d.bn);
                }
            }
        }
        out.push(("head.weight".to_string(), &mut self.head.weight, TensorRole::Parameter));
        out.push(("head.bias".to_string(), &mut self.head.bias, TensorRole::Parameter));
        out
    }

    /// Trainable tensors only, for an optimizer step.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(_, _, role)| *role == TensorRole::Parameter)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().filter(|(_, _, r)| *r == TensorRole::Parameter).map(|(_, t, _)| t.numel()).sum()
    }

    /// Independent copy: `clone` shares gradient cells with `self`, this
    /// does not.
    pub fn snapshot(&self) -> Self {
        let mut copy = self.clone();
        for (_, t, _) in copy.named_tensors_mut() {
            *t = t.deep_clone();
        }
        copy
    }

    pub fn zero_grad(&self) {
        for (_, t, _) in self.named_tensors() {
            t.zero_grad();
        }
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Fresh head weights, drawn from a stream derived from `seed`.
    pub fn reinit_head(&mut self, seed: u64) -> Result<()> {
        self.head = init_head(&mut head_rng(seed), self.spec.widths()[3], self.spec.num_classes)?;
        Ok(())
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<ForwardOutput<'t, T>> {
        let shape = x.shape()?;
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!("model input must be [b,c,h,w], got {shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {c}", self.spec.in_channels)));
        }
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::shape(format!("input {h}x{w} is below the {MIN_SPATIAL}x{MIN_SPATIAL} minimum")));
        }
        let mut h = self.stem_conv.forward(tape, x, mode)?;
        h = self.stem_bn.forward(tape, h, mode)?;
        h = self.stem_act.apply(h)?;
        h = h.max_pool2d(3, 2, 1)?;
        for block in self.stages.iter_mut().flatten() {
            h = block.forward(tape, h, mode)?;
        }
        let features = h;
        let pooled = features.global_avg_pool()?;
        let logits = self.head.forward(tape, pooled, mode)?;
        Ok(ForwardOutput { logits, features })
    }

    /// Eval-mode logits for a batch, without keeping the tape.
    pub fn predict_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(x), Mode::Eval)?;
        out.logits.value()
    }
}
