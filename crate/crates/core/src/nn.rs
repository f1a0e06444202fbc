//! Layers and activations over the tape.
//!
//! Layer structs own their parameter tensors. `forward` registers them on the
//! tape each call: as tracked leaves in [`Mode::Train`], as constants in
//! [`Mode::Eval`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

fn register<'t, T: Element>(tape: &'t Tape<T>, t: &Tensor<T>, mode: Mode) -> Var<'t, T> {
    match mode {
        Mode::Train => tape.var(t),
        Mode::Eval => tape.constant(t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Mish,
    Tanh,
    Softplus,
}

impl ActivationKind {
    pub fn apply<'t, T: Element>(self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            ActivationKind::Relu => x.relu(),
            ActivationKind::Mish => x.mish(),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Softplus => x.softplus(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Mish => "mish",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softplus => "softplus",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "mish" => Ok(ActivationKind::Mish),
            "tanh" => Ok(ActivationKind::Tanh),
            "softplus" => Ok(ActivationKind::Softplus),
            other => Err(Error::InvalidSpec(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn relu<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.relu()
}

pub fn softplus<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.softplus()
}

pub fn mish<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.mish()
}

pub fn softmax<'t, T: Element>(logits: Var<'t, T>) -> Result<Var<'t, T>> {
    logits.softmax()
}

/// Scalar Mish, `x · tanh(ln(1 + eˣ))`, with the overflow-safe softplus.
pub fn mish_f64(x: f64) -> f64 {
    crate::tensor::mish_scalar(x)
}

pub fn max_pool2d<'t, T: Element>(x: Var<'t, T>, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    x.max_pool2d(kernel, stride, pad)
}

pub fn global_avg_pool<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.global_avg_pool()
}

#[derive(Debug, Clone)]
pub struct Conv2dParams<T: Element> {
    /// `[out, in, kh, kw]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        let &[out, _, kh, kw] = weight.shape() else {
            return Err(Error::shape(format!("conv weight must be rank 4, got {:?}", weight.shape())));
        };
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::DegenerateOutput("zero stride or kernel".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::shape(format!("conv bias {:?}, expected [{out}]", b.shape())));
            }
        }
        Ok(Conv2dParams { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let w = register(tape, &self.weight, mode);
        let b = self.bias.as_ref().map(|b| register(tape, b, mode));
        x.conv2d(&w, b.as_ref(), self.stride, self.padding)
    }
}

pub fn conv2d<'t, T: Element>(tape: &'t Tape<T>, x: Var<'t, T>, p: &Conv2dParams<T>, mode: Mode) -> Result<Var<'t, T>> {
    p.forward(tape, x, mode)
}

#[derive(Debug, Clone)]
pub struct BatchNorm2dParams<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm2dParams<T> {
    /// gamma = 1, beta = 0, running stats (0, 1).
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2dParams {
            gamma: Tensor::param(&[channels], vec![T::one(); channels])?,
            beta: Tensor::param(&[channels], vec![T::zero(); channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates unchanged.
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let gamma = register(tape, &self.gamma, mode);
        let beta = register(tape, &self.beta, mode);
        match mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&gamma, &beta, self.eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                let rm = self.running_mean.data_mut();
                rm.iter_mut().zip(&stats.mean).for_each(|(r, &b)| *r = keep * *r + m * b);
                let rv = self.running_var.data_mut();
                rv.iter_mut().zip(&stats.var_unbiased).for_each(|(r, &b)| *r = keep * *r + m * b);
                Ok(y)
            }
            Mode::Eval => x.batch_norm_eval(&gamma, &beta, self.running_mean.data(), self.running_var.data(), self.eps),
        }
    }
}

pub fn batchnorm2d<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    p: &mut BatchNorm2dParams<T>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    p.forward(tape, x, mode)
}

#[derive(Debug, Clone)]
pub struct LinearParams<T: Element> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let w = register(tape, &self.weight, mode);
        let b = register(tape, &self.bias, mode);
        x.linear(&w, Some(&b))
    }
}

pub fn linear<'t, T: Element>(x: Var<'t, T>, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    x.linear(&weight, Some(&bias))
}

/// Projection shortcut: 1×1 conv (usually stride 2) followed by batch norm.
#[derive(Debug, Clone)]
pub struct Downsample<T: Element> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNorm2dParams<T>,
}

/// Two 3×3 conv/BN pairs with a residual shortcut.
///
/// `act1` sits between the pairs, `act2` after the residual addition.
#[derive(Debug, Clone)]
pub struct BasicBlock<T: Element> {
    pub conv1: Conv2dParams<T>,
    pub bn1: BatchNorm2dParams<T>,
    pub conv2: Conv2dParams<T>,
    pub bn2: BatchNorm2dParams<T>,
    pub downsample: Option<Downsample<T>>,
    pub act1: ActivationKind,
    pub act2: ActivationKind,
}

impl<T: Element> BasicBlock<T> {
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(tape, x, mode)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = self.act1.apply(h)?;
        let h = self.conv2.forward(tape, h, mode)?;
        let h = self.bn2.forward(tape, h, mode)?;
        let shortcut = match &mut self.downsample {
            Some(d) => {
                let s = d.conv.forward(tape, x, mode)?;
                d.bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let (hs, ss) = (h.shape()?, shortcut.shape()?);
        if hs != ss {
            return Err(Error::shape(format!(
                "residual branch {hs:?} vs shortcut {ss:?}; a projection shortcut is needed"
            )));
        }
        self.act2.apply(h.add(&shortcut)?)
    }

    /// Activation sites in this block, internal first.
    pub fn activations(&self) -> [ActivationKind; 2] {
        [self.act1, self.act2]
    }
}

pub fn basic_block<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    block: &mut BasicBlock<T>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    block.forward(tape, x, mode)
}
