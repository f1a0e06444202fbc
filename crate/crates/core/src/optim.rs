//! SGD with momentum, RMSprop and Adam.
//!
//! State is kept per parameter name so it can be checkpointed and restored
//! against a model's canonical parameter names.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn tag(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::RmsProp => 1,
            OptimizerKind::Adam => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [OptimizerKind::Sgd, OptimizerKind::RmsProp, OptimizerKind::Adam].into_iter().find(|k| k.tag() == tag)
    }

    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Sgd => &["momentum_buffer"],
            OptimizerKind::RmsProp => &["square_avg"],
            OptimizerKind::Adam => &["exp_avg", "exp_avg_sq"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// Named hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "paper-sgd")]
    PaperSgd,
    #[serde(rename = "paper-rmsprop")]
    PaperRmsprop,
    #[serde(rename = "paper-adam")]
    PaperAdam,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::PaperSgd, Preset::PaperRmsprop, Preset::PaperAdam];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperSgd => "paper-sgd",
            Preset::PaperRmsprop => "paper-rmsprop",
            Preset::PaperAdam => "paper-adam",
        }
    }

    pub fn kind(self) -> OptimizerKind {
        match self {
            Preset::PaperSgd => OptimizerKind::Sgd,
            Preset::PaperRmsprop => OptimizerKind::RmsProp,
            Preset::PaperAdam => OptimizerKind::Adam,
        }
    }

    pub fn hyper(self) -> Hyper {
        let base =
            Hyper { lr: 0.001, momentum: 0.0, alpha: 0.99, eps: 1e-8, beta1: 0.9, beta2: 0.999, weight_decay: 0.0 };
        match self {
            Preset::PaperSgd => Hyper { momentum: 0.9, ..base },
            Preset::PaperRmsprop => Hyper { lr: 0.01, ..base },
            Preset::PaperAdam => base,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown optimizer preset {s:?}")))
    }
}

/// `buf ← momentum·buf + g; w ← w − lr·buf`
pub fn sgd_update<T: Element>(w: &mut [T], g: &[T], buf: &mut [T], h: &Hyper) {
    let (lr, mom, wd) = (T::from_f64(h.lr), T::from_f64(h.momentum), T::from_f64(h.weight_decay));
    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        let g = g + wd * *w;
        *b = mom * *b + g;
        *w -= lr * *b;
    }
}

/// `sq ← α·sq + (1−α)·g²; w ← w − lr·g / (√sq + ε)`
pub fn rmsprop_update<T: Element>(w: &mut [T], g: &[T], sq: &mut [T], h: &Hyper) {
    let (lr, alpha, eps, wd) =
        (T::from_f64(h.lr), T::from_f64(h.alpha), T::from_f64(h.eps), T::from_f64(h.weight_decay));
    for ((w, &g), s) in w.iter_mut().zip(g).zip(sq.iter_mut()) {
        let g = g + wd * *w;
        *s = alpha * *s + (T::one() - alpha) * g * g;
        *w -= lr * g / (s.sqrt() + eps);
    }
}

/// Bias-corrected Adam; `step` is the 1-based step number.
pub fn adam_update<T: Element>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, h: &Hyper) {
    let (lr, b1, b2, eps, wd) = (
        T::from_f64(h.lr),
        T::from_f64(h.beta1),
        T::from_f64(h.beta2),
        T::from_f64(h.eps),
        T::from_f64(h.weight_decay),
    );
    let c1 = T::one() - b1.powi(step as i32);
    let c2 = T::one() - b2.powi(step as i32);
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + wd * *w;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Zero-initialized state buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub shape: Vec<usize>,
    pub buffers: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T: Element> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step_count: u64,
    pub slots: BTreeMap<String, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Result<Self> {
        if hyper.eps <= 0.0 || hyper.lr < 0.0 {
            return Err(Error::InvalidSpec(format!("bad optimizer hyperparameters {hyper:?}")));
        }
        Ok(Optimizer { kind, hyper, step_count: 0, slots: BTreeMap::new() })
    }

    pub fn from_preset(preset: Preset) -> Self {
        Self::new(preset.kind(), preset.hyper()).expect("presets are valid")
    }

    /// Apply one update to every parameter from its accumulated gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        let params: Vec<(String, &mut Tensor<T>)> = params.into_iter().collect();
        let mut grads = Vec::with_capacity(params.len());
        for (name, p) in &params {
            let g = p.grad().ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if let Some(slot) = self.slots.get(name) {
                if slot.shape != p.shape() {
                    return Err(Error::shape(format!(
                        "optimizer slot {name} has shape {:?}, parameter {:?}",
                        slot.shape,
                        p.shape()
                    )));
                }
            }
            grads.push(g);
        }
        self.step_count += 1;
        let n_buffers = self.kind.slot_names().len();
        for ((name, param), grad) in params.into_iter().zip(grads) {
            let slot = self.slots.entry(name).or_insert_with(|| Slot {
                shape: param.shape().to_vec(),
                buffers: vec![vec![T::zero(); param.numel()]; n_buffers],
            });
            let w = param.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd => sgd_update(w, g, &mut slot.buffers[0], &self.hyper),
                OptimizerKind::RmsProp => rmsprop_update(w, g, &mut slot.buffers[0], &self.hyper),
                OptimizerKind::Adam => {
                    let (m, v) = slot.buffers.split_at_mut(1);
                    adam_update(w, g, &mut m[0], &mut v[0], self.step_count, &self.hyper)
                }
            }
        }
        Ok(())
    }
}
