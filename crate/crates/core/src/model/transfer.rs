//! Partial loads of a checkpoint into a freshly built model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

use super::checkpoint::{copy_into, Checkpoint};
use super::ResNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPolicy {
    /// Every model tensor must be present with the same shape.
    Strict,
    /// Everything except the head; the head is re-initialized.
    BackboneOnly,
    /// Whatever matches by name and shape.
    ShapeMatched,
}

impl TransferPolicy {
    pub fn name(self) -> &'static str {
        match self {
            TransferPolicy::Strict => "strict",
            TransferPolicy::BackboneOnly => "backbone_only",
            TransferPolicy::ShapeMatched => "shape_matched",
        }
    }
}

impl fmt::Display for TransferPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [TransferPolicy::Strict, TransferPolicy::BackboneOnly, TransferPolicy::ShapeMatched]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown transfer policy {s:?}")))
    }
}

/// Which model tensors were copied, freshly initialized, or left alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub reinitialized: Vec<String>,
    /// Model tensors without a usable checkpoint entry; they keep their
    /// build-time values.
    pub skipped: Vec<String>,
}

/// Copy checkpoint tensors into `model` under `policy`. `head_seed` drives
/// the head re-initialization of `BackboneOnly`. Nothing is modified when a
/// strict load fails.
pub fn transfer_load<T: Element>(
    model: &mut ResNet<T>,
    ckpt: &Checkpoint,
    policy: TransferPolicy,
    head_seed: u64,
) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    if policy == TransferPolicy::Strict {
        let problems: Vec<String> = model
            .named_tensors()
            .iter()
            .filter_map(|(name, t, _)| match ckpt.get(name) {
                None => Some(format!("{name}: missing")),
                Some(s) if s.shape != t.shape() => Some(format!("{name}: {:?} vs {:?}", s.shape, t.shape())),
                Some(_) => None,
            })
            .collect();
        if !problems.is_empty() {
            return Err(Error::StrictMismatch(problems.join("; ")));
        }
    }
    if policy == TransferPolicy::BackboneOnly {
        model.reinit_head(head_seed)?;
    }
    for (name, t, _) in model.named_tensors_mut() {
        if policy == TransferPolicy::BackboneOnly && ResNet::<T>::is_head(&name) {
            report.reinitialized.push(name);
            continue;
        }
        match ckpt.get(&name) {
            Some(s) if s.shape == t.shape() => {
                copy_into(t, s);
                report.loaded.push(name);
            }
            _ => report.skipped.push(name),
        }
    }
    log::info!(
        "{policy} load: {} loaded, {} reinitialized, {} skipped",
        report.loaded.len(),
        report.reinitialized.len(),
        report.skipped.len()
    );
    Ok(report)
}
