//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NGCKPT01"
//! count      u64
//! entries    count × { name_len u32, name utf-8, dtype u8, rank u32,
//!                      extents rank × u64, values numel × dtype size }
//! sections   repeated until EOF: { tag 8 bytes, len u64, payload len bytes }
//! ```
//!
//! Known sections are `NGMETA01` (UTF-8 text, model spec and run info) and
//! `NGOPTIM1` (optimizer state). Others are skipped with a warning.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Hyper, Optimizer, OptimizerKind, Slot};
use crate::tensor::{DType, Element, Tensor};

use super::{ResNet, TensorRole};

pub const MAGIC: &[u8; 8] = b"NGCKPT01";
pub const META_TAG: &[u8; 8] = b"NGMETA01";
pub const OPTIM_TAG: &[u8; 8] = b"NGOPTIM1";

/// Raw little-endian values as they appear on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredData {
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: StoredData,
}

impl StoredTensor {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        StoredTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: StoredData { dtype: T::DTYPE, bytes: le_bytes(t.data()) },
        }
    }

    fn from_values<T: Element>(name: String, shape: Vec<usize>, values: &[T]) -> Self {
        StoredTensor { name, shape, data: StoredData { dtype: T::DTYPE, bytes: le_bytes(values) } }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values converted to `T`; exact when the stored dtype is `T`.
    pub fn values<T: Element>(&self) -> Vec<T> {
        let size = self.data.dtype.size_of();
        let chunks = self.data.bytes.chunks_exact(size);
        match self.data.dtype {
            d if d == T::DTYPE => chunks.map(T::read_le).collect(),
            DType::F32 => chunks.map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => chunks.map(|c| T::from_f64(f64::read_le(c))).collect(),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.values())
    }
}

fn le_bytes<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.size_of());
    values.iter().for_each(|v| v.write_le(&mut out));
    out
}

/// Saved optimizer state; slot buffers are named `{param}#{slot}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerRecord {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step_count: u64,
    pub slots: Vec<StoredTensor>,
}

impl OptimizerRecord {
    pub fn from_optimizer<T: Element>(opt: &Optimizer<T>) -> Self {
        let names = opt.kind.slot_names();
        let slots = opt
            .slots
            .iter()
            .flat_map(|(param, slot)| {
                names
                    .iter()
                    .zip(&slot.buffers)
                    .map(move |(s, buf)| StoredTensor::from_values(format!("{param}#{s}"), slot.shape.clone(), buf))
            })
            .collect();
        OptimizerRecord { kind: opt.kind, hyper: opt.hyper, step_count: opt.step_count, slots }
    }

    pub fn to_optimizer<T: Element>(&self) -> Result<Optimizer<T>> {
        let mut opt = Optimizer::new(self.kind, self.hyper)?;
        opt.step_count = self.step_count;
        let names = self.kind.slot_names();
        for st in &self.slots {
            let (param, slot_name) = st
                .name
                .rsplit_once('#')
                .ok_or_else(|| Error::InvalidData(format!("optimizer entry {:?} has no slot suffix", st.name)))?;
            let index = names
                .iter()
                .position(|n| *n == slot_name)
                .ok_or_else(|| Error::InvalidData(format!("unknown optimizer slot {slot_name:?}")))?;
            let slot = opt.slots.entry(param.to_string()).or_insert_with(|| Slot {
                shape: st.shape.clone(),
                buffers: vec![vec![T::zero(); st.numel()]; names.len()],
            });
            if slot.shape != st.shape {
                return Err(Error::shape(format!("optimizer slots for {param} disagree on shape")));
            }
            slot.buffers[index] = st.values();
        }
        Ok(opt)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
    pub meta: Option<String>,
    pub optimizer: Option<OptimizerRecord>,
    /// Tags of sections that were present but not understood.
    pub skipped_sections: Vec<String>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &ResNet<T>, optimizer: Option<&Optimizer<T>>) -> Self {
        Checkpoint {
            tensors: model.named_tensors().into_iter().map(|(n, t, _)| StoredTensor::from_tensor(&n, t)).collect(),
            meta: Some(model.spec().to_text()),
            optimizer: optimizer.map(OptimizerRecord::from_optimizer),
            skipped_sections: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    /// Model spec recorded in the meta section, if any.
    pub fn spec(&self) -> Result<Option<super::ResNetSpec>> {
        self.meta.as_deref().map(super::ResNetSpec::from_text).transpose()
    }

    /// Rebuild a model from the recorded spec and copy every tensor in.
    pub fn to_model<T: Element>(&self) -> Result<ResNet<T>> {
        let spec = self.spec()?.ok_or_else(|| Error::InvalidData("checkpoint has no model spec".into()))?;
        let mut model = ResNet::build(&spec, 0)?;
        super::transfer_load(&mut model, self, super::TransferPolicy::Strict, 0)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            encode_entry(&mut out, t);
        }
        if let Some(meta) = &self.meta {
            push_section(&mut out, META_TAG, meta.as_bytes());
        }
        if let Some(opt) = &self.optimizer {
            let mut p = vec![opt.kind.tag()];
            let h = &opt.hyper;
            for v in [h.lr, h.momentum, h.alpha, h.eps, h.beta1, h.beta2, h.weight_decay] {
                p.extend_from_slice(&v.to_le_bytes());
            }
            p.extend_from_slice(&opt.step_count.to_le_bytes());
            p.extend_from_slice(&(opt.slots.len() as u64).to_le_bytes());
            for t in &opt.slots {
                encode_entry(&mut p, t);
            }
            push_section(&mut out, OPTIM_TAG, &p);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).map_err(|_| Error::BadMagic("file shorter than the magic".into()))?;
        if magic != MAGIC {
            return Err(Error::BadMagic(format!("expected NGCKPT01, found {:?}", String::from_utf8_lossy(magic))));
        }
        let count = r.u64()?;
        let tensors = decode_entries(&mut r, count)?;
        let mut ckpt = Checkpoint { tensors, ..Checkpoint::default() };
        while r.remaining() > 0 {
            let tag: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
            let len = r.u64()?;
            let payload = r.take(usize::try_from(len).map_err(|_| Error::TruncatedFile("section length".into()))?)?;
            match &tag {
                t if t == META_TAG => {
                    ckpt.meta = Some(
                        String::from_utf8(payload.to_vec())
                            .map_err(|_| Error::InvalidData("meta section is not UTF-8".into()))?,
                    )
                }
                t if t == OPTIM_TAG => ckpt.optimizer = Some(decode_optimizer(payload)?),
                _ => {
                    let name = String::from_utf8_lossy(&tag).into_owned();
                    log::warn!("skipping unknown checkpoint section {name:?} ({len} bytes)");
                    ckpt.skipped_sections.push(name);
                }
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 8], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn encode_entry(out: &mut Vec<u8>, t: &StoredTensor) {
    out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
    out.extend_from_slice(t.name.as_bytes());
    out.push(t.data.dtype.tag());
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &e in &t.shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.data.bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::TruncatedFile(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn decode_entries(r: &mut Reader<'_>, count: u64) -> Result<Vec<StoredTensor>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::InvalidData("tensor name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::InvalidData(format!("tensor {name:?} has unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let size = shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::TruncatedFile(format!("tensor {name:?} extents overflow")))?;
        let bytes = r.take(size).map_err(|e| match e {
            Error::TruncatedFile(m) => Error::TruncatedFile(format!("tensor {name:?}: {m}")),
            other => other,
        })?;
        out.push(StoredTensor { name, shape, data: StoredData { dtype, bytes: bytes.to_vec() } });
    }
    Ok(out)
}

fn decode_optimizer(payload: &[u8]) -> Result<OptimizerRecord> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let tag = r.u8()?;
    let kind =
        OptimizerKind::from_tag(tag).ok_or_else(|| Error::InvalidData(format!("unknown optimizer tag {tag}")))?;
    let mut h = [0.0; 7];
    for v in &mut h {
        *v = r.f64()?;
    }
    let hyper =
        Hyper { lr: h[0], momentum: h[1], alpha: h[2], eps: h[3], beta1: h[4], beta2: h[5], weight_decay: h[6] };
    let step_count = r.u64()?;
    let n = r.u64()?;
    let slots = decode_entries(&mut r, n)?;
    Ok(OptimizerRecord { kind, hyper, step_count, slots })
}

/// Copy stored values into a model tensor of identical shape, keeping its
/// gradient tracking.
pub(crate) fn copy_into<T: Element>(dst: &mut Tensor<T>, src: &StoredTensor) {
    dst.data_mut().copy_from_slice(&src.values::<T>());
}

/// Names of trainable tensors in checkpoint order.
pub fn parameter_names<T: Element>(model: &ResNet<T>) -> Vec<String> {
    model.named_tensors().into_iter().filter(|(_, _, r)| *r == TensorRole::Parameter).map(|(n, _, _)| n).collect()
}
