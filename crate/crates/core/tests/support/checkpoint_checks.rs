//! Checkpoint round trips and the three transfer fixture pairs, with
//! expectations derived by comparing names and shapes directly.

use std::collections::BTreeMap;

use neurograd::data::{synth_generate, SynthSpec};
use neurograd::experiment::Dataset;
use neurograd::model::transfer_load;
use neurograd::train::{train, LossKind, TrainConfig};
use neurograd::{Checkpoint, Error, Optimizer, Preset, ResNet, ResNetSpec, TransferPolicy};

pub type Check = std::result::Result<(), String>;

pub fn model(width: f64, classes: usize, seed: u64) -> ResNet<f32> {
    ResNet::build(&ResNetSpec { width_multiplier: width, num_classes: classes, ..ResNetSpec::default() }, seed).unwrap()
}

fn shapes(m: &ResNet<f32>) -> BTreeMap<String, Vec<usize>> {
    m.named_tensors().into_iter().map(|(n, t, _)| (n, t.shape().to_vec())).collect()
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// One epoch of training so the optimizer carries state.
pub fn trained(preset: Preset) -> (ResNet<f32>, Optimizer<f32>) {
    let slices = synth_generate(&SynthSpec { subjects: [4, 4, 4], ..SynthSpec::default() }).unwrap();
    let data = Dataset::from_slices(&slices, 2, 0).unwrap();
    let mut m = model(0.125, 3, 5);
    let mut opt = Optimizer::from_preset(preset);
    train(&mut m, &mut opt, data.all(), None, &TrainConfig::new(1, 6, 0, LossKind::Plain), |_| {}).unwrap();
    (m, opt)
}

/// Save, load, rebuild: model tensors and optimizer state must match bit for bit.
pub fn round_trip(preset: Preset, dir: &std::path::Path) -> Check {
    let (m, opt) = trained(preset);
    ensure(opt.step_count > 0, || "optimizer never stepped".into())?;
    let ckpt = Checkpoint::from_model(&m, Some(&opt));
    let path = dir.join(format!("{}.ckpt", preset.name()));
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(back == ckpt, || "decoded checkpoint differs".into())?;
    ensure(back.encode() == std::fs::read(&path).unwrap(), || "re-encoding changes bytes".into())?;

    let restored: ResNet<f32> = back.to_model().map_err(|e| e.to_string())?;
    for ((n, a, _), (_, b, _)) in m.named_tensors().into_iter().zip(restored.named_tensors()) {
        ensure(a.bit_eq(b), || format!("{n} differs after reload"))?;
    }
    let o: Optimizer<f32> =
        back.optimizer.as_ref().ok_or("no optimizer section")?.to_optimizer().map_err(|e| e.to_string())?;
    ensure(o.kind == opt.kind && o.step_count == opt.step_count && o.hyper == opt.hyper, || {
        "optimizer header differs".into()
    })?;
    ensure(o.slots.len() == opt.slots.len(), || "optimizer slot count differs".into())?;
    for (name, slot) in &opt.slots {
        let other = o.slots.get(name).ok_or_else(|| format!("slot {name} missing"))?;
        ensure(other.shape == slot.shape, || format!("slot {name} shape"))?;
        for (x, y) in slot.buffers.iter().zip(&other.buffers) {
            ensure(x.len() == y.len() && x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("slot {name} values")
            })?;
        }
    }
    Ok(())
}

/// Identical specs under `strict`: everything loads.
pub fn strict_identity_pair() -> Check {
    let src = model(0.25, 3, 1);
    let mut dst = model(0.25, 3, 2);
    let r = transfer_load(&mut dst, &Checkpoint::from_model(&src, None), TransferPolicy::Strict, 0)
        .map_err(|e| e.to_string())?;
    let all: Vec<String> = shapes(&dst).into_keys().collect();
    ensure(sorted(r.loaded) == all, || "loaded set differs".into())?;
    ensure(r.skipped.is_empty() && r.reinitialized.is_empty(), || "unexpected skipped or reinitialized".into())?;
    for ((n, a, _), (_, b, _)) in src.named_tensors().into_iter().zip(dst.named_tensors()) {
        ensure(a.bit_eq(b), || format!("{n} not copied"))?;
    }
    Ok(())
}

/// 1000-class checkpoint into a 3-class model under `backbone_only`.
pub fn backbone_only_pair() -> Check {
    let src = model(0.25, 1000, 1);
    let ckpt = Checkpoint::from_model(&src, None);
    let mut dst = model(0.25, 3, 2);
    let r = transfer_load(&mut dst, &ckpt, TransferPolicy::BackboneOnly, 4).map_err(|e| e.to_string())?;
    let heads: Vec<String> = shapes(&dst).into_keys().filter(|n| n.starts_with("head.")).collect();
    ensure(sorted(r.reinitialized) == heads, || "reinitialized set is not the head".into())?;
    ensure(r.skipped.is_empty(), || format!("skipped {:?}", r.skipped))?;
    let src_values: BTreeMap<String, Vec<f32>> =
        src.named_tensors().into_iter().map(|(n, t, _)| (n, t.to_vec())).collect();
    for (n, t, _) in dst.named_tensors() {
        if !n.starts_with("head.") {
            ensure(t.to_vec() == src_values[&n], || format!("{n} not copied"))?;
        }
    }
    let mut again = model(0.25, 3, 2);
    ensure(matches!(transfer_load(&mut again, &ckpt, TransferPolicy::Strict, 0), Err(Error::StrictMismatch(_))), || {
        "strict load of a 1000-class head was accepted".into()
    })
}

/// Width 0.5 into width 1.0 under `shape_matched`.
pub fn shape_matched_pair() -> Check {
    let src = model(0.5, 3, 1);
    let mut dst = model(1.0, 3, 2);
    let src_shapes = shapes(&src);
    let (mut want_loaded, mut want_skipped) = (Vec::new(), Vec::new());
    for (name, shape) in shapes(&dst) {
        if src_shapes.get(&name) == Some(&shape) {
            want_loaded.push(name);
        } else {
            want_skipped.push(name);
        }
    }
    let r = transfer_load(&mut dst, &Checkpoint::from_model(&src, None), TransferPolicy::ShapeMatched, 0)
        .map_err(|e| e.to_string())?;
    ensure(sorted(r.loaded) == want_loaded, || "loaded set differs".into())?;
    ensure(sorted(r.skipped) == want_skipped, || "skipped set differs".into())?;
    ensure(r.reinitialized.is_empty(), || "shape_matched reinitialized something".into())
}

pub type Pair = (&'static str, fn() -> Check);

pub const PAIRS: [Pair; 3] = [
    ("strict identity", strict_identity_pair),
    ("backbone_only 1000→3", backbone_only_pair),
    ("shape_matched 0.5→1.0", shape_matched_pair),
];
