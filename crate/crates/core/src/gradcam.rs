//! Grad-CAM heatmaps over the output of the last residual block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::upsample_bilinear;
use crate::data::synth::quadrant_bounds;
use crate::error::{Error, Result};
use crate::model::ResNet;
use crate::nn::Mode;
use crate::tensor::{Element, Tape, Tensor};

pub const HOOK_LAYER: &str = "stage4.output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    pub target_class: usize,
    pub layer: String,
    /// Logits of the explained input.
    pub logits: Vec<f64>,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Share of the total mass in quadrant `q` (0 top-left, 1 top-right,
    /// 2 bottom-left, 3 bottom-right); 0 for an all-zero map.
    pub fn quadrant_fraction(&self, q: usize) -> f64 {
        let total = self.total_mass();
        if total == 0.0 {
            return 0.0;
        }
        let (rows, cols) = quadrant_bounds(q, self.height, self.width);
        let mass: f64 = rows
            .flat_map(|r| cols.clone().map(move |c| (r, c)))
            .map(|(r, c)| self.values[r * self.width + c] as f64)
            .sum();
        mass / total
    }

    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            target_class: self.target_class,
            layer: self.layer.clone(),
            logits: self.logits.clone(),
            quadrant_mass: [0, 1, 2, 3].map(|q| self.quadrant_fraction(q)),
            zero_map: self.is_zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub target_class: usize,
    pub layer: String,
    pub logits: Vec<f64>,
    pub quadrant_mass: [f64; 4],
    pub zero_map: bool,
}

/// `ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of channel `k`'s gradient.
/// `features` and `grads` are `[1, K, h, w]`; returns the `h × w` map.
pub fn weighted_map(features: &[f64], grads: &[f64], channels: usize, hw: usize) -> Vec<f64> {
    let mut map = vec![0.0; hw];
    for k in 0..channels {
        let g = &grads[k * hw..(k + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        let a = &features[k * hw..(k + 1) * hw];
        map.iter_mut().zip(a).for_each(|(m, &v)| *m += alpha * v);
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    map
}

/// Explain `target_class` for a single input `[1, c, h, w]`. The backward
/// pass starts from the target's pre-softmax logit. The model runs in eval
/// mode and its parameters are left untouched.
pub fn grad_cam<T: Element>(model: &mut ResNet<T>, input: &Tensor<T>, target_class: usize) -> Result<Heatmap> {
    let classes = model.spec().num_classes;
    if target_class >= classes {
        return Err(Error::InvalidClass { class: target_class, classes });
    }
    let &[1, _, h, w] = input.shape() else {
        return Err(Error::shape(format!("Grad-CAM takes one [1,c,h,w] input, got {:?}", input.shape())));
    };
    let tape = Tape::new();
    // Tracking the input makes the tape record the path to the features.
    let x = tape.var(&Tensor::param(input.shape(), input.to_vec())?);
    let out = model.forward(&tape, x, Mode::Eval)?;
    out.features.retain_grad()?;
    let logits = out.logits.value()?;
    out.logits.pick(&[target_class])?.sum()?.backward()?;

    let features = out.features.value()?;
    let &[_, channels, fh, fw] = features.shape() else { unreachable!("feature maps are rank 4") };
    let grads = out.features.grad()?.map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); features.numel()]);
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let map = weighted_map(&to64(features.data()), &to64(&grads), channels, fh * fw);
    let small: Vec<f32> = map.iter().map(|&v| v as f32).collect();
    let mut values = upsample_bilinear(&small, fh, fw, h, w)?;
    let max = values.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        log::warn!("Grad-CAM map for class {target_class} is all zero");
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values,
        target_class,
        layer: HOOK_LAYER.to_string(),
        logits: to64(logits.data()),
    })
}

/// Binary greyscale PGM (P5, maxval 255), pixel = round(255 · v).
pub fn encode_pgm(values: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::shape(format!("{height}x{width} map has {} values", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("heatmap value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (255.0 * v).round() as u8));
    Ok(out)
}

pub fn write_pgm(map: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pgm(&map.values, map.height, map.width)?)?;
    Ok(())
}

/// Parse a P5 file written by [`encode_pgm`]; returns `(height, width, values)`
/// with values `byte / 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::TruncatedFile("PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::BadMagic(format!("{:?} is not P5", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::InvalidData(format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::InvalidData(format!("PGM maxval {maxval}, expected 255")));
    }
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| Error::TruncatedFile("PGM pixels".into()))?;
    Ok((h, w, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    decode_pgm(&std::fs::read(path)?)
}
