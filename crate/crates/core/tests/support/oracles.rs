//! Reference values and independent arithmetic shared by the core tests and
//! the acceptance target.

#![allow(clippy::excessive_precision)]

use neurograd::data::Label;

/// Mish at a few points, rounded from a 50-digit evaluation.
pub const MISH_REFERENCE: [(f64, f64); 4] = [
    (-1.0, -0.303_401_461_374_108_918_07),
    (0.0, 0.0),
    (1.0, 0.865_098_388_267_310_346_12),
    (20.0, 19.999_999_999_999_999_830),
];
pub const MISH_ARGMIN: f64 = -1.192_431_214_515_495_212_1;
pub const MISH_MIN: f64 = -0.308_843_413_017_250_406_63;

pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-9 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (a + b) / 2.0
}

/// Trainable parameter count from layer arithmetic: 7×7 stem, two 3×3
/// convolutions per basic block, a 1×1 projection wherever the shape
/// changes, batch-norm scale and shift, and a biased linear head.
pub fn resnet_parameters(depth: usize, width: f64, classes: usize, in_ch: usize) -> usize {
    let blocks: &[usize] = if depth == 18 { &[2, 2, 2, 2] } else { &[3, 4, 6, 3] };
    let w: Vec<usize> = [64.0, 128.0, 256.0, 512.0].iter().map(|b| (b * width).round() as usize).collect();
    let bn = |c: usize| 2 * c;
    let mut total = in_ch * w[0] * 49 + bn(w[0]);
    let mut prev = w[0];
    for (stage, &n) in blocks.iter().enumerate() {
        let c = w[stage];
        for b in 0..n {
            let cin = if b == 0 { prev } else { c };
            total += cin * c * 9 + bn(c) + c * c * 9 + bn(c);
            if b == 0 && cin != c {
                total += cin * c + bn(c);
            }
        }
        prev = c;
    }
    total + w[3] * classes + classes
}

/// Subjects per class of the imbalanced roster.
pub const ROSTER: [usize; 3] = [58, 115, 133];

pub fn roster(counts: [usize; 3]) -> Vec<(String, Label)> {
    Label::ALL.iter().zip(counts).flat_map(|(&l, n)| (0..n).map(move |i| (format!("{l}_{i:03}"), l))).collect()
}

/// `1 − n_c / N` per class.
pub fn class_weight_oracle(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| 1.0 - c as f64 / n as f64).collect()
}
