//! Seeded synthetic slices: class `c` puts a textured Gaussian blob in
//! quadrant `c` (0 top-left, 1 top-right, 2 bottom-left).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::Image;
use super::nifti::NiftiVolume;
use super::slice::SliceRecord;
use super::Label;

/// Two tasks that share blob placement but differ in texture, so a model
/// trained on one has useful features for the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    A,
    B,
}

impl SynthTask {
    /// Texture cycles across the image and stripe orientation per class.
    fn texture(self, class: usize) -> (f64, f64) {
        match self {
            SynthTask::A => ([2.0, 3.0, 4.0][class], PI / 2.0),
            SynthTask::B => ([5.0, 7.0, 9.0][class], 0.0),
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(SynthTask::A),
            "b" | "B" => Ok(SynthTask::B),
            _ => Err(Error::InvalidSpec(format!("unknown synthetic task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Subjects per class, indexed by class id.
    pub subjects: [usize; 3],
    pub slices_per_subject: usize,
    pub size: usize,
    /// Standard deviation of additive Gaussian noise (signal peak is ~1).
    pub noise: f64,
    /// Range of per-subject blob amplitudes; low values make subjects hard
    /// to tell apart.
    pub amplitude: (f64, f64),
    pub task: SynthTask,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: [10, 10, 10],
            slices_per_subject: 1,
            size: 32,
            noise: 0.0,
            amplitude: (0.7, 1.0),
            task: SynthTask::B,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.slices_per_subject == 0 || self.subjects.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidSpec(format!("degenerate synthetic spec {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        let (lo, hi) = self.amplitude;
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidSpec(format!("amplitude range {lo}..{hi} is invalid")));
        }
        Ok(())
    }

    /// Per-class subject counts proportional to `ratio`, scaled so the
    /// total is close to `total` and every class keeps at least `min`.
    pub fn proportional(ratio: [usize; 3], total: usize, min: usize) -> [usize; 3] {
        let sum: usize = ratio.iter().sum();
        ratio.map(|r| ((r * total) as f64 / sum as f64).round().max(min as f64) as usize)
    }
}

/// Quadrant centre `(row, col)` for a class.
pub fn quadrant_center(class: usize, size: usize) -> (f64, f64) {
    let q = size as f64 / 4.0;
    let (r, c) = [(1.0, 1.0), (1.0, 3.0), (3.0, 1.0)][class];
    (r * q, c * q)
}

/// Pixel ranges `(rows, cols)` of a class quadrant.
pub fn quadrant_bounds(class: usize, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (h2, w2) = (height / 2, width / 2);
    let rows = if class < 2 { 0..h2 } else { h2..height };
    let cols = if class % 2 == 1 { w2..width } else { 0..w2 };
    (rows, cols)
}

struct SubjectStyle {
    dr: f64,
    dc: f64,
    amplitude: f64,
    phase: f64,
}

fn draw_image(spec: &SynthSpec, class: usize, style: &SubjectStyle, slice: usize, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.size;
    let (cr, cc) = quadrant_center(class, n);
    let (cr, cc) = (cr + style.dr, cc + style.dc);
    let sigma = n as f64 / 9.0;
    let (cycles, angle) = spec.task.texture(class);
    let k = 2.0 * PI * cycles / n as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mid = (spec.slices_per_subject as f64 - 1.0) / 2.0;
    let depth = 1.0 - 0.3 * (slice as f64 - mid).abs() / (mid + 1.0);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let d2 = (y - cr).powi(2) + (x - cc).powi(2);
            let blob = (-d2 / (2.0 * sigma * sigma)).exp();
            let stripe = 0.5 + 0.5 * (k * (x * ca + y * sa) + style.phase).cos();
            let mut v = style.amplitude * depth * blob * (0.3 + 0.7 * stripe);
            if spec.noise > 0.0 {
                v += noise.sample(rng);
            }
            data.push(v as f32);
        }
    }
    let mut img = Image { height: n, width: n, data };
    img.normalize_min_max();
    img
}

/// Slices for every subject, ordered by class then subject then slice.
/// Subject ids are `{label}-{task}-{index}`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SliceRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = spec.size as f64 / 16.0;
    let task = match spec.task {
        SynthTask::A => "a",
        SynthTask::B => "b",
    };
    let mut out = Vec::new();
    for (class, &count) in spec.subjects.iter().enumerate() {
        let label = Label::ALL[class];
        for s in 0..count {
            let style = SubjectStyle {
                dr: rng.random_range(-jitter..=jitter),
                dc: rng.random_range(-jitter..=jitter),
                amplitude: rng.random_range(spec.amplitude.0..=spec.amplitude.1),
                phase: rng.random_range(0.0..2.0 * PI),
            };
            let subject_id = format!("{label}-{task}-{s:04}");
            for slice in 0..spec.slices_per_subject {
                out.push(SliceRecord {
                    subject_id: subject_id.clone(),
                    label,
                    axis: 2,
                    slice_index: slice,
                    pixels: draw_image(spec, class, &style, slice, &mut rng),
                    source_volume: "synthetic".into(),
                });
            }
        }
    }
    Ok(out)
}

/// Head-like float32 volume: a bright ellipsoid with a denser blob in the
/// class quadrant of every axial slice, surrounded by empty space.
pub fn synth_volume(label: Label, size: usize, seed: u64) -> Result<NiftiVolume> {
    if size < 8 {
        return Err(Error::InvalidSpec(format!("volume size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 * 0.4;
    let (qr, qc) = quadrant_center(label.id(), size);
    let sigma = size as f64 / 8.0;
    let mut data = Vec::with_capacity(size.pow(3));
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                let r2 = ((fx - c).powi(2) + (fy - c).powi(2) + (fz - c).powi(2)) / (radius * radius);
                let v = if r2 <= 1.0 {
                    let blob = (-((fy + 0.5 - qr).powi(2) + (fx + 0.5 - qc).powi(2)) / (2.0 * sigma * sigma)).exp();
                    0.4 + 0.6 * blob + rng.random_range(0.0..0.05)
                } else {
                    0.0
                };
                data.push((v * 1000.0) as f32);
            }
        }
    }
    NiftiVolume::from_f32([size; 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec =
            SynthSpec { subjects: [3, 4, 5], slices_per_subject: 2, size: 16, noise: 0.1, ..SynthSpec::default() };
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a.len(), 24);
        for (c, n) in [3, 4, 5].into_iter().enumerate() {
            assert_eq!(a.iter().filter(|r| r.label.id() == c).count(), 2 * n);
        }
        assert_eq!(a, synth_generate(&spec).unwrap());
        assert!(a.iter().all(|r| r.pixels.data.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn signal_lives_in_class_quadrant() {
        for task in [SynthTask::A, SynthTask::B] {
            let spec = SynthSpec { subjects: [2, 2, 2], size: 32, task, ..SynthSpec::default() };
            for r in synth_generate(&spec).unwrap() {
                let img = &r.pixels;
                let mass = |c: usize| {
                    let (rows, cols) = quadrant_bounds(c, 32, 32);
                    rows.flat_map(|y| cols.clone().map(move |x| (y, x))).map(|(y, x)| img.get(y, x) as f64).sum::<f64>()
                };
                let own = mass(r.label.id());
                assert!((0..4).filter(|&q| q != r.label.id()).all(|q| mass(q) < own));
            }
        }
    }

    #[test]
    fn proportional_counts() {
        assert_eq!(SynthSpec::proportional([58, 115, 133], 306, 5), [58, 115, 133]);
        assert_eq!(SynthSpec::proportional([58, 115, 133], 30, 5), [6, 11, 13]);
    }
}
