use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel row-major image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyShape(vec![height, width]));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rescale to `[0, 1]`; a constant image becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = self.min_max();
        if hi > lo {
            let span = hi - lo;
            self.data.iter_mut().for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
        } else {
            self.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        let data = upsample_bilinear(&self.data, self.height, self.width, height, width)?;
        Ok(Image { height, width, data })
    }
}

/// Source coordinate for output index `dst` under the half-pixel
/// (align-corners = false) convention: `(dst + 0.5) · in/out − 0.5`,
/// clamped below at 0. Returns the two taps and the weight of the upper one.
fn taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resampling of a row-major `in_h × in_w` map to `out_h × out_w`
/// with align-corners = false sampling.
pub fn upsample_bilinear(src: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::EmptyShape(vec![in_h, in_w, out_h, out_w]));
    }
    if src.len() != in_h * in_w {
        return Err(Error::shape(format!("{in_h}x{in_w} map has {} values", src.len())));
    }
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, in_h, out_h);
        for &(x0, x1, fx) in &cols {
            let at = |r: usize, c: usize| src[r * in_w + c] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_identity() {
        assert_eq!(upsample_bilinear(&[0.3], 1, 1, 4, 5).unwrap(), vec![0.3; 20]);
        let m = [0.1, 0.9, 0.4, 0.7];
        assert_eq!(upsample_bilinear(&m, 2, 2, 2, 2).unwrap(), m.to_vec());
    }

    #[test]
    fn horizontal_ramp() {
        let out = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 4, 4).unwrap();
        // x_src = (x + 0.5)/2 − 0.5 clamped to [0, 1] → 0, 0.25, 0.75, 1
        let ramp = [0.0, 0.25, 0.75, 1.0];
        for row in out.chunks(4) {
            assert_eq!(row, ramp);
        }
    }

    #[test]
    fn normalization_guard() {
        let mut img = Image::new(2, 2, vec![3.0; 4]).unwrap();
        img.normalize_min_max();
        assert_eq!(img.data, vec![0.0; 4]);
        let mut img = Image::new(1, 3, vec![-2.0, 0.0, 6.0]).unwrap();
        img.normalize_min_max();
        assert_eq!(img.data, vec![0.0, 0.25, 1.0]);
    }
}
