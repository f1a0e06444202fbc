//! Cutting a volume into normalized 2-D slices.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::Image;
use super::mask::BBox;
use super::nifti::NiftiVolume;
use super::Label;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.6;
pub const DEFAULT_AXIS: usize = 2;
pub const DEFAULT_TARGET_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub subject_id: String,
    pub label: Label,
    pub axis: usize,
    pub slice_index: usize,
    pub pixels: Image,
    pub source_volume: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceOptions {
    pub axis: usize,
    pub keep_fraction: f64,
    /// Output `(height, width)`; `None` keeps the cropped size.
    pub target: Option<(usize, usize)>,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions {
            axis: DEFAULT_AXIS,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            target: Some((DEFAULT_TARGET_SIZE, DEFAULT_TARGET_SIZE)),
        }
    }
}

/// Slice indices kept along an axis whose box spans `depth` slices starting
/// at `first`: `floor(depth · (1 − keep) / 2)` are dropped from each end.
pub fn kept_range(first: usize, depth: usize, keep_fraction: f64) -> std::ops::Range<usize> {
    let drop = ((depth as f64 * (1.0 - keep_fraction)) / 2.0).floor() as usize;
    first + drop..first + depth - drop
}

/// In-plane axes `(rows, cols)` of a slice taken along `axis`.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (2, 1),
        1 => (2, 0),
        _ => (1, 0),
    }
}

/// One slice of the box, rows/cols cropped to the box. Along z the image
/// rows are y and columns x; along y rows are z, columns x; along x rows
/// are z, columns y.
pub fn extract_slice(v: &NiftiVolume, bbox: &BBox, axis: usize, index: usize) -> Image {
    let (ra, ca) = plane_axes(axis);
    let (h, w) = (bbox.extent(ra), bbox.extent(ca));
    let mut data = Vec::with_capacity(h * w);
    let mut p = [0usize; 3];
    p[axis] = index;
    for r in 0..h {
        p[ra] = bbox.min[ra] + r;
        for c in 0..w {
            p[ca] = bbox.min[ca] + c;
            data.push(v.voxels[v.index(p[0], p[1], p[2])]);
        }
    }
    Image { height: h, width: w, data }
}

/// Central band of slices inside `bbox` along the chosen axis, each resized
/// (bilinear) and min-max normalized to `[0, 1]`.
pub fn slice_volume(
    v: &NiftiVolume,
    bbox: &BBox,
    opts: &SliceOptions,
    subject_id: &str,
    label: Label,
    source: impl Into<PathBuf>,
) -> Result<Vec<SliceRecord>> {
    if opts.axis > 2 {
        return Err(Error::AxisOutOfRange { axis: opts.axis, rank: 3 });
    }
    if !(opts.keep_fraction > 0.0 && opts.keep_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!("keep fraction {} outside (0, 1]", opts.keep_fraction)));
    }
    let dims = v.dims();
    if (0..3).any(|a| bbox.min[a] > bbox.max[a] || bbox.max[a] >= dims[a]) {
        return Err(Error::DegenerateBBox(format!("{bbox:?} in volume {dims:?}")));
    }
    let range = kept_range(bbox.min[opts.axis], bbox.extent(opts.axis), opts.keep_fraction);
    if range.is_empty() {
        return Err(Error::DegenerateBBox(format!(
            "no slices kept from {bbox:?} at keep fraction {}",
            opts.keep_fraction
        )));
    }
    let source = source.into();
    range
        .map(|index| {
            let mut img = extract_slice(v, bbox, opts.axis, index);
            if let Some((h, w)) = opts.target {
                img = img.resize_bilinear(h, w)?;
            }
            img.normalize_min_max();
            Ok(SliceRecord {
                subject_id: subject_id.to_string(),
                label,
                axis: opts.axis,
                slice_index: index,
                pixels: img,
                source_volume: source.clone(),
            })
        })
        .collect()
}
