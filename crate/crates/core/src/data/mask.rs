//! Intensity-threshold foreground masking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::nifti::NiftiVolume;

pub const DEFAULT_THRESHOLD: f32 = 0.1;

/// Inclusive voxel bounds per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn extent(&self, axis: usize) -> usize {
        self.max[axis] - self.min[axis] + 1
    }

    pub fn full(dims: [usize; 3]) -> Self {
        BBox { min: [0; 3], max: dims.map(|d| d - 1) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub voxels: Vec<bool>,
    pub bbox: BBox,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }
}

/// Keep voxels brighter than `threshold_fraction · max`, then only the
/// largest 6-connected component (the first one in scan order on ties).
pub fn foreground_mask(v: &NiftiVolume, threshold_fraction: f32) -> Result<Mask> {
    let max = v.max_intensity();
    if max.is_nan() || max <= 0.0 {
        return Err(Error::AllBackground);
    }
    let cut = threshold_fraction * max;
    let dims = v.dims();
    let [nx, ny, nz] = dims;
    let above: Vec<bool> = v.voxels.iter().map(|&x| x > cut).collect();

    let mut label = vec![0u32; above.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..above.len() {
        if !above[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if above[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }

    let voxels: Vec<bool> = label.iter().map(|&l| l == best.0).collect();
    let mut bbox = BBox { min: [usize::MAX; 3], max: [0; 3] };
    for (i, _) in voxels.iter().enumerate().filter(|(_, &m)| m) {
        let p = [i % nx, (i / nx) % ny, i / (nx * ny)];
        for (a, &pa) in p.iter().enumerate() {
            bbox.min[a] = bbox.min[a].min(pa);
            bbox.max[a] = bbox.max[a].max(pa);
        }
    }
    Ok(Mask { dims, voxels, bbox })
}
