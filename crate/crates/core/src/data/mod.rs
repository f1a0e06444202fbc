//! NIfTI volumes to labelled, normalized 2-D slices with subject-level folds,
//! plus a seeded synthetic stand-in dataset.

pub mod image;
pub mod manifest;
pub mod mask;
pub mod nifti;
pub mod slice;
pub mod split;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::{upsample_bilinear, Image};
pub use manifest::{read_sidecar, write_sidecar, Manifest, ManifestRecord, Sample};
pub use mask::{foreground_mask, BBox, Mask};
pub use nifti::{parse_nifti, read_nifti, save_nifti, write_nifti, Endian, NiftiHeader, NiftiVolume, RawVoxels};
pub use slice::{kept_range, slice_volume, SliceOptions, SliceRecord};
pub use split::{kfold_split, FoldAssignment, Role, RoundSplit};
pub use synth::{synth_generate, synth_volume, SynthSpec, SynthTask};

/// Diagnostic class; the discriminant is the class id used by models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MCI")]
    Mci,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Ad, Label::Cn, Label::Mci];
    pub const NAMES: [&'static str; 3] = ["AD", "CN", "MCI"];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Label::ALL.get(id).copied().ok_or(Error::InvalidClass { class: id, classes: 3 })
    }

    pub fn name(self) -> &'static str {
        Label::NAMES[self.id()]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidData(format!("unknown label {s:?}, expected AD, CN or MCI")))
    }
}
