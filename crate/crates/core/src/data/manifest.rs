//! JSON-lines slice manifest and the binary pixel sidecars it points to.
//!
//! Sidecar layout: magic `NGSLC01\0`, height u32 LE, width u32 LE, then
//! `height · width` f32 LE values, row-major.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::image::Image;
use super::slice::SliceRecord;
use super::split::{kfold_split, FoldAssignment, Role};
use super::Label;

pub const SIDECAR_MAGIC: &[u8; 8] = b"NGSLC01\0";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SLICE_DIR: &str = "slices";

pub fn encode_sidecar(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    img.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn decode_sidecar(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile(format!("sidecar of {} bytes", bytes.len())));
    }
    if &bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::BadMagic("not a NGSLC01 slice file".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(Error::TruncatedFile(format!(
            "{h}x{w} slice needs {} value bytes, found {}",
            h * w * 4,
            body.len()
        )));
    }
    Image::new(h, w, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn write_sidecar(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sidecar(img))?;
    Ok(())
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Image> {
    decode_sidecar(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub label: Label,
    pub fold: usize,
    pub axis: usize,
    pub index: usize,
    /// Sidecar path relative to the manifest's directory.
    pub path: String,
    /// SHA-256 of the sidecar bytes, lowercase hex.
    pub checksum: String,
    /// Splitting unit: the subject id, or a per-slice key in leaky mode.
    pub unit: String,
}

/// One in-memory training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub label: usize,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

fn slice_key(r: &SliceRecord) -> String {
    format!("{}/{}/{}", r.subject_id, r.axis, r.slice_index)
}

impl Manifest {
    /// Write sidecars under `dir/slices` and `dir/manifest.jsonl`. Folds are
    /// assigned per subject, or per slice when `leaky`.
    pub fn write(dir: impl AsRef<Path>, slices: &[SliceRecord], k: usize, seed: u64, leaky: bool) -> Result<Manifest> {
        let dir = dir.as_ref().to_path_buf();
        let mut order: Vec<&SliceRecord> = slices.iter().collect();
        order.sort_by(|a, b| (&a.subject_id, a.axis, a.slice_index).cmp(&(&b.subject_id, b.axis, b.slice_index)));
        let unit = |r: &SliceRecord| if leaky { slice_key(r) } else { r.subject_id.clone() };
        let units: Vec<(String, Label)> = order.iter().map(|r| (unit(r), r.label)).collect();
        let assignment = kfold_split(&units, k, seed)?;
        fs::create_dir_all(dir.join(SLICE_DIR))?;
        let mut records = Vec::with_capacity(order.len());
        for r in order {
            let rel = format!("{SLICE_DIR}/{}_a{}_{:04}.slc", r.subject_id, r.axis, r.slice_index);
            let bytes = encode_sidecar(&r.pixels);
            fs::write(dir.join(&rel), &bytes)?;
            let u = unit(r);
            records.push(ManifestRecord {
                subject_id: r.subject_id.clone(),
                label: r.label,
                fold: assignment.folds[&u],
                axis: r.axis,
                index: r.slice_index,
                path: rel,
                checksum: sha256_hex(&bytes),
                unit: u,
            });
        }
        let manifest = Manifest { dir, records };
        manifest.save()?;
        Ok(manifest)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let mut f = fs::File::create(self.manifest_path())?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    /// Accepts either the manifest file or its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = BufReader::new(fs::File::open(&file)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::InvalidData(format!("{}:{}: {e}", file.display(), i + 1)))?,
            );
        }
        Ok(Manifest { dir, records })
    }

    pub fn k(&self) -> usize {
        self.records.iter().map(|r| r.fold + 1).max().unwrap_or(0)
    }

    pub fn assignment(&self) -> Result<FoldAssignment> {
        let mut a = FoldAssignment { k: self.k(), folds: Default::default(), labels: Default::default() };
        for r in &self.records {
            if let Some(&f) = a.folds.get(&r.unit) {
                if f != r.fold {
                    return Err(Error::InvalidData(format!("unit {} appears in folds {f} and {}", r.unit, r.fold)));
                }
            }
            a.folds.insert(r.unit.clone(), r.fold);
            a.labels.insert(r.unit.clone(), r.label);
        }
        Ok(a)
    }

    pub fn read_pixels(&self, r: &ManifestRecord) -> Result<Image> {
        let bytes = fs::read(self.dir.join(&r.path))?;
        if sha256_hex(&bytes) != r.checksum {
            return Err(Error::InvalidData(format!("checksum mismatch for {}", r.path)));
        }
        decode_sidecar(&bytes)
    }

    /// Samples with the given role in round `fold`.
    pub fn samples(&self, fold: usize, role: Role, seed: u64) -> Result<Vec<Sample>> {
        let split = self.assignment()?.round(fold, seed)?;
        self.records
            .iter()
            .filter(|r| split.role(&r.unit) == Some(role))
            .map(|r| Ok(Sample { subject_id: r.subject_id.clone(), label: r.label.id(), image: self.read_pixels(r)? }))
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        self.records.iter().for_each(|r| c[r.label.id()] += 1);
        c
    }
}
