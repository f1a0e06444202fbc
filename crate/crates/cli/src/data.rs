//! `preprocess`, `split` and `synth`: everything that writes a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use neurograd::data::mask::DEFAULT_THRESHOLD;
use neurograd::data::{
    foreground_mask, kfold_split, read_nifti, slice_volume, synth_generate, Label, Manifest, SliceOptions, SliceRecord,
    SynthSpec,
};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub out: PathBuf,
    pub slice: SliceOptions,
    pub k: usize,
    pub seed: u64,
    pub leaky_split: bool,
}

#[derive(Debug)]
pub struct PreprocessSummary {
    pub manifest: Manifest,
    /// Slices per class, indexed by class id.
    pub slice_counts: [usize; 3],
    pub subjects: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// `<subject>_<label>.nii` → (subject, label).
pub fn parse_volume_name(path: &Path) -> Result<(String, Label)> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let (subject, label) = stem
        .rsplit_once('_')
        .filter(|(s, _)| !s.is_empty())
        .ok_or_else(|| CliError::Data(format!("{} is not named <subject>_<label>.nii", path.display())))?;
    Ok((subject.to_string(), label.parse()?))
}

fn process_volume(path: &Path, opts: &SliceOptions) -> Result<Vec<SliceRecord>> {
    let (subject, label) = parse_volume_name(path)?;
    let volume = read_nifti(path)?;
    let mask = foreground_mask(&volume, DEFAULT_THRESHOLD)?;
    Ok(slice_volume(&volume, &mask.bbox, opts, &subject, label, path)?)
}

/// Slice every `.nii` file in `input`; files that fail are reported and
/// skipped, and the run fails only when none succeed.
pub fn cmd_preprocess(input: &Path, opts: &PreprocessOptions) -> Result<PreprocessSummary> {
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "nii"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("no input volumes in {}", input.display())));
    }
    let mut slices = Vec::new();
    let mut failures = Vec::new();
    for f in &files {
        match process_volume(f, &opts.slice) {
            Ok(s) => slices.extend(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                failures.push((f.clone(), e.to_string()));
            }
        }
    }
    if failures.len() == files.len() {
        let list: Vec<String> = failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect();
        return Err(CliError::Data(format!("every input volume failed:\n  {}", list.join("\n  "))));
    }
    let manifest = Manifest::write(&opts.out, &slices, opts.k, opts.seed, opts.leaky_split)?;
    let subjects = slices.iter().map(|s| s.subject_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    Ok(PreprocessSummary { slice_counts: manifest.class_counts(), manifest, subjects, failures })
}

/// Units per class in each fold, as `(fold, [AD, CN, MCI])`.
pub fn fold_table(m: &Manifest) -> Result<Vec<(usize, [usize; 3])>> {
    let a = m.assignment()?;
    let mut table: BTreeMap<usize, [usize; 3]> = (0..a.k).map(|f| (f, [0; 3])).collect();
    for (unit, &fold) in &a.folds {
        table.entry(fold).or_default()[a.labels[unit].id()] += 1;
    }
    Ok(table.into_iter().collect())
}

/// Reassign folds of an existing manifest in place.
pub fn cmd_split(path: &Path, k: usize, seed: u64, leaky: bool) -> Result<Manifest> {
    let mut m = Manifest::load(path)?;
    if m.records.is_empty() {
        return Err(CliError::Data(format!("manifest {} is empty", path.display())));
    }
    for r in &mut m.records {
        r.unit = if leaky { format!("{}/{}/{}", r.subject_id, r.axis, r.index) } else { r.subject_id.clone() };
    }
    let units: Vec<(String, Label)> = m.records.iter().map(|r| (r.unit.clone(), r.label)).collect();
    let a = kfold_split(&units, k, seed)?;
    for r in &mut m.records {
        r.fold = a.folds[&r.unit];
    }
    m.save()?;
    Ok(m)
}

/// Synthetic slices written as a manifest, as if they came from `preprocess`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path, k: usize, seed: u64) -> Result<Manifest> {
    Ok(Manifest::write(out, &synth_generate(spec)?, k, seed, false)?)
}
