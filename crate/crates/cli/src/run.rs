//! `train`, `eval` and `explain`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neurograd::data::{read_sidecar, synth_generate, Manifest, Role, Sample};
use neurograd::experiment::Dataset;
use neurograd::gradcam::{grad_cam, write_pgm, Diagnostics};
use neurograd::model::transfer_load;
use neurograd::train::{evaluate, log_csv, to_batch, train, EpochLog, TrainConfig};
use neurograd::{Checkpoint, ClassWeights, LoadReport, MetricsReport, Optimizer, ResNet};

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};

pub const VERSION: &str = env!("NEUROGRAD_VERSION");

/// The files that make a run directory self-describing.
pub fn write_run_header(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("seed"), format!("{}\n", cfg.seed))?;
    fs::write(dir.join("version"), format!("{VERSION}\n"))?;
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = match cfg.data() {
        DataSource::Synth(spec) => Dataset::from_slices(&synth_generate(&spec)?, cfg.k, cfg.seed)?,
        DataSource::Manifest(path) => {
            let m = Manifest::load(&path).map_err(|e| CliError::Data(format!("manifest {}: {e}", path.display())))?;
            if m.records.is_empty() {
                return Err(CliError::Data(format!("manifest {} is empty", path.display())));
            }
            if m.k() != cfg.k {
                log::warn!("manifest has {} folds; config k={} is ignored", m.k(), cfg.k);
            }
            Dataset::from_manifest(&m)?
        }
    };
    if cfg.fold >= data.k() {
        return Err(CliError::Config(format!("fold {} out of range for {} folds", cfg.fold, data.k())));
    }
    Ok(data)
}

pub fn build_model(cfg: &RunConfig) -> Result<(ResNet<f32>, Option<LoadReport>)> {
    let mut model = ResNet::<f32>::build(&cfg.model, cfg.seed)?;
    let report = match &cfg.transfer {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Some(transfer_load(&mut model, &ckpt, cfg.transfer_policy, cfg.seed)?)
        }
        None => None,
    };
    Ok((model, report))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub class_weights: Option<ClassWeights>,
    pub best_epoch: Option<usize>,
    pub load_report: Option<LoadReport>,
}

/// Train on the configured fold's train split, validating every epoch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let fold = data.fold(cfg.fold, cfg.seed)?;
    if fold.train.len() < 2 {
        return Err(CliError::Data(format!("fold {} has {} training samples", cfg.fold, fold.train.len())));
    }
    let dir = cfg.out.clone();
    write_run_header(&dir, cfg)?;
    let (mut model, load_report) = build_model(cfg)?;
    if let Some(r) = &load_report {
        log::info!(
            "transfer: {} loaded, {} re-initialized, {} skipped",
            r.loaded.len(),
            r.reinitialized.len(),
            r.skipped.len()
        );
        fs::write(dir.join("transfer.json"), serde_json::to_string_pretty(r)?)?;
    }
    let mut opt = Optimizer::new(cfg.preset.kind(), cfg.hyper())?;
    let tc = TrainConfig::new(cfg.epochs, cfg.batch_size, cfg.seed, cfg.loss);
    let val = (!fold.val.is_empty()).then_some(fold.val.as_slice());
    log::info!(
        "fold {}: {} train, {} val, {} test samples",
        cfg.fold,
        fold.train.len(),
        fold.val.len(),
        fold.test.len()
    );
    let outcome = train(&mut model, &mut opt, &fold.train, val, &tc, |e| {
        log::info!(
            "epoch {}: train loss {:.4} acc {:.3}{}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            e.val_accuracy.map(|a| format!(", val acc {a:.3}")).unwrap_or_default()
        );
    })?;
    fs::write(dir.join("log.csv"), log_csv(&outcome.log))?;
    if let Some(w) = &outcome.class_weights {
        log::info!("class weights {:?}", w.weights);
        fs::write(dir.join("class_weights.json"), serde_json::to_string_pretty(w)?)?;
    }
    Checkpoint::from_model(&model, Some(&opt)).save(dir.join("final.ckpt"))?;
    let best = outcome.best.as_ref().map_or(&model, |(_, m)| m);
    Checkpoint::from_model(best, None).save(dir.join("best.ckpt"))?;
    Ok(TrainSummary {
        dir,
        log: outcome.log,
        steps: outcome.steps,
        class_weights: outcome.class_weights,
        best_epoch: outcome.best.map(|(e, _)| e),
        load_report,
    })
}

pub fn load_model(path: &Path) -> Result<ResNet<f32>> {
    Checkpoint::load(path)?.to_model().map_err(CliError::from)
}

/// One row per class plus an accuracy row.
pub fn report_csv(r: &MetricsReport) -> String {
    let mut out = String::from("class,precision,recall,f1\n");
    for (name, c) in neurograd::data::Label::NAMES.iter().zip(&r.per_class) {
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6}", c.precision, c.recall, c.f1);
    }
    let _ = writeln!(out, "accuracy,,,{:.6}", r.accuracy);
    out
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub fold: usize,
    pub split: Role,
    pub seed: u64,
    pub batch_size: usize,
    pub out: Option<&'a Path>,
}

pub fn cmd_eval(req: &EvalRequest) -> Result<MetricsReport> {
    let mut model = load_model(req.checkpoint)?;
    let manifest = Manifest::load(req.manifest)?;
    if req.fold >= manifest.k() {
        return Err(CliError::Config(format!("fold {} out of range for {} folds", req.fold, manifest.k())));
    }
    let samples = manifest.samples(req.fold, req.split, req.seed)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("split {:?} of fold {} is empty", req.split, req.fold)));
    }
    let mut report = evaluate(&mut model, &samples, req.batch_size.max(1))?.report;
    report.fold_id = Some(req.fold);
    if let Some(dir) = req.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), report.to_json()?)?;
        fs::write(dir.join("report.csv"), report_csv(&report))?;
    }
    Ok(report)
}

/// Writes the PGM at `out` and the diagnostics next to it as JSON.
pub fn cmd_explain(checkpoint: &Path, slice: &Path, class: usize, out: &Path) -> Result<Diagnostics> {
    let mut model = load_model(checkpoint)?;
    let image = read_sidecar(slice)?;
    let sample = Sample { subject_id: String::new(), label: 0, image };
    let input = to_batch::<f32>(&[&sample], model.spec().in_channels)?;
    let map = grad_cam(&mut model, &input, class)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_pgm(&map, out)?;
    let diag = map.diagnostics();
    fs::write(out.with_extension("json"), serde_json::to_string_pretty(&diag)?)?;
    Ok(diag)
}
