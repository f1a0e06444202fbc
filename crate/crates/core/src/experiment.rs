//! K-fold ablation runs: one table row per fold per condition, a mean row,
//! and a paired direction-of-effect verdict across folds.

use serde::{Deserialize, Serialize};

use crate::data::{FoldAssignment, Manifest, Role, Sample, SliceRecord};
use crate::error::{Error, Result};
use crate::metrics::{table_csv, MetricsReport, TableRow};
use crate::model::{transfer_load, Checkpoint, LoadReport, ResNet, ResNetSpec, TransferPolicy};
use crate::optim::{Hyper, Optimizer, OptimizerKind};
use crate::train::{evaluate, train, EpochLog, LossKind, TrainConfig};

/// Samples tagged with their splitting unit, plus the fold of every unit.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub units: Vec<String>,
    pub assignment: FoldAssignment,
}

#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Subject-level folds over in-memory slices.
    pub fn from_slices(slices: &[SliceRecord], k: usize, seed: u64) -> Result<Self> {
        let units: Vec<String> = slices.iter().map(|r| r.subject_id.clone()).collect();
        let pairs: Vec<(String, crate::data::Label)> = slices.iter().map(|r| (r.subject_id.clone(), r.label)).collect();
        let assignment = crate::data::kfold_split(&pairs, k, seed)?;
        let samples = slices
            .iter()
            .map(|r| Sample { subject_id: r.subject_id.clone(), label: r.label.id(), image: r.pixels.clone() })
            .collect();
        Ok(Dataset { samples, units, assignment })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let assignment = m.assignment()?;
        let samples = m
            .records
            .iter()
            .map(|r| Ok(Sample { subject_id: r.subject_id.clone(), label: r.label.id(), image: m.read_pixels(r)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, units: m.records.iter().map(|r| r.unit.clone()).collect(), assignment })
    }

    pub fn k(&self) -> usize {
        self.assignment.k
    }

    pub fn fold(&self, round: usize, seed: u64) -> Result<FoldData> {
        let split = self.assignment.round(round, seed)?;
        let mut data = FoldData { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (s, unit) in self.samples.iter().zip(&self.units) {
            match split.role(unit) {
                Some(Role::Train) => data.train.push(s.clone()),
                Some(Role::Val) => data.val.push(s.clone()),
                Some(Role::Test) => data.test.push(s.clone()),
                None => return Err(Error::InvalidData(format!("unit {unit} has no fold"))),
            }
        }
        Ok(data)
    }

    pub fn all(&self) -> &[Sample] {
        &self.samples
    }
}

/// Everything that varies between rows of one ablation table.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub model: ResNetSpec,
    pub optimizer: OptimizerKind,
    pub hyper: Hyper,
    pub loss: LossKind,
    pub transfer: Option<(Checkpoint, TransferPolicy)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl RunSettings {
    /// Seed of fold `fold`: folds double as independent replicates.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub log: Vec<EpochLog>,
    pub load_report: Option<LoadReport>,
}

/// Build (and optionally transfer-load) a model, train it on the fold's
/// train split with per-epoch validation, and evaluate the snapshot with
/// the best validation accuracy.
pub fn run_fold(cond: &Condition, data: &FoldData, settings: &RunSettings, fold: usize) -> Result<FoldRun> {
    let seed = settings.fold_seed(fold);
    let mut model = ResNet::<f32>::build(&cond.model, seed)?;
    let load_report = match &cond.transfer {
        Some((ckpt, policy)) => Some(transfer_load(&mut model, ckpt, *policy, seed)?),
        None => None,
    };
    let mut opt = Optimizer::new(cond.optimizer, cond.hyper)?;
    let cfg = TrainConfig::new(settings.epochs, settings.batch_size, seed, cond.loss);
    let val = (!data.val.is_empty()).then_some(data.val.as_slice());
    let outcome = train(&mut model, &mut opt, &data.train, val, &cfg, |_| {})?;
    if let Some((epoch, best)) = outcome.best {
        log::debug!("fold {fold}: evaluating the epoch-{epoch} snapshot");
        model = best;
    }
    let mut val_report = evaluate(&mut model, &data.val, settings.batch_size)?.report;
    val_report.fold_id = Some(fold);
    let mut test_report = evaluate(&mut model, &data.test, settings.batch_size)?.report;
    test_report.fold_id = Some(fold);
    Ok(FoldRun { fold, val: val_report, test: test_report, log: outcome.log, load_report })
}

#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub condition: String,
    pub folds: Vec<FoldRun>,
}

impl ConditionResult {
    pub fn rows(&self) -> Vec<TableRow> {
        self.folds.iter().map(|f| TableRow::new(&self.condition, Some(f.fold), &f.val, &f.test)).collect()
    }

    pub fn mean_row(&self) -> Result<TableRow> {
        TableRow::mean(&self.condition, &self.rows())
    }

    pub fn per_fold(&self, metric: impl Fn(&FoldRun) -> f64) -> Vec<f64> {
        self.folds.iter().map(metric).collect()
    }
}

pub fn run_condition(
    cond: &Condition,
    data: &Dataset,
    settings: &RunSettings,
    folds: &[usize],
) -> Result<ConditionResult> {
    let mut out = Vec::with_capacity(folds.len());
    for &f in folds {
        let fd = data.fold(f, settings.seed)?;
        log::info!("{} fold {f}: {} train, {} val, {} test", cond.name, fd.train.len(), fd.val.len(), fd.test.len());
        out.push(run_fold(cond, &fd, settings, f)?);
    }
    Ok(ConditionResult { condition: cond.name.clone(), folds: out })
}

/// Every fold row followed by one mean row per condition.
pub fn scenario_table(results: &[ConditionResult], class_names: &[&str]) -> Result<String> {
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.rows());
        rows.push(r.mean_row()?);
    }
    Ok(table_csv(&rows, class_names))
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// One paired comparison summarized over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub metric: String,
    pub baseline: Vec<f64>,
    pub treatment: Vec<f64>,
    pub baseline_mean: f64,
    pub baseline_sd: f64,
    pub treatment_mean: f64,
    pub treatment_sd: f64,
    pub holds: bool,
}

impl Verdict {
    pub fn new(
        claim: &str,
        metric: &str,
        baseline: Vec<f64>,
        treatment: Vec<f64>,
        holds: impl Fn(f64, f64) -> bool,
    ) -> Self {
        let (bm, bs) = mean_sd(&baseline);
        let (tm, ts) = mean_sd(&treatment);
        Verdict {
            claim: claim.into(),
            metric: metric.into(),
            holds: holds(bm, tm),
            baseline,
            treatment,
            baseline_mean: bm,
            baseline_sd: bs,
            treatment_mean: tm,
            treatment_sd: ts,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} [{}]: baseline {:.4} ± {:.4}, treatment {:.4} ± {:.4} over {} replicates -> {}",
            self.claim,
            self.metric,
            self.baseline_mean,
            self.baseline_sd,
            self.treatment_mean,
            self.treatment_sd,
            self.baseline.len(),
            if self.holds { "HOLDS" } else { "DOES NOT HOLD" }
        )
    }
}

/// Class-0 recall must rise and macro-F1 may drop by at most `f1_slack`.
pub fn weighted_verdicts(baseline: &ConditionResult, weighted: &ConditionResult, f1_slack: f64) -> Vec<Verdict> {
    vec![
        Verdict::new(
            "weighted loss raises minority recall",
            "test recall class 0",
            baseline.per_fold(|f| f.test.recall(0)),
            weighted.per_fold(|f| f.test.recall(0)),
            |b, t| t > b,
        ),
        Verdict::new(
            "weighted loss keeps macro-F1",
            "test macro-F1",
            baseline.per_fold(|f| f.test.macro_f1()),
            weighted.per_fold(|f| f.test.macro_f1()),
            move |b, t| t >= b - f1_slack,
        ),
    ]
}

/// Epochs until validation accuracy first reaches `threshold`; runs that
/// never get there count as `epochs + 1`.
pub fn epochs_to(run: &FoldRun, threshold: f64) -> f64 {
    run.log
        .iter()
        .find(|e| e.val_accuracy.is_some_and(|a| a >= threshold))
        .map_or(run.log.len() as f64 + 1.0, |e| e.epoch as f64)
}

pub fn transfer_verdicts(
    scratch: &ConditionResult,
    transfer: &ConditionResult,
    threshold: f64,
    slack: f64,
) -> Vec<Verdict> {
    vec![
        Verdict::new(
            "transfer reaches the accuracy threshold sooner",
            &format!("epochs to {:.0}% val accuracy", threshold * 100.0),
            scratch.per_fold(|f| epochs_to(f, threshold)),
            transfer.per_fold(|f| epochs_to(f, threshold)),
            |b, t| t < b,
        ),
        Verdict::new(
            "transfer keeps final test accuracy",
            "test accuracy",
            scratch.per_fold(|f| f.test.accuracy),
            transfer.per_fold(|f| f.test.accuracy),
            move |b, t| t >= b - slack,
        ),
    ]
}

/// Reported, not asserted: whether a Mish variant matches or beats ReLU.
pub fn mish_verdict(baseline: &ConditionResult, mish: &ConditionResult) -> Verdict {
    Verdict::new(
        &format!("{} matches or beats baseline", mish.condition),
        "test accuracy",
        baseline.per_fold(|f| f.test.accuracy),
        mish.per_fold(|f| f.test.accuracy),
        |b, t| t >= b,
    )
}
