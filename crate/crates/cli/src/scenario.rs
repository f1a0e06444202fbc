//! Ablation scenarios: every condition trained on every fold, tabulated
//! per fold with a mean row, plus paired verdicts where a direction of
//! effect is expected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use neurograd::data::{synth_generate, Label, Sample, SynthSpec, SynthTask};
use neurograd::experiment::{
    mish_verdict, run_fold, scenario_table, transfer_verdicts, weighted_verdicts, Condition, ConditionResult, Dataset,
    FoldRun, RunSettings, Verdict,
};
use neurograd::metrics::TableRow;
use neurograd::train::{log_csv, train, LossKind, TrainConfig};
use neurograd::{ActivationPolicy, Checkpoint, Optimizer, Preset, ResNet, TransferPolicy};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::{load_dataset, write_run_header};

pub const THREADS_VAR: &str = "NEUROGRAD_THREADS";

/// Validation accuracy that counts as "reached" in the transfer scenario.
pub const TRANSFER_THRESHOLD: f64 = 0.9;
pub const TRANSFER_SLACK: f64 = 0.01;
pub const WEIGHTED_F1_SLACK: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Depth,
    Optimizer,
    Weighted,
    Transfer,
    Mish,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Depth,
        ScenarioKind::Optimizer,
        ScenarioKind::Weighted,
        ScenarioKind::Transfer,
        ScenarioKind::Mish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Depth => "depth",
            ScenarioKind::Optimizer => "optimizer",
            ScenarioKind::Weighted => "weighted",
            ScenarioKind::Transfer => "transfer",
            ScenarioKind::Mish => "mish",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            CliError::Config(format!("unknown scenario {s:?}, expected depth, optimizer, weighted, transfer or mish"))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub kind: ScenarioKind,
    pub conditions: Vec<ConditionResult>,
    pub verdicts: Vec<Verdict>,
    pub table_csv: String,
}

#[derive(Serialize)]
struct TableJson<'a> {
    scenario: &'a str,
    rows: Vec<TableRow>,
    verdicts: &'a [Verdict],
}

impl ScenarioResult {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut rows = Vec::new();
        for c in &self.conditions {
            rows.extend(c.rows());
            rows.push(c.mean_row()?);
        }
        Ok(serde_json::to_string_pretty(&TableJson { scenario: self.kind.name(), rows, verdicts: &self.verdicts })?)
    }
}

/// Parallel fold runs allowed by `NEUROGRAD_THREADS`, else the core count.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One condition over every fold, at most `threads` folds at a time. Each
/// fold builds its own model and tape.
pub fn run_condition_parallel(
    cond: &Condition,
    data: &Dataset,
    settings: &RunSettings,
    threads: usize,
) -> Result<ConditionResult> {
    let folds: Vec<usize> = (0..data.k()).collect();
    let one = |f: usize| -> Result<FoldRun> {
        let fd = data.fold(f, settings.seed)?;
        log::info!("{} fold {f}: {} train, {} val, {} test", cond.name, fd.train.len(), fd.val.len(), fd.test.len());
        Ok(run_fold(cond, &fd, settings, f)?)
    };
    let mut runs = Vec::with_capacity(folds.len());
    for chunk in folds.chunks(threads.max(1)) {
        let results: Vec<Result<FoldRun>> = if chunk.len() == 1 {
            vec![one(chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&f| s.spawn(move || one(f))).collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p))).collect()
            })
        };
        for r in results {
            runs.push(r?);
        }
    }
    Ok(ConditionResult { condition: cond.name.clone(), folds: runs })
}

fn base_condition(name: &str, cfg: &RunConfig) -> Condition {
    Condition {
        name: name.to_string(),
        model: cfg.model.clone(),
        optimizer: cfg.preset.kind(),
        hyper: cfg.hyper(),
        loss: cfg.loss,
        transfer: None,
    }
}

/// Task-A counterpart of the configured synthetic data: same size, noise
/// and slice count, balanced classes with the same total.
pub fn pretrain_spec(cfg: &RunConfig) -> SynthSpec {
    let per_class = (cfg.synth.subjects.iter().sum::<usize>() / 3).max(1);
    SynthSpec {
        subjects: [per_class; 3],
        task: SynthTask::A,
        seed: cfg.synth.seed.wrapping_add(1),
        ..cfg.synth.clone()
    }
}

/// Train the configured model on synthetic task A.
pub fn pretrain(cfg: &RunConfig) -> Result<(Checkpoint, f64)> {
    let spec = pretrain_spec(cfg);
    let samples: Vec<Sample> = synth_generate(&spec)?
        .into_iter()
        .map(|r| Sample { subject_id: r.subject_id, label: r.label.id(), image: r.pixels })
        .collect();
    let mut model = ResNet::<f32>::build(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.preset.kind(), cfg.hyper())?;
    let epochs = cfg.pretrain_epochs.unwrap_or(cfg.epochs);
    let tc = TrainConfig::new(epochs, cfg.batch_size, cfg.seed, LossKind::Plain);
    let outcome = train(&mut model, &mut opt, &samples, None, &tc, |e| {
        log::info!("pretrain epoch {}: loss {:.4} acc {:.3}", e.epoch, e.train_loss, e.train_accuracy)
    })?;
    let acc = outcome.log.last().map_or(0.0, |e| e.train_accuracy);
    Ok((Checkpoint::from_model(&model, None), acc))
}

/// The conditions of a scenario, in table order. `pretrained` is required
/// for the transfer scenario.
pub fn conditions(kind: ScenarioKind, cfg: &RunConfig, pretrained: Option<&Checkpoint>) -> Result<Vec<Condition>> {
    let with = |name: &str, f: &dyn Fn(&mut Condition)| {
        let mut c = base_condition(name, cfg);
        f(&mut c);
        c
    };
    Ok(match kind {
        ScenarioKind::Depth => {
            [18, 34].into_iter().map(|d| with(&format!("ResNet-{d}"), &|c| c.model.depth = d)).collect()
        }
        ScenarioKind::Optimizer => {
            [("SGD", Preset::PaperSgd), ("RMSprop", Preset::PaperRmsprop), ("Adam", Preset::PaperAdam)]
                .into_iter()
                .map(|(name, p)| {
                    with(name, &|c| {
                        c.optimizer = p.kind();
                        c.hyper = cfg.overrides.apply(p.hyper());
                    })
                })
                .collect()
        }
        ScenarioKind::Weighted => vec![
            with("Baseline", &|c| c.loss = LossKind::Plain),
            with("Weighted Loss", &|c| c.loss = LossKind::Weighted),
        ],
        ScenarioKind::Transfer => {
            let ckpt =
                pretrained.ok_or_else(|| CliError::Config("transfer scenario needs a pretrained checkpoint".into()))?;
            let policy = match cfg.transfer_policy {
                TransferPolicy::Strict => TransferPolicy::BackboneOnly,
                p => p,
            };
            vec![
                base_condition("Baseline", cfg),
                with("Transfer Learning", &|c| c.transfer = Some((ckpt.clone(), policy))),
            ]
        }
        ScenarioKind::Mish => vec![
            with("Baseline", &|c| c.model.activation_policy = ActivationPolicy::ReluAll),
            with("Mish (Last)", &|c| c.model.activation_policy = ActivationPolicy::MishLastBlock),
            with("Mish (All)", &|c| c.model.activation_policy = ActivationPolicy::MishAll),
        ],
    })
}

fn verdicts(kind: ScenarioKind, results: &[ConditionResult]) -> Vec<Verdict> {
    match kind {
        ScenarioKind::Weighted => weighted_verdicts(&results[0], &results[1], WEIGHTED_F1_SLACK),
        ScenarioKind::Transfer => transfer_verdicts(&results[0], &results[1], TRANSFER_THRESHOLD, TRANSFER_SLACK),
        ScenarioKind::Mish => results[1..].iter().map(|m| mish_verdict(&results[0], m)).collect(),
        ScenarioKind::Depth | ScenarioKind::Optimizer => Vec::new(),
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .filter_map(|c| match c {
            c if c.is_ascii_alphanumeric() => Some(c.to_ascii_lowercase()),
            ' ' | '-' => Some('_'),
            _ => None,
        })
        .collect()
}

/// Run a scenario over every fold and write its tables, verdicts and fold
/// logs under `cfg.out`.
pub fn cmd_scenario(kind: ScenarioKind, cfg: &RunConfig) -> Result<ScenarioResult> {
    let out = cfg.out.clone();
    write_run_header(&out, cfg)?;
    let data = load_dataset(cfg)?;
    let pretrained = if kind == ScenarioKind::Transfer {
        let (ckpt, acc) = pretrain(cfg)?;
        log::info!("pretraining on task A finished at train accuracy {acc:.3}");
        ckpt.save(out.join("pretrain.ckpt"))?;
        Some(ckpt)
    } else {
        None
    };
    let conds = conditions(kind, cfg, pretrained.as_ref())?;
    let settings = RunSettings { epochs: cfg.epochs, batch_size: cfg.batch_size, seed: cfg.seed };
    let threads = thread_cap();
    let mut results = Vec::with_capacity(conds.len());
    for c in &conds {
        results.push(run_condition_parallel(c, &data, &settings, threads)?);
    }
    let table_csv = scenario_table(&results, &Label::NAMES)?;
    let result = ScenarioResult { kind, verdicts: verdicts(kind, &results), conditions: results, table_csv };
    write_outputs(&out, &result)?;
    Ok(result)
}

fn write_outputs(out: &Path, r: &ScenarioResult) -> Result<()> {
    fs::write(out.join("table.csv"), &r.table_csv)?;
    fs::write(out.join("table.json"), r.to_json()?)?;
    let lines: String = r.verdicts.iter().map(|v| v.line() + "\n").collect();
    fs::write(out.join("verdicts.txt"), lines)?;
    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    for c in &r.conditions {
        for f in &c.folds {
            fs::write(logs.join(format!("{}_fold{}.csv", slug(&c.condition), f.fold)), log_csv(&f.log))?;
        }
    }
    Ok(())
}
