//! Run configuration: flat `key=value` lines, `#` comments, unknown keys
//! rejected. [`RunConfig::to_text`] writes every key in a fixed order so a
//! run directory records exactly what ran.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use neurograd::data::{SynthSpec, SynthTask};
use neurograd::train::LossKind;
use neurograd::{ActivationPolicy, Hyper, Preset, ResNetSpec, TransferPolicy};

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "depth",
    "width",
    "classes",
    "in_channels",
    "activation",
    "optimizer",
    "lr",
    "momentum",
    "alpha",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "loss",
    "transfer",
    "transfer_policy",
    "pretrain_epochs",
    "manifest",
    "synth_counts",
    "synth_slices",
    "synth_size",
    "synth_noise",
    "synth_amplitude",
    "synth_task",
    "synth_seed",
    "k",
    "fold",
    "seed",
    "epochs",
    "batch_size",
    "out",
];

/// Per-field replacements for the preset's hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub alpha: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, mut h: Hyper) -> Hyper {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut h.lr, self.lr);
        set(&mut h.momentum, self.momentum);
        set(&mut h.alpha, self.alpha);
        set(&mut h.beta1, self.beta1);
        set(&mut h.beta2, self.beta2);
        set(&mut h.eps, self.eps);
        set(&mut h.weight_decay, self.weight_decay);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ResNetSpec,
    pub preset: Preset,
    pub overrides: Overrides,
    pub loss: LossKind,
    pub transfer: Option<PathBuf>,
    pub transfer_policy: TransferPolicy,
    /// Epochs of the synthetic task-A pretraining in the transfer scenario;
    /// defaults to `epochs`.
    pub pretrain_epochs: Option<usize>,
    /// Synthetic settings are kept (and written) even when a manifest is set.
    pub synth: SynthSpec,
    pub manifest: Option<PathBuf>,
    pub k: usize,
    pub fold: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out: PathBuf,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let items: Vec<T> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
    if items.len() != n {
        return Err(CliError::Config(format!("{key}: expected {n} comma-separated values, got {value:?}")));
    }
    Ok(items)
}

fn core<T>(key: &str, r: neurograd::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    /// Parse config text, then apply `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: key {k} given twice", n + 1)));
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) =
                o.split_once('=').ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut model = ResNetSpec::default();
        let mut preset = Preset::PaperSgd;
        let mut ov = Overrides::default();
        let mut loss = LossKind::Plain;
        let mut transfer = None;
        let mut transfer_policy = TransferPolicy::BackboneOnly;
        let mut pretrain_epochs = None;
        let mut manifest = None;
        let mut synth = SynthSpec::default();
        let (mut k, mut fold, mut seed) = (5, 0, 0);
        let (mut epochs, mut batch_size) = (None, None);
        let mut out = PathBuf::from("runs/default");
        for (key, v) in pairs {
            let key = key.as_str();
            let v = v.as_str();
            match key {
                "depth" => model.depth = parse(key, v)?,
                "width" => model.width_multiplier = parse(key, v)?,
                "classes" => model.num_classes = parse(key, v)?,
                "in_channels" => model.in_channels = parse(key, v)?,
                "activation" => model.activation_policy = core(key, v.parse::<ActivationPolicy>())?,
                "optimizer" => preset = core(key, v.parse())?,
                "lr" => ov.lr = parse_opt(key, v)?,
                "momentum" => ov.momentum = parse_opt(key, v)?,
                "alpha" => ov.alpha = parse_opt(key, v)?,
                "beta1" => ov.beta1 = parse_opt(key, v)?,
                "beta2" => ov.beta2 = parse_opt(key, v)?,
                "eps" => ov.eps = parse_opt(key, v)?,
                "weight_decay" => ov.weight_decay = parse_opt(key, v)?,
                "loss" => loss = core(key, v.parse())?,
                "transfer" => transfer = (!v.is_empty()).then(|| PathBuf::from(v)),
                "transfer_policy" => transfer_policy = core(key, v.parse())?,
                "pretrain_epochs" => pretrain_epochs = parse_opt(key, v)?,
                "manifest" => manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
                "synth_counts" => {
                    let c = parse_list::<usize>(key, v, 3)?;
                    synth.subjects = [c[0], c[1], c[2]];
                }
                "synth_slices" => synth.slices_per_subject = parse(key, v)?,
                "synth_size" => synth.size = parse(key, v)?,
                "synth_noise" => synth.noise = parse(key, v)?,
                "synth_amplitude" => {
                    let a = parse_list::<f64>(key, v, 2)?;
                    synth.amplitude = (a[0], a[1]);
                }
                "synth_task" => synth.task = core(key, v.parse::<SynthTask>())?,
                "synth_seed" => synth.seed = parse(key, v)?,
                "k" => k = parse(key, v)?,
                "fold" => fold = parse(key, v)?,
                "seed" => seed = parse(key, v)?,
                "epochs" => epochs = Some(parse(key, v)?),
                "batch_size" => batch_size = Some(parse(key, v)?),
                "out" => out = PathBuf::from(v),
                _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
            }
        }
        let cfg = RunConfig {
            model,
            preset,
            overrides: ov,
            loss,
            transfer,
            transfer_policy,
            pretrain_epochs,
            synth,
            manifest,
            k,
            fold,
            seed,
            epochs: epochs.ok_or_else(|| CliError::Config("epochs is required".into()))?,
            batch_size: batch_size.ok_or_else(|| CliError::Config("batch_size is required".into()))?,
            out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        core("model", self.model.validate())?;
        core("synth", self.synth.validate())?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CliError::Config("epochs and batch_size must be positive".into()));
        }
        if self.k < 2 || self.fold >= self.k {
            return Err(CliError::Config(format!("need k >= 2 and fold < k, got k={} fold={}", self.k, self.fold)));
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        self.overrides.apply(self.preset.hyper())
    }

    pub fn data(&self) -> DataSource {
        match &self.manifest {
            Some(p) => DataSource::Manifest(p.clone()),
            None => DataSource::Synth(self.synth.clone()),
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let o = &self.overrides;
        let task = match s.task {
            SynthTask::A => "a",
            SynthTask::B => "b",
        };
        let values: Vec<String> = vec![
            m.depth.to_string(),
            m.width_multiplier.to_string(),
            m.num_classes.to_string(),
            m.in_channels.to_string(),
            m.activation_policy.name().to_string(),
            self.preset.name().to_string(),
            opt_text(&o.lr),
            opt_text(&o.momentum),
            opt_text(&o.alpha),
            opt_text(&o.beta1),
            opt_text(&o.beta2),
            opt_text(&o.eps),
            opt_text(&o.weight_decay),
            self.loss.name().to_string(),
            self.transfer.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.transfer_policy.name().to_string(),
            opt_text(&self.pretrain_epochs),
            self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            format!("{},{},{}", s.subjects[0], s.subjects[1], s.subjects[2]),
            s.slices_per_subject.to_string(),
            s.size.to_string(),
            s.noise.to_string(),
            format!("{},{}", s.amplitude.0, s.amplitude.1),
            task.to_string(),
            s.seed.to_string(),
            self.k.to_string(),
            self.fold.to_string(),
            self.seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.out.display().to_string(),
        ];
        let mut text = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(text, "{k}={v}");
        }
        text
    }
}
