//! Argument parsing and the text each command prints.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neurograd::data::slice::{DEFAULT_AXIS, DEFAULT_KEEP_FRACTION, DEFAULT_TARGET_SIZE};
use neurograd::data::split::DEFAULT_K;
use neurograd::data::{Label, Role, SliceOptions, SynthSpec, SynthTask};

use crate::config::RunConfig;
use crate::data::{cmd_preprocess, cmd_split, cmd_synth, fold_table, PreprocessOptions};
use crate::error::{CliError, Result};
use crate::run::{cmd_eval, cmd_explain, cmd_train, EvalRequest, VERSION};
use crate::scenario::{cmd_scenario, ScenarioKind};

#[derive(Debug, Parser)]
#[command(name = "neurograd", version = VERSION, about = "ResNet training, evaluation and Grad-CAM on MRI slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (flat key=value file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.set),
            None => RunConfig::parse("", &self.set),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slice `<subject>_<label>.nii` volumes into a manifest.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AXIS)]
        axis: usize,
        #[arg(long, default_value_t = DEFAULT_KEEP_FRACTION)]
        keep_fraction: f64,
        /// Square output size; 0 keeps the cropped size.
        #[arg(long, default_value_t = DEFAULT_TARGET_SIZE)]
        target_size: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Assign folds per slice instead of per subject.
        #[arg(long)]
        leaky_split: bool,
    },
    /// Reassign the folds of a manifest.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        leaky_split: bool,
    },
    /// Write a synthetic quadrant-blob dataset as a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Subjects per class (AD,CN,MCI).
        #[arg(long, value_delimiter = ',', default_values_t = [10, 10, 10])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        slices: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value = "b")]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Train one fold of a configured run.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one split of a manifest fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed of the train/validation split inside the round.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM heatmap of one slice file.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slice: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation across all folds.
    Scenario {
        /// depth, optimizer, weighted, transfer or mish.
        name: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Parse and run; returns the process exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn counts_line(counts: &[usize; 3]) -> String {
    Label::NAMES.iter().zip(counts).map(|(n, c)| format!("{n} {c}")).collect::<Vec<_>>().join(", ")
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Preprocess { input, out: dir, axis, keep_fraction, target_size, k, seed, leaky_split } => {
            let opts = PreprocessOptions {
                out: dir,
                slice: SliceOptions {
                    axis,
                    keep_fraction,
                    target: (target_size > 0).then_some((target_size, target_size)),
                },
                k,
                seed,
                leaky_split,
            };
            let s = cmd_preprocess(&input, &opts)?;
            for (path, err) in &s.failures {
                writeln!(out, "warning: skipped {}: {err}", path.display())?;
            }
            writeln!(
                out,
                "{} subjects, {} slices: {}",
                s.subjects,
                s.manifest.records.len(),
                counts_line(&s.slice_counts)
            )?;
            writeln!(out, "manifest: {}", s.manifest.manifest_path().display())?;
        }
        Command::Split { manifest, k, seed, leaky_split } => {
            let m = cmd_split(&manifest, k, seed, leaky_split)?;
            for (fold, counts) in fold_table(&m)? {
                writeln!(out, "fold {fold}: {}", counts_line(&counts))?;
            }
        }
        Command::Synth { out: dir, counts, slices, size, noise, task, seed, k } => {
            let task: SynthTask = task.parse()?;
            let subjects: [usize; 3] =
                counts.try_into().map_err(|c| CliError::Config(format!("--counts takes 3 values, got {c:?}")))?;
            let spec =
                SynthSpec { subjects, slices_per_subject: slices, size, noise, task, seed, ..SynthSpec::default() };
            let m = cmd_synth(&spec, &dir, k, seed)?;
            writeln!(out, "{} slices: {}", m.records.len(), counts_line(&m.class_counts()))?;
            writeln!(out, "manifest: {}", m.manifest_path().display())?;
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = cmd_train(&cfg)?;
            if let Some(w) = &s.class_weights {
                writeln!(
                    out,
                    "class weights: {}",
                    w.weights.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(", ")
                )?;
            }
            if let Some(last) = s.log.last() {
                writeln!(out, "{} steps; final train accuracy {:.4}", s.steps, last.train_accuracy)?;
            }
            if let Some(e) = s.best_epoch {
                writeln!(out, "best validation accuracy at epoch {e}")?;
            }
            writeln!(out, "run directory: {}", s.dir.display())?;
        }
        Command::Eval { checkpoint, manifest, fold, split, seed, batch_size, out: dir } => {
            let split: Role = split.parse().map_err(|e: neurograd::Error| CliError::Config(e.to_string()))?;
            let req = EvalRequest {
                checkpoint: &checkpoint,
                manifest: &manifest,
                fold,
                split,
                seed,
                batch_size,
                out: dir.as_deref(),
            };
            let report = cmd_eval(&req)?;
            writeln!(out, "{}", report.to_json()?)?;
        }
        Command::Explain { checkpoint, slice, class, out: path } => {
            let d = cmd_explain(&checkpoint, &slice, class, &path)?;
            if d.zero_map {
                writeln!(out, "warning: heatmap is all zero")?;
            }
            let mass = d.quadrant_mass.map(|m| format!("{m:.3}"));
            writeln!(out, "class {} quadrant mass [{}]", d.target_class, mass.join(", "))?;
            writeln!(out, "heatmap: {}", path.display())?;
        }
        Command::Scenario { name, config } => {
            let kind: ScenarioKind = name.parse()?;
            let cfg = config.load()?;
            let r = cmd_scenario(kind, &cfg)?;
            write!(out, "{}", r.table_csv)?;
            for v in &r.verdicts {
                writeln!(out, "{}", v.line())?;
            }
            writeln!(out, "outputs: {}", cfg.out.display())?;
        }
    }
    Ok(())
}
