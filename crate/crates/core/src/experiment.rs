//! Baseline and multi-resolution runs driven by an [`ExperimentConfig`].
//!
//! A run writes into `<output_dir>/<mode>/`:
//! `metrics.csv`, `summary.toml`, `final.mrc` and, for fusion runs,
//! `stage<i>_fused.mrc`. An aborted run leaves `abort.txt` instead of the
//! final checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::format::{read_dataset, FormatError};
use crate::data::synthetic::generate_synthetic;
use crate::data::{DataError, Splits};
use crate::fusion::save_checkpoint;
use crate::nn::{Model, ModelError};
use crate::train::{
    run_pipeline, train_until_stop, write_metrics_file, MetricsRecord, Phase, PipelineError, PipelineOptions, RunLabel,
    StageReport, TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Mrmf,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Mrmf => "mrmf",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dataset file: {0}")]
    Format(#[from] FormatError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("{message} (details in {})", path.display())]
    Aborted { message: String, path: PathBuf },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("writing metrics: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub coarse_factors: String,
    pub dense_factors: String,
    pub coarse_epochs: usize,
    pub dense_pre_epochs: usize,
    pub coarse_val_loss: f64,
    pub dense_val_loss: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers_dense_coarse: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl From<&StageReport> for StageSummary {
    fn from(r: &StageReport) -> Self {
        Self {
            stage: r.stage,
            coarse_factors: r.coarse_factors.to_string(),
            dense_factors: r.dense_factors.to_string(),
            coarse_epochs: r.coarse_epochs,
            dense_pre_epochs: r.dense_epochs,
            coarse_val_loss: r.coarse_val_loss,
            dense_val_loss: r.dense_val_loss,
            seconds: r.elapsed_seconds,
            workers_dense_coarse: r.allocation.map(|(d, c)| [d, c]),
            checkpoint: r
                .checkpoint
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned()),
        }
    }
}

/// The last training phase, at the original resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub stage: usize,
    pub epochs: usize,
    pub seconds: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

/// One row of the result table: epochs per phase, time and loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: RunMode,
    pub coarse_epochs: usize,
    pub dense_pre_epochs: usize,
    pub finetune_epochs: usize,
    /// Sum of every epoch's duration.
    pub total_seconds: f64,
    /// Like `total_seconds`, but concurrent stages count their longer phase.
    pub elapsed_seconds: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    #[serde(default)]
    pub stages: Vec<StageSummary>,
    pub finetune: FinetuneSummary,
}

impl RunSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<MetricsRecord>,
    pub model: Model,
}

/// Train and validation sets at the original resolution.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits, ExperimentError> {
    match (&cfg.data.synthetic, &cfg.data.file) {
        (Some(spec), _) => Ok(generate_synthetic(spec)?.split(spec.splits)?),
        (None, Some(file)) => {
            let splits = cfg.data.splits.expect("validated config");
            Ok(read_dataset(file)?.split(splits)?)
        }
        (None, None) => Err(ConfigError::Invalid("no data source".into()).into()),
    }
}

pub fn reference_model(cfg: &ExperimentConfig, sample_shape: &[usize]) -> Result<Model, ModelError> {
    Model::new(cfg.layer_specs(), sample_shape.to_vec(), cfg.model.seed)
}

pub fn run_dir(cfg: &ExperimentConfig, mode: RunMode) -> PathBuf {
    cfg.output_dir.join(mode.name())
}

fn write_abort(dir: &Path, error: &dyn std::fmt::Display, errors: &[&TrainError]) -> Result<PathBuf, ExperimentError> {
    let mut text = format!("{error}\n");
    for e in errors {
        if let Some(r) = e.abort_report() {
            let _ = writeln!(text, "\n{r}\ncompleted epochs before the abort:");
            let mut buf = Vec::new();
            crate::train::write_metrics(&mut buf, &r.records)?;
            text.push_str(&String::from_utf8_lossy(&buf));
        }
    }
    let path = dir.join("abort.txt");
    fs::write(&path, text)?;
    Ok(path)
}

/// Runs one experiment and writes its artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, mode: RunMode) -> Result<RunOutput, ExperimentError> {
    let splits = load_splits(cfg)?;
    let reference = reference_model(cfg, splits.train.sample_shape())?;
    let dir = run_dir(cfg, mode);
    fs::create_dir_all(&dir)?;
    let stale = dir.join("abort.txt");
    if stale.exists() {
        fs::remove_file(stale)?;
    }

    let (model, records, stages) = match mode {
        RunMode::Baseline => {
            let label = RunLabel {
                stage: 0,
                phase: Phase::Finetune,
            };
            let opts = cfg.finetune.options(cfg.clock);
            match train_until_stop(reference, &splits.train, &splits.val, &opts, label) {
                Ok(out) => (out.model, out.records, Vec::new()),
                Err(e) => {
                    let path = write_abort(&dir, &e, &[&e])?;
                    return Err(aborted(&e, path));
                }
            }
        }
        RunMode::Mrmf => {
            let opts = PipelineOptions {
                clock: cfg.clock,
                path: cfg.reduction,
                concurrent: cfg.concurrent.clone(),
                checkpoint_dir: Some(dir.clone()),
            };
            let plans = cfg.stage_plans()?;
            match run_pipeline(&reference, &plans, &cfg.finetune, &splits.train, &splits.val, &opts) {
                Ok(out) => (out.model, out.records, out.stages),
                Err(e) => {
                    let errors = e.train_errors();
                    if errors.iter().any(|t| t.abort_report().is_some()) {
                        let path = write_abort(&dir, &e, &errors)?;
                        return Err(aborted(&e, path));
                    }
                    return Err(ExperimentError::Pipeline(e));
                }
            }
        }
    };

    write_metrics_file(dir.join("metrics.csv"), &records)?;
    save_checkpoint(&model, dir.join("final.mrc"))?;
    let summary = summarize(&cfg.name, mode, &records, &stages);
    fs::write(dir.join("summary.toml"), summary.to_toml())?;
    Ok(RunOutput {
        dir,
        summary,
        records,
        model,
    })
}

fn aborted(e: &dyn std::fmt::Display, path: PathBuf) -> ExperimentError {
    ExperimentError::Aborted {
        message: format!("training aborted: {e}"),
        path,
    }
}

pub fn summarize(name: &str, mode: RunMode, records: &[MetricsRecord], stages: &[StageReport]) -> RunSummary {
    let count = |p| records.iter().filter(|r| r.phase == p).count();
    let finetune: Vec<&MetricsRecord> = records.iter().filter(|r| r.phase == Phase::Finetune).collect();
    let finetune_seconds: f64 = finetune.iter().map(|r| r.epoch_seconds).sum();
    let val_loss = finetune.last().map_or(f64::NAN, |r| r.val_loss);
    let best_val_loss = finetune.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    RunSummary {
        name: name.to_string(),
        mode,
        coarse_epochs: count(Phase::Coarse),
        dense_pre_epochs: count(Phase::Dense),
        finetune_epochs: finetune.len(),
        total_seconds: records.iter().map(|r| r.epoch_seconds).sum(),
        elapsed_seconds: stages.iter().map(|s| s.elapsed_seconds).sum::<f64>() + finetune_seconds,
        val_loss,
        best_val_loss,
        stages: stages.iter().map(StageSummary::from).collect(),
        finetune: FinetuneSummary {
            stage: stages.len(),
            epochs: finetune.len(),
            seconds: finetune_seconds,
            val_loss,
            best_val_loss,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(phase: Phase, epoch: usize, val: f64) -> MetricsRecord {
        MetricsRecord {
            stage: 0,
            phase,
            epoch,
            train_loss: val,
            val_loss: val,
            epoch_seconds: 0.5,
            samples_per_sec: 2.0,
        }
    }

    #[test]
    fn summary_counts_phases() {
        let records = vec![
            record(Phase::Coarse, 1, 3.0),
            record(Phase::Dense, 1, 2.0),
            record(Phase::Finetune, 1, 1.0),
            record(Phase::Finetune, 2, 1.5),
        ];
        let s = summarize("x", RunMode::Mrmf, &records, &[]);
        assert_eq!((s.coarse_epochs, s.dense_pre_epochs, s.finetune_epochs), (1, 1, 2));
        assert_eq!(s.total_seconds, 2.0);
        assert_eq!((s.val_loss, s.best_val_loss), (1.5, 1.0));
        assert_eq!((s.finetune.stage, s.finetune.epochs, s.finetune.seconds), (0, 2, 1.0));
        let back: RunSummary = toml::from_str(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }
}
