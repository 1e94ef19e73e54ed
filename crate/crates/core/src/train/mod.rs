//! Plateau detection, single-phase training and per-epoch metrics.

pub mod pipeline;

use std::fmt;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::nn::{mse_partial, Model, OptimError, OptimizerConfig};
use crate::parallel::{parallel_step, ParallelError, WorkerGroup};

pub use pipeline::{
    run_fusion_stage, run_pipeline, PhaseSettings, PipelineError, PipelineOptions, PipelineOutcome, ReductionPath,
    StageOutcome, StagePlan, StageReport,
};

/// Nominal throughput of the work clock, in multiply-accumulates per second.
pub const WORK_MACS_PER_SECOND: f64 = 1e9;

const SHUFFLE_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    pub epsilon: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid stop condition: {0}")]
pub struct StopConditionError(String);

impl StopCondition {
    pub fn new(epsilon: f64, patience: usize, max_epochs: usize) -> Result<Self, StopConditionError> {
        let c = Self {
            epsilon,
            patience,
            max_epochs,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), StopConditionError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(StopConditionError(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.patience == 0 {
            return Err(StopConditionError("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(StopConditionError("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// True once the last `patience` per-epoch reductions of the training loss
/// are all below `epsilon` (increases count as below), or the history has
/// reached `max_epochs`.
pub fn should_stop(history: &[f64], cond: &StopCondition) -> bool {
    if history.len() >= cond.max_epochs {
        return true;
    }
    if history.len() < cond.patience + 1 {
        return false;
    }
    history[history.len() - cond.patience - 1..]
        .windows(2)
        .all(|w| w[0] - w[1] < cond.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Dense,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Coarse, Phase::Dense, Phase::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Coarse => "coarse",
            Phase::Dense => "dense",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How epoch durations are measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    /// Deterministic: forward and backward multiply-accumulates divided by a
    /// nominal rate, with the training share split across workers.
    #[default]
    Work,
    /// Measured elapsed time.
    Wall,
}

/// Work-clock duration of one epoch.
pub fn work_seconds(model: &Model, train_samples: usize, val_samples: usize, workers: usize) -> f64 {
    let macs = model.forward_macs() as f64;
    let train = 3.0 * macs * train_samples as f64 / workers.max(1) as f64;
    let val = macs * val_samples as f64;
    (train + val) / WORK_MACS_PER_SECOND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: usize,
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epoch_seconds: f64,
    pub samples_per_sec: f64,
}

pub const METRICS_HEADER: &str = "stage,phase,epoch,train_loss,val_loss,epoch_seconds,samples_per_sec";

pub fn write_metrics<W: io::Write>(out: W, records: &[MetricsRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<(), csv::Error> {
    write_metrics(std::fs::File::create(path)?, records)
}

pub fn read_metrics<R: io::Read>(input: R) -> Result<Vec<MetricsRecord>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn read_metrics_file(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>, csv::Error> {
    read_metrics(std::fs::File::open(path)?)
}

/// Settings of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub stop: StopCondition,
    pub optimizer: OptimizerConfig,
    /// Global mini-batch size.
    pub batch_size: usize,
    pub workers: usize,
    /// Seeds the epoch shuffles.
    pub seed: u64,
    pub clock: Clock,
}

/// Where a phase sits in a run, for its metrics records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunLabel {
    pub stage: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn best_val_loss(&self) -> f64 {
        self.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn seconds(&self) -> f64 {
        self.records.iter().map(|r| r.epoch_seconds).sum()
    }
}

/// Diagnostic of a phase stopped by a non-finite value.
#[derive(Debug, Clone)]
pub struct AbortReport {
    pub stage: usize,
    pub phase: Phase,
    pub epoch: usize,
    /// 1-based batch within the epoch; 0 for validation.
    pub batch: usize,
    pub reason: String,
    /// Records of the epochs completed before the abort.
    pub records: Vec<MetricsRecord>,
}

impl fmt::Display for AbortReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} {} epoch {} ", self.stage, self.phase, self.epoch)?;
        if self.batch == 0 {
            write!(f, "validation")?;
        } else {
            write!(f, "batch {}", self.batch)?;
        }
        write!(f, ": {}", self.reason)
    }
}

#[derive(Debug, Clone, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("training aborted at {0}")]
    Aborted(Box<AbortReport>),
    #[error(transparent)]
    Parallel(#[from] ParallelError),
}

impl TrainError {
    pub fn abort_report(&self) -> Option<&AbortReport> {
        match self {
            TrainError::Aborted(r) => Some(r),
            _ => None,
        }
    }
}

/// Mean squared error of eval-mode predictions over a whole dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let n = data.len();
    let total = n * data.label_len();
    let mut sum = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(&x).map_err(|e| TrainError::Setup(e.to_string()))?;
        sum += mse_partial(&pred, &y, total)
            .map_err(|e| TrainError::Setup(e.to_string()))?
            .0;
    }
    Ok(sum / total as f64)
}

/// Trains full epochs until [`should_stop`] fires on the training loss,
/// recording one metrics row per epoch.
pub fn train_until_stop(
    model: Model,
    train: &Dataset,
    val: &Dataset,
    opts: &TrainOptions,
    label: RunLabel,
) -> Result<TrainOutcome, TrainError> {
    opts.stop.validate().map_err(|e| TrainError::Setup(e.to_string()))?;
    if opts.batch_size == 0 || opts.workers == 0 {
        return Err(TrainError::Setup("batch size and worker count must be >= 1".into()));
    }
    for (name, d) in [("training", train), ("validation", val)] {
        if d.sample_shape() != model.input_shape() {
            return Err(TrainError::Setup(format!(
                "{name} samples {:?} do not match model input {:?}",
                d.sample_shape(),
                model.input_shape()
            )));
        }
        if d.is_empty() {
            return Err(TrainError::Setup(format!("{name} set is empty")));
        }
    }
    let n = train.len();
    let work = work_seconds(&model, n, val.len(), opts.workers);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut group = WorkerGroup::new(model, opts.workers, opts.optimizer)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut history = Vec::new();

    while !should_stop(&history, &opts.stop) {
        let epoch = records.len() + 1;
        let abort = |batch, reason: String, records: &Vec<MetricsRecord>| {
            TrainError::Aborted(Box::new(AbortReport {
                stage: label.stage,
                phase: label.phase,
                epoch,
                batch,
                reason,
                records: records.clone(),
            }))
        };
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sum_sq = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            match parallel_step(&mut group, &x, &y) {
                Ok(step) if step.loss.is_finite() => sum_sq += step.loss * y.len() as f64,
                Ok(step) => {
                    return Err(abort(
                        b + 1,
                        format!("non-finite training loss {}", step.loss),
                        &records,
                    ))
                }
                Err(ParallelError::Optim {
                    source: e @ OptimError::NonFinite { .. },
                    ..
                }) => return Err(abort(b + 1, e.to_string(), &records)),
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = sum_sq / (n * train.label_len()) as f64;
        let val_loss = evaluate(group.model(), val, opts.batch_size)?;
        if !val_loss.is_finite() {
            return Err(abort(0, format!("non-finite validation loss {val_loss}"), &records));
        }
        let epoch_seconds = match opts.clock {
            Clock::Work => work,
            Clock::Wall => started.elapsed().as_secs_f64().max(1e-9),
        };
        records.push(MetricsRecord {
            stage: label.stage,
            phase: label.phase,
            epoch,
            train_loss,
            val_loss,
            epoch_seconds,
            samples_per_sec: n as f64 / epoch_seconds,
        });
        history.push(train_loss);
    }
    Ok(TrainOutcome {
        model: group.into_model(),
        records,
    })
}
