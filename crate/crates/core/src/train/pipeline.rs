//! Fusion stages and the progressive multi-fusion schedule.

use std::borrow::Cow;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    train_until_stop, work_seconds, Clock, MetricsRecord, Phase, RunLabel, StopCondition, TrainError, TrainOptions,
    TrainOutcome,
};
use crate::data::format::FormatError;
use crate::data::{DataError, Dataset, ResolutionFactors};
use crate::fusion::{adjust_model, fuse, save_checkpoint, FusionError};
use crate::nn::{Model, ModelError, OptimizerConfig};
use crate::parallel::{
    allocate_workers_granular, concurrent_stage, sequential_stage, AllocationError, AllocationInput, ConcurrentError,
    TrainJob,
};

fn one() -> usize {
    1
}

/// Settings of one training phase within a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub stop: StopCondition,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub workers: usize,
    /// Seeds parameter initialization and the epoch shuffles.
    pub seed: u64,
}

impl PhaseSettings {
    pub fn options(&self, clock: Clock) -> TrainOptions {
        TrainOptions {
            stop: self.stop,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            workers: self.workers,
            seed: self.seed,
            clock,
        }
    }

    fn validate(&self, what: &str) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Setup(format!("{what}: {m}")));
        if let Err(e) = self.stop.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.optimizer.validate() {
            return bad(e.to_string());
        }
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be >= 1".into());
        }
        Ok(())
    }
}

/// One fusion stage: a coarse and a dense resolution, both given relative
/// to the original data.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub coarse_factors: ResolutionFactors,
    pub dense_factors: ResolutionFactors,
    pub coarse: PhaseSettings,
    pub dense: PhaseSettings,
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.coarse_factors.as_slice().len() != self.dense_factors.as_slice().len() {
            return Err(PipelineError::Setup(format!(
                "coarse factors {} and dense factors {} differ in rank",
                self.coarse_factors, self.dense_factors
            )));
        }
        if self.coarse_factors.product() <= self.dense_factors.product() {
            return Err(PipelineError::Setup(format!(
                "coarse factors {} are not coarser than dense factors {}",
                self.coarse_factors, self.dense_factors
            )));
        }
        self.coarse.validate("coarse phase")?;
        self.dense.validate("dense phase")
    }
}

/// How reduced-resolution input reaches a model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionPath {
    /// Datasets are downsampled once and cached.
    #[default]
    Cpu,
    /// Models read original data through a prepended average-pooling layer.
    Gpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcurrencySettings {
    /// Worker budget shared by the two groups.
    pub workers: usize,
    #[serde(default = "one")]
    pub granularity: usize,
    /// Estimated dense and coarse training seconds. Without them the work
    /// clock of one epoch times each phase's epoch cap is used.
    #[serde(default)]
    pub estimates: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOptions {
    pub clock: Clock,
    pub path: ReductionPath,
    pub concurrent: Option<ConcurrencySettings>,
    /// Where fused stage checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub coarse_factors: ResolutionFactors,
    pub dense_factors: ResolutionFactors,
    pub coarse_epochs: usize,
    pub dense_epochs: usize,
    pub coarse_train_loss: f64,
    pub coarse_val_loss: f64,
    pub dense_train_loss: f64,
    pub dense_val_loss: f64,
    pub coarse_seconds: f64,
    pub dense_seconds: f64,
    /// Stage duration: the sum of both phases, or the longer one when run
    /// concurrently.
    pub elapsed_seconds: f64,
    /// `(dense, coarse)` workers when run concurrently.
    pub allocation: Option<(usize, usize)>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub fused: Model,
    /// Trained coarse and dense models at their own resolutions.
    pub coarse: Model,
    pub dense: Model,
    pub report: StageReport,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid schedule: {0}")]
    Setup(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fusion failed: {0}")]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error("stage {stage}: {source}")]
    Stage { stage: usize, source: ConcurrentError },
    #[error("finetuning: {0}")]
    Finetune(TrainError),
    #[error("fused model of stage {stage} rejects dense input: {source}")]
    Probe { stage: usize, source: ModelError },
    #[error("writing checkpoint: {0}")]
    Checkpoint(#[from] FormatError),
}

impl PipelineError {
    /// Training errors carried by this failure.
    pub fn train_errors(&self) -> Vec<&TrainError> {
        match self {
            PipelineError::Stage { source, .. } => source.coarse.iter().chain(&source.dense).map(|e| &**e).collect(),
            PipelineError::Finetune(e) => vec![e],
            _ => Vec::new(),
        }
    }
}

fn reduced<'a>(data: &'a Dataset, factors: &ResolutionFactors) -> Result<Cow<'a, Dataset>, DataError> {
    if factors.is_identity() {
        Ok(Cow::Borrowed(data))
    } else {
        Ok(Cow::Owned(data.downsample(factors)?))
    }
}

fn pooled(model: &Model, factors: &ResolutionFactors) -> Result<Model, ModelError> {
    if factors.is_identity() {
        Ok(model.clone())
    } else {
        model.with_input_pool(factors.as_slice())
    }
}

fn unpooled(model: Model, factors: &ResolutionFactors) -> Result<Model, ModelError> {
    if factors.is_identity() {
        Ok(model)
    } else {
        model.without_input_pool()
    }
}

/// Trains the coarse model and a freshly initialized dense model on their
/// resolutions, then fuses them into a model for the dense resolution.
///
/// `reference` fixes the architecture at the original resolution; `train`
/// and `val` are original-resolution data.
pub fn run_fusion_stage(
    stage: usize,
    coarse_model: Model,
    reference: &Model,
    plan: &StagePlan,
    train: &Dataset,
    val: &Dataset,
    opts: &PipelineOptions,
) -> Result<StageOutcome, PipelineError> {
    plan.validate()?;
    let coarse_shape = plan.coarse_factors.reduce_sample_shape(reference.input_shape())?;
    let dense_shape = plan.dense_factors.reduce_sample_shape(reference.input_shape())?;
    if coarse_model.input_shape() != coarse_shape {
        return Err(PipelineError::Setup(format!(
            "stage {stage}: coarse model takes {:?}, factors {} give {coarse_shape:?}",
            coarse_model.input_shape(),
            plan.coarse_factors
        )));
    }
    let dense_model = adjust_model(reference, &dense_shape, plan.dense.seed)?;

    let (coarse_in, dense_in, ct, cv, dt, dv) = match opts.path {
        ReductionPath::Cpu => (
            coarse_model,
            dense_model,
            reduced(train, &plan.coarse_factors)?,
            reduced(val, &plan.coarse_factors)?,
            reduced(train, &plan.dense_factors)?,
            reduced(val, &plan.dense_factors)?,
        ),
        ReductionPath::Gpu => (
            pooled(&coarse_model, &plan.coarse_factors)?,
            pooled(&dense_model, &plan.dense_factors)?,
            Cow::Borrowed(train),
            Cow::Borrowed(val),
            Cow::Borrowed(train),
            Cow::Borrowed(val),
        ),
    };

    let label = |phase| RunLabel { stage, phase };
    let mut allocation = None;
    if let Some(c) = &opts.concurrent {
        let [t_dense, t_coarse] = c.estimates.unwrap_or_else(|| {
            [
                work_seconds(&dense_in, dt.len(), dv.len(), 1) * plan.dense.stop.max_epochs as f64,
                work_seconds(&coarse_in, ct.len(), cv.len(), 1) * plan.coarse.stop.max_epochs as f64,
            ]
        });
        let input = AllocationInput {
            t_dense,
            t_coarse,
            workers: c.workers,
        };
        allocation = Some(allocate_workers_granular(&input, c.granularity)?);
    }
    let coarse_job = TrainJob {
        model: coarse_in,
        train: &ct,
        val: &cv,
        options: plan.coarse.options(opts.clock),
        label: label(Phase::Coarse),
    };
    let dense_job = TrainJob {
        model: dense_in,
        train: &dt,
        val: &dv,
        options: plan.dense.options(opts.clock),
        label: label(Phase::Dense),
    };
    let run = match allocation {
        Some(a) => concurrent_stage(coarse_job, dense_job, a),
        None => sequential_stage(coarse_job, dense_job),
    }
    .map_err(|source| PipelineError::Stage { stage, source })?;

    let (coarse_out, dense_out) = (run.coarse, run.dense);
    let (coarse, dense) = match opts.path {
        ReductionPath::Cpu => (coarse_out.model.clone(), dense_out.model.clone()),
        ReductionPath::Gpu => (
            unpooled(coarse_out.model.clone(), &plan.coarse_factors)?,
            unpooled(dense_out.model.clone(), &plan.dense_factors)?,
        ),
    };
    let fused = fuse(&coarse, &dense)?;

    let probe = val.subset(0, 1).downsample(&plan.dense_factors)?;
    let idx = [0];
    fused
        .predict(&probe.batch(&idx).0)
        .map_err(|source| PipelineError::Probe { stage, source })?;

    let checkpoint = match &opts.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(format!("stage{stage}_fused.mrc"));
            save_checkpoint(&fused, &path)?;
            Some(path)
        }
        None => None,
    };

    let (cs, ds) = (coarse_out.seconds(), dense_out.seconds());
    let report = StageReport {
        stage,
        coarse_factors: plan.coarse_factors.clone(),
        dense_factors: plan.dense_factors.clone(),
        coarse_epochs: coarse_out.epochs(),
        dense_epochs: dense_out.epochs(),
        coarse_train_loss: coarse_out.final_train_loss(),
        coarse_val_loss: coarse_out.final_val_loss(),
        dense_train_loss: dense_out.final_train_loss(),
        dense_val_loss: dense_out.final_val_loss(),
        coarse_seconds: cs,
        dense_seconds: ds,
        elapsed_seconds: if allocation.is_some() { cs.max(ds) } else { cs + ds },
        allocation,
        checkpoint,
    };
    let mut records = coarse_out.records;
    records.extend(dense_out.records);
    Ok(StageOutcome {
        fused,
        coarse,
        dense,
        report,
        records,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: Model,
    pub stages: Vec<StageReport>,
    pub finetune: TrainOutcome,
    /// Every metrics row in execution order.
    pub records: Vec<MetricsRecord>,
}

impl PipelineOutcome {
    /// Sum of every epoch's duration.
    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.epoch_seconds).sum()
    }

    /// Stage durations (concurrency-aware) plus finetuning.
    pub fn elapsed_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.elapsed_seconds).sum::<f64>() + self.finetune.seconds()
    }
}

/// Checks that stages chain (each coarse resolution is the previous dense
/// one), get finer, and end at the original resolution.
pub fn validate_schedule(plans: &[StagePlan], spatial_axes: usize) -> Result<(), PipelineError> {
    for (i, p) in plans.iter().enumerate() {
        p.validate()
            .map_err(|e| PipelineError::Setup(format!("stage {i}: {e}")))?;
        if p.coarse_factors.as_slice().len() != spatial_axes {
            return Err(PipelineError::Setup(format!(
                "stage {i}: factors {} for {spatial_axes} spatial axes",
                p.coarse_factors
            )));
        }
    }
    for (i, w) in plans.windows(2).enumerate() {
        if w[1].coarse_factors != w[0].dense_factors {
            return Err(PipelineError::Setup(format!(
                "stage {} coarse factors {} differ from stage {i} dense factors {}",
                i + 1,
                w[1].coarse_factors,
                w[0].dense_factors
            )));
        }
    }
    if let Some(last) = plans.last() {
        if !last.dense_factors.is_identity() {
            return Err(PipelineError::Setup(format!(
                "last stage must end at the original resolution, not {}",
                last.dense_factors
            )));
        }
    }
    Ok(())
}

/// Runs every stage in order, carrying each fused model into the next stage
/// as its coarse model, then finetunes on the original data. With no stages
/// this is plain training of `reference`.
pub fn run_pipeline(
    reference: &Model,
    plans: &[StagePlan],
    finetune: &PhaseSettings,
    train: &Dataset,
    val: &Dataset,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome, PipelineError> {
    validate_schedule(plans, reference.input_shape().len() - 1)?;
    finetune.validate("finetune phase")?;
    let mut model = match plans.first() {
        None => reference.clone(),
        Some(p) => {
            let shape = p.coarse_factors.reduce_sample_shape(reference.input_shape())?;
            adjust_model(reference, &shape, p.coarse.seed)?
        }
    };
    let mut stages = Vec::new();
    let mut records = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let out = run_fusion_stage(i, model, reference, plan, train, val, opts)?;
        model = out.fused;
        stages.push(out.report);
        records.extend(out.records);
    }
    let label = RunLabel {
        stage: plans.len(),
        phase: Phase::Finetune,
    };
    let finetune =
        train_until_stop(model, train, val, &finetune.options(opts.clock), label).map_err(PipelineError::Finetune)?;
    records.extend(finetune.records.iter().cloned());
    Ok(PipelineOutcome {
        model: finetune.model.clone(),
        stages,
        finetune,
        records,
    })
}
