//! Simulated synchronous data parallelism.
//!
//! Each worker owns a model replica and its own optimizer state. Per step the
//! global mini-batch is split into contiguous shards, every worker runs
//! forward and backward on its shard in its own thread, batch-norm statistics
//! and gradients are summed across workers in ascending worker order, and
//! every replica applies the same update.

pub mod concurrent;

use std::ops::Range;
use std::sync::{Barrier, Mutex};
use std::thread;

use thiserror::Error;

use crate::nn::loss::LossShapeError;
use crate::nn::{
    mse_partial, BatchReduce, ForwardCache, Gradients, LocalReduce, Mode, Model, ModelError, OptimError,
    OptimizerConfig, OptimizerState,
};
use crate::tensor::Tensor;

pub use concurrent::{concurrent_stage, sequential_stage, ConcurrentError, JobTiming, StageRun, TrainJob};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParallelError {
    #[error("worker group needs at least one worker")]
    NoWorkers,
    #[error("empty batch")]
    EmptyBatch,
    #[error("{shards} shards for {workers} workers")]
    ShardCount { shards: usize, workers: usize },
    #[error("batch shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Loss(#[from] LossShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("worker {worker}: {source}")]
    Optim { worker: usize, source: OptimError },
    #[error("replicas diverged: checksums {0:x?}")]
    Divergence(Vec<u64>),
}

/// Contiguous shard ranges over `n` rows for `workers` workers. Shard sizes
/// differ by at most one; earlier shards take the remainder.
pub fn shard_ranges(n: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.max(1);
    let (base, rem) = (n / workers, n % workers);
    let mut start = 0;
    (0..workers)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Shared reduction buffer for one step. Slots are summed in ascending
/// worker order starting from slot 0, so every worker gets the same bits.
struct Collective {
    slots: Mutex<Vec<Vec<f64>>>,
    barrier: Barrier,
}

impl Collective {
    fn new(workers: usize) -> Self {
        Self {
            slots: Mutex::new(vec![Vec::new(); workers]),
            barrier: Barrier::new(workers),
        }
    }
}

struct Member<'a> {
    shared: &'a Collective,
    index: usize,
}

impl BatchReduce for Member<'_> {
    fn all_reduce(&self, local: Vec<f64>) -> Vec<f64> {
        self.shared.slots.lock().unwrap()[self.index] = local;
        self.shared.barrier.wait();
        let sum = {
            let slots = self.shared.slots.lock().unwrap();
            let mut acc = slots[0].clone();
            for s in &slots[1..] {
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            acc
        };
        // nobody may overwrite a slot before everyone has read it
        self.shared.barrier.wait();
        sum
    }
}

/// Result of one synchronous step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Mean squared error over the whole global batch, before the update.
    pub loss: f64,
    /// Combined gradient that every replica applied.
    pub gradients: Gradients,
    /// Workers that received a non-empty shard.
    pub active_workers: usize,
}

#[derive(Debug, Clone)]
pub struct WorkerGroup {
    replicas: Vec<Model>,
    optimizers: Vec<OptimizerState>,
}

impl WorkerGroup {
    pub fn new(model: Model, workers: usize, optimizer: OptimizerConfig) -> Result<Self, ParallelError> {
        if workers == 0 {
            return Err(ParallelError::NoWorkers);
        }
        let state = OptimizerState::new(optimizer, model.params())
            .map_err(|source| ParallelError::Optim { worker: 0, source })?;
        Ok(Self {
            replicas: vec![model; workers],
            optimizers: vec![state; workers],
        })
    }

    pub fn workers(&self) -> usize {
        self.replicas.len()
    }

    pub fn model(&self) -> &Model {
        &self.replicas[0]
    }

    pub fn into_model(mut self) -> Model {
        self.replicas.swap_remove(0)
    }

    pub fn replicas(&self) -> &[Model] {
        &self.replicas
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.replicas.iter().map(Model::checksum).collect()
    }

    /// Test hook: overwrite one replica.
    #[doc(hidden)]
    pub fn replica_mut(&mut self, worker: usize) -> &mut Model {
        &mut self.replicas[worker]
    }
}

/// One synchronous update on a global mini-batch. Batches smaller than the
/// worker count leave the surplus workers without a shard for that step.
pub fn parallel_step(group: &mut WorkerGroup, inputs: &Tensor, targets: &Tensor) -> Result<StepOutcome, ParallelError> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(ParallelError::EmptyBatch);
    }
    let active = group.workers().min(n);
    let shards: Vec<(Tensor, Tensor)> = shard_ranges(n, active)
        .into_iter()
        .map(|r| (inputs.slice_rows(r.start, r.end), targets.slice_rows(r.start, r.end)))
        .collect();
    parallel_step_shards(group, &shards)
}

fn check_shard(model: &Model, x: &Tensor, y: &Tensor) -> Result<(), ParallelError> {
    if x.rank() == 0 || x.shape()[1..] != *model.input_shape() || x.shape()[0] == 0 {
        return Err(ParallelError::InputShape {
            expected: model.input_shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let expected = [x.shape()[0], model.output_features()];
    if y.shape() != expected {
        return Err(LossShapeError {
            pred: expected.to_vec(),
            target: y.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

type WorkerResult = (f64, Gradients, Option<ForwardCache>);

fn worker_pass(
    model: &mut Model,
    x: &Tensor,
    y: &Tensor,
    total: usize,
    reduce: &dyn BatchReduce,
    keep_cache: bool,
) -> Result<WorkerResult, ParallelError> {
    let (pred, cache) = model.forward_with(x, Mode::Train, reduce)?;
    let (sum_sq, grad) = mse_partial(&pred, y, total)?;
    let grads = model.backward_with(&cache, &grad, reduce)?;
    model.apply_batch_stats(&cache);
    Ok((sum_sq, grads, keep_cache.then_some(cache)))
}

/// Like [`parallel_step`] but with explicit per-worker shards, one for each
/// of the first `shards.len()` workers.
pub fn parallel_step_shards(
    group: &mut WorkerGroup,
    shards: &[(Tensor, Tensor)],
) -> Result<StepOutcome, ParallelError> {
    let active = shards.len();
    if active == 0 || active > group.workers() {
        return Err(ParallelError::ShardCount {
            shards: active,
            workers: group.workers(),
        });
    }
    for (x, y) in shards {
        check_shard(group.model(), x, y)?;
    }
    let total: usize = shards.iter().map(|(_, y)| y.len()).sum();
    let idle = active < group.workers();

    let results: Vec<Result<WorkerResult, ParallelError>> = if active == 1 {
        let (x, y) = &shards[0];
        vec![worker_pass(&mut group.replicas[0], x, y, total, &LocalReduce, idle)]
    } else {
        let collective = Collective::new(active);
        thread::scope(|s| {
            let handles: Vec<_> = group.replicas[..active]
                .iter_mut()
                .zip(shards)
                .enumerate()
                .map(|(index, (model, (x, y)))| {
                    let collective = &collective;
                    s.spawn(move || {
                        let member = Member {
                            shared: collective,
                            index,
                        };
                        worker_pass(model, x, y, total, &member, idle && index == 0)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut sum_sq = 0.0;
    let mut combined: Option<Gradients> = None;
    let mut cache = None;
    for r in results {
        let (s, g, c) = r?;
        sum_sq += s;
        cache = cache.or(c);
        match &mut combined {
            None => combined = Some(g),
            Some(acc) => {
                for (la, lg) in acc.iter_mut().zip(&g) {
                    for (a, t) in la.iter_mut().zip(lg) {
                        a.add_assign(t);
                    }
                }
            }
        }
    }
    let gradients = combined.expect("at least one shard");

    if let Some(cache) = &cache {
        for replica in &mut group.replicas[active..] {
            replica.apply_batch_stats(cache);
        }
    }
    for (worker, (replica, opt)) in group.replicas.iter_mut().zip(&mut group.optimizers).enumerate() {
        opt.step(replica.params_mut(), &gradients)
            .map_err(|source| ParallelError::Optim { worker, source })?;
    }
    let sums = group.checksums();
    if sums.iter().any(|&c| c != sums[0]) {
        return Err(ParallelError::Divergence(sums));
    }
    Ok(StepOutcome {
        loss: sum_sq / total as f64,
        gradients,
        active_workers: active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationInput {
    /// Estimated dense training seconds.
    pub t_dense: f64,
    /// Estimated coarse training seconds.
    pub t_coarse: f64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("training time estimates must be positive and finite, got dense {t_dense} and coarse {t_coarse}")]
    Times { t_dense: f64, t_coarse: f64 },
    #[error("{workers} workers cannot form two groups in multiples of {granularity}")]
    Workers { workers: usize, granularity: usize },
}

/// Splits the worker budget between the dense and coarse groups in
/// proportion to their estimated training times.
pub fn allocate_workers(input: &AllocationInput) -> Result<(usize, usize), AllocationError> {
    allocate_workers_granular(input, 1)
}

/// As [`allocate_workers`], with both group sizes multiples of `granularity`.
pub fn allocate_workers_granular(
    input: &AllocationInput,
    granularity: usize,
) -> Result<(usize, usize), AllocationError> {
    let AllocationInput {
        t_dense,
        t_coarse,
        workers,
    } = *input;
    if !(t_dense > 0.0 && t_coarse > 0.0 && t_dense.is_finite() && t_coarse.is_finite()) {
        return Err(AllocationError::Times { t_dense, t_coarse });
    }
    let g = granularity;
    if g == 0 || workers % g != 0 || workers < 2 * g {
        return Err(AllocationError::Workers { workers, granularity });
    }
    let units = workers / g;
    let share = units as f64 * t_dense / (t_dense + t_coarse);
    let dense_units = ((share + 0.5).floor() as usize).clamp(1, units - 1);
    Ok((dense_units * g, (units - dense_units) * g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mse_loss, LayerSpec};

    fn scalar_linear() -> Model {
        let mut m = Model::new(
            vec![
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    in_features: 1,
                    out_features: 1,
                },
            ],
            vec![1, 1],
            0,
        )
        .unwrap();
        for t in &mut m.params_mut()[1] {
            t.data_mut().fill(0.0);
        }
        m
    }

    fn xy(xs: &[f64], ys: &[f64]) -> (Tensor, Tensor) {
        (
            Tensor::new(vec![xs.len(), 1, 1], xs.to_vec()).unwrap(),
            Tensor::new(vec![ys.len(), 1], ys.to_vec()).unwrap(),
        )
    }

    #[test]
    fn shards_are_balanced_and_cover() {
        let r = shard_ranges(10, 4);
        assert_eq!(r, vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(shard_ranges(4, 4), vec![0..1, 1..2, 2..3, 3..4]);
    }

    #[test]
    fn linear_two_workers_match_full_batch() {
        let (x, y) = xy(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]);
        let mut group = WorkerGroup::new(scalar_linear(), 2, OptimizerConfig::sgd(0.01, 0.0)).unwrap();
        let out = parallel_step(&mut group, &x, &y).unwrap();
        // dL/dw = mean(2 (w x - y) x) = -2 * mean(2 x^2) = -30 at w = 0
        assert!((out.gradients[1][0].data()[0] + 30.0).abs() < 1e-10);
        assert!((out.gradients[1][1].data()[0] + 10.0).abs() < 1e-10);
        assert!((out.loss - 30.0).abs() < 1e-12);
        assert!((group.model().params()[1][0].data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_worker_is_bitwise_serial() {
        let (x, y) = xy(&[0.5, -1.0, 2.0], &[1.0, 0.0, 3.0]);
        let mut model = scalar_linear();
        model.params_mut()[1][0].data_mut()[0] = 0.3;
        let mut group = WorkerGroup::new(model.clone(), 1, OptimizerConfig::adam(0.1)).unwrap();
        parallel_step(&mut group, &x, &y).unwrap();

        let (pred, cache) = model.forward(&x, Mode::Train).unwrap();
        let (_, g) = mse_loss(&pred, &y).unwrap();
        let grads = model.backward(&cache, &g).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1), model.params()).unwrap();
        opt.step(model.params_mut(), &grads).unwrap();
        assert!(group.model().bit_eq(&model));
    }

    #[test]
    fn identical_shards_average_to_single_shard() {
        let (x, y) = xy(&[1.0, 3.0], &[0.5, 2.0]);
        let shards = vec![(x.clone(), y.clone()); 4];
        let mut group = WorkerGroup::new(scalar_linear(), 4, OptimizerConfig::sgd(1e-3, 0.0)).unwrap();
        let four = parallel_step_shards(&mut group, &shards).unwrap();
        let mut single = WorkerGroup::new(scalar_linear(), 1, OptimizerConfig::sgd(1e-3, 0.0)).unwrap();
        let one = parallel_step_shards(&mut single, &shards[..1]).unwrap();
        for (a, b) in four.gradients[1].iter().zip(&one.gradients[1]) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn short_batch_leaves_workers_idle_but_in_sync() {
        let (x, y) = xy(&[1.0, 2.0], &[1.0, 1.0]);
        let mut group = WorkerGroup::new(scalar_linear(), 3, OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        let out = parallel_step(&mut group, &x, &y).unwrap();
        assert_eq!(out.active_workers, 2);
        let sums = group.checksums();
        assert!(sums.iter().all(|&c| c == sums[0]));
    }

    #[test]
    fn divergence_detected() {
        let (x, y) = xy(&[1.0, 2.0], &[1.0, 1.0]);
        let mut group = WorkerGroup::new(scalar_linear(), 2, OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        group.replica_mut(1).params_mut()[1][0].data_mut()[0] = 1.0;
        assert!(matches!(
            parallel_step(&mut group, &x, &y),
            Err(ParallelError::Divergence(_))
        ));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (x, y) = xy(&[f64::NAN, 2.0], &[1.0, 1.0]);
        let mut group = WorkerGroup::new(scalar_linear(), 2, OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        assert!(matches!(
            parallel_step(&mut group, &x, &y),
            Err(ParallelError::Optim { .. })
        ));
    }

    fn alloc(t_dense: f64, t_coarse: f64, workers: usize) -> (usize, usize) {
        allocate_workers(&AllocationInput {
            t_dense,
            t_coarse,
            workers,
        })
        .unwrap()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(alloc(1.0, 1.0, 2), (1, 1));
        assert_eq!(alloc(3.0, 1.0, 8), (6, 2));
        // 32 * 197.61 / 289.13 = 21.87
        assert_eq!(alloc(197.61, 91.52, 32), (22, 10));
        assert_eq!(alloc(1000.0, 1.0, 4), (3, 1));
        assert_eq!(alloc(1.0, 1000.0, 4), (1, 3));
        // 0.5 rounds up
        assert_eq!(alloc(1.0, 3.0, 6), (2, 4));
        assert_eq!(alloc(1.0, 1.0, 3), (2, 1));
    }

    #[test]
    fn granularity_four_gives_deployed_splits() {
        let input = |workers| AllocationInput {
            t_dense: 197.61,
            t_coarse: 91.52,
            workers,
        };
        assert_eq!(allocate_workers_granular(&input(32), 4).unwrap(), (20, 12));
        assert_eq!(allocate_workers_granular(&input(64), 4).unwrap(), (44, 20));
        assert!(allocate_workers_granular(&input(30), 4).is_err());
    }

    #[test]
    fn allocation_rejects_bad_input() {
        let bad = |t_dense, t_coarse, workers| {
            allocate_workers(&AllocationInput {
                t_dense,
                t_coarse,
                workers,
            })
            .is_err()
        };
        assert!(bad(0.0, 1.0, 4));
        assert!(bad(1.0, f64::NAN, 4));
        assert!(bad(1.0, 1.0, 1));
    }
}
