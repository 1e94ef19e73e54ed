//! Coarse and dense trainings of one stage run side by side in disjoint
//! worker groups and meet at a completion barrier.

use std::fmt;
use std::thread;
use std::time::Instant;

use crate::data::Dataset;
use crate::nn::Model;
use crate::train::{train_until_stop, RunLabel, TrainError, TrainOptions, TrainOutcome};

/// One fully specified training.
#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    pub model: Model,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub options: TrainOptions,
    pub label: RunLabel,
}

impl TrainJob<'_> {
    fn run(self) -> Result<TrainOutcome, TrainError> {
        train_until_stop(self.model, self.train, self.val, &self.options, self.label)
    }
}

/// Start and finish of a job, in seconds since the stage began.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobTiming {
    pub started: f64,
    pub finished: f64,
}

impl JobTiming {
    pub fn duration(&self) -> f64 {
        self.finished - self.started
    }
}

#[derive(Debug, Clone)]
pub struct StageRun {
    pub coarse: TrainOutcome,
    pub dense: TrainOutcome,
    pub coarse_timing: JobTiming,
    pub dense_timing: JobTiming,
    /// Seconds from stage start until both jobs are past the barrier.
    pub elapsed: f64,
}

/// Failure of either job; both diagnostics are kept.
#[derive(Debug, Clone)]
pub struct ConcurrentError {
    pub coarse: Option<Box<TrainError>>,
    pub dense: Option<Box<TrainError>>,
}

impl fmt::Display for ConcurrentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(e) = &self.coarse {
            parts.push(format!("coarse job: {e}"));
        }
        if let Some(e) = &self.dense {
            parts.push(format!("dense job: {e}"));
        }
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ConcurrentError {}

type Timed = (Result<TrainOutcome, TrainError>, JobTiming);

fn timed(origin: Instant, job: TrainJob<'_>) -> Timed {
    let started = origin.elapsed().as_secs_f64();
    let out = job.run();
    (
        out,
        JobTiming {
            started,
            finished: origin.elapsed().as_secs_f64(),
        },
    )
}

fn collect(coarse: Timed, dense: Timed, elapsed: f64) -> Result<StageRun, ConcurrentError> {
    match (coarse.0, dense.0) {
        (Ok(c), Ok(d)) => Ok(StageRun {
            coarse: c,
            dense: d,
            coarse_timing: coarse.1,
            dense_timing: dense.1,
            elapsed,
        }),
        (c, d) => Err(ConcurrentError {
            coarse: c.err().map(Box::new),
            dense: d.err().map(Box::new),
        }),
    }
}

/// Runs both jobs simultaneously with `allocation = (dense workers, coarse
/// workers)` and returns once both have finished.
pub fn concurrent_stage(
    mut coarse: TrainJob<'_>,
    mut dense: TrainJob<'_>,
    allocation: (usize, usize),
) -> Result<StageRun, ConcurrentError> {
    dense.options.workers = allocation.0;
    coarse.options.workers = allocation.1;
    let origin = Instant::now();
    let (c, d) = thread::scope(|s| {
        let c = s.spawn(|| timed(origin, coarse));
        let d = s.spawn(|| timed(origin, dense));
        (
            c.join().expect("coarse job panicked"),
            d.join().expect("dense job panicked"),
        )
    });
    collect(c, d, origin.elapsed().as_secs_f64())
}

/// The same two jobs one after the other, coarse first.
pub fn sequential_stage(coarse: TrainJob<'_>, dense: TrainJob<'_>) -> Result<StageRun, ConcurrentError> {
    let origin = Instant::now();
    let c = timed(origin, coarse);
    let d = timed(origin, dense);
    collect(c, d, origin.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticTaskSpec};
    use crate::data::ResolutionFactors;
    use crate::nn::{LayerSpec, OptimizerConfig};
    use crate::train::{Clock, Phase, StopCondition};

    fn data() -> (Dataset, Dataset) {
        let spec = SyntheticTaskSpec {
            extents: vec![16],
            channels: 1,
            label_len: 2,
            components: 1,
            max_frequency: 2,
            amplitude: [0.5, 1.5],
            seed: 8,
            samples: 24,
            splits: [0.75, 0.25, 0.0],
        };
        let s = generate_synthetic(&spec).unwrap().split(spec.splits).unwrap();
        (s.train, s.val)
    }

    fn job<'a>(train: &'a Dataset, val: &'a Dataset, phase: Phase, max_epochs: usize) -> TrainJob<'a> {
        let len = train.sample_shape()[0];
        TrainJob {
            model: Model::new(
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::FullyConnected {
                        in_features: len,
                        out_features: 2,
                    },
                ],
                vec![len, 1],
                3,
            )
            .unwrap(),
            train,
            val,
            options: TrainOptions {
                stop: StopCondition {
                    epsilon: 1e-12,
                    patience: 1,
                    max_epochs,
                },
                optimizer: OptimizerConfig::adam(0.01),
                batch_size: 6,
                workers: 1,
                seed: 5,
                clock: Clock::Work,
            },
            label: RunLabel { stage: 0, phase },
        }
    }

    #[test]
    fn concurrent_equals_sequential() {
        let (train, val) = data();
        let f = ResolutionFactors::new(vec![2]).unwrap();
        let (ct, cv) = (train.downsample(&f).unwrap(), val.downsample(&f).unwrap());
        let run = |concurrent: bool| {
            let mut c = job(&ct, &cv, Phase::Coarse, 3);
            let mut d = job(&train, &val, Phase::Dense, 4);
            if concurrent {
                concurrent_stage(c, d, (2, 1)).unwrap()
            } else {
                c.options.workers = 1;
                d.options.workers = 2;
                sequential_stage(c, d).unwrap()
            }
        };
        let (a, b) = (run(true), run(false));
        assert!(a.coarse.model.bit_eq(&b.coarse.model));
        assert!(a.dense.model.bit_eq(&b.dense.model));
        assert_eq!(a.dense.records, b.dense.records);
        assert!(a.elapsed >= a.coarse_timing.finished.max(a.dense_timing.finished));
    }

    #[test]
    fn failure_keeps_both_diagnostics() {
        let (train, val) = data();
        let mut c = job(&train, &val, Phase::Coarse, 2);
        c.options.optimizer = OptimizerConfig::sgd(1e200, 0.0);
        let d = job(&train, &val, Phase::Dense, 2);
        let err = concurrent_stage(c, d, (1, 1)).unwrap_err();
        assert!(err.coarse.is_some() && err.dense.is_none());
        assert!(err.to_string().starts_with("coarse job"));
    }
}
