//! Wall-clock behavior of concurrent stages. Kept in its own test binary
//! so no other test competes for the CPU while it measures.

use mrmf_core::data::synthetic::{generate_synthetic, SyntheticTaskSpec};
use mrmf_core::data::{Dataset, ResolutionFactors};
use mrmf_core::fusion::adjust_model;
use mrmf_core::nn::{ConvSpec, LayerSpec, Model, OptimizerConfig};
use mrmf_core::parallel::concurrent::{concurrent_stage, TrainJob};
use mrmf_core::train::{Clock, Phase, RunLabel, StopCondition, TrainOptions};

fn task() -> Dataset {
    generate_synthetic(&SyntheticTaskSpec {
        extents: vec![64],
        channels: 2,
        label_len: 3,
        components: 2,
        max_frequency: 4,
        amplitude: [0.5, 1.5],
        seed: 4,
        samples: 960,
        splits: [0.75, 0.25, 0.0],
    })
    .unwrap()
}

fn reference() -> Model {
    Model::new(
        vec![
            LayerSpec::Conv(ConvSpec::new(2, 8, &[5]).with_padding(&[2])),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(8, 8, &[4]).with_stride(&[4])),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                in_features: 128,
                out_features: 16,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                in_features: 16,
                out_features: 3,
            },
        ],
        vec![64, 2],
        1,
    )
    .unwrap()
}

fn options(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        stop: StopCondition::new(1e-300, epochs, epochs).unwrap(),
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: 16,
        workers: 1,
        seed,
        clock: Clock::Wall,
    }
}

struct Data {
    train: Dataset,
    val: Dataset,
    coarse_train: Dataset,
    coarse_val: Dataset,
}

fn data() -> Data {
    let splits = task().split([0.75, 0.25, 0.0]).unwrap();
    let f = ResolutionFactors::new(vec![2]).unwrap();
    Data {
        coarse_train: splits.train.downsample(&f).unwrap(),
        coarse_val: splits.val.downsample(&f).unwrap(),
        train: splits.train,
        val: splits.val,
    }
}

fn jobs(d: &Data, coarse_epochs: usize, dense_epochs: usize) -> (TrainJob<'_>, TrainJob<'_>) {
    let r = reference();
    let coarse = TrainJob {
        model: adjust_model(&r, &[32, 2], 2).unwrap(),
        train: &d.coarse_train,
        val: &d.coarse_val,
        options: options(coarse_epochs, 3),
        label: RunLabel {
            stage: 0,
            phase: Phase::Coarse,
        },
    };
    let dense = TrainJob {
        model: r,
        train: &d.train,
        val: &d.val,
        options: options(dense_epochs, 4),
        label: RunLabel {
            stage: 0,
            phase: Phase::Dense,
        },
    };
    (coarse, dense)
}

#[test]
fn tiny_jobs_overlap_in_time() {
    let d = data();
    let (c, dn) = jobs(&d, 1, 1);
    let run = concurrent_stage(c, dn, (1, 1)).unwrap();
    let (a, b) = (run.coarse_timing, run.dense_timing);
    assert!(a.started < b.finished && b.started < a.finished, "{a:?} {b:?}");
    assert!(run.elapsed >= a.finished.max(b.finished));
    assert_eq!((run.coarse.epochs(), run.dense.epochs()), (1, 1));
}

#[test]
fn stage_time_follows_the_slower_job() {
    let d = data();
    let (c, dn) = jobs(&d, 1, 5);
    let run = concurrent_stage(c, dn, (1, 1)).unwrap();
    assert_eq!((run.coarse.epochs(), run.dense.epochs()), (1, 5));
    let slow = run.dense_timing.duration().max(run.coarse_timing.duration());
    assert!(
        (run.elapsed - slow).abs() <= 0.2 * slow,
        "stage took {:.3} s, slower job {:.3} s",
        run.elapsed,
        slow
    );
    // the early finisher waited at the barrier
    assert!(run.coarse_timing.finished < run.elapsed);
}
