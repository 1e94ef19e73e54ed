//! Continuous datasets and their reduced-resolution variants.

pub mod format;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::layer::{avg_pool_forward, PoolSpec};
use crate::tensor::{Tensor, TensorError};

pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, FormatError};
pub use synthetic::{generate_synthetic, SyntheticTaskSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("axis {axis} has extent {extent}, not divisible by factor {factor}")]
    NotDivisible { axis: usize, extent: usize, factor: usize },
    #[error("{got} resolution factors given for {expected} spatial axes")]
    FactorRank { expected: usize, got: usize },
    #[error("resolution factors must be >= 1, got {0:?}")]
    ZeroFactor(Vec<usize>),
    #[error("cannot parse resolution factors from {0:?}")]
    ParseFactors(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Integer block sizes per spatial axis; the channel axis is never reduced.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResolutionFactors(Vec<usize>);

impl ResolutionFactors {
    pub fn new(factors: Vec<usize>) -> Result<Self, DataError> {
        if factors.is_empty() || factors.contains(&0) {
            return Err(DataError::ZeroFactor(factors));
        }
        Ok(Self(factors))
    }

    pub fn identity(spatial_axes: usize) -> Self {
        Self(vec![1; spatial_axes])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn product(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&k| k == 1)
    }

    /// Per-axis product: reducing by `self` then by `other`.
    pub fn compose(&self, other: &ResolutionFactors) -> Result<Self, DataError> {
        if self.0.len() != other.0.len() {
            return Err(DataError::FactorRank {
                expected: self.0.len(),
                got: other.0.len(),
            });
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect()))
    }

    /// Reduced spatial extents, or the first axis that does not divide.
    pub fn reduce_extents(&self, extents: &[usize]) -> Result<Vec<usize>, DataError> {
        if extents.len() != self.0.len() {
            return Err(DataError::FactorRank {
                expected: extents.len(),
                got: self.0.len(),
            });
        }
        extents
            .iter()
            .zip(&self.0)
            .enumerate()
            .map(|(axis, (&extent, &factor))| {
                if extent % factor == 0 {
                    Ok(extent / factor)
                } else {
                    Err(DataError::NotDivisible { axis, extent, factor })
                }
            })
            .collect()
    }

    /// Reduces a sample shape (spatial extents then channels).
    pub fn reduce_sample_shape(&self, shape: &[usize]) -> Result<Vec<usize>, DataError> {
        let (channels, spatial) = shape.split_last().ok_or(DataError::FactorRank {
            expected: 0,
            got: self.0.len(),
        })?;
        let mut out = self.reduce_extents(spatial)?;
        out.push(*channels);
        Ok(out)
    }
}

impl fmt::Display for ResolutionFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for ResolutionFactors {
    type Err = DataError;

    /// Comma-separated integers, one per spatial axis: `2,2,2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let factors = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DataError::ParseFactors(s.to_string()))?;
        Self::new(factors)
    }
}

/// Block-averages a batched tensor `(N, spatial.., C)` along its spatial axes.
fn downsample_batch(batch: &Tensor, factors: &ResolutionFactors) -> Result<Tensor, DataError> {
    let sample_shape = &batch.shape()[1..];
    let reduced = factors.reduce_sample_shape(sample_shape)?;
    if factors.is_identity() {
        return Ok(batch.clone());
    }
    let mut out_shape = vec![batch.shape()[0]];
    out_shape.extend_from_slice(&reduced);
    let pool = PoolSpec::blocks(factors.as_slice());
    Ok(avg_pool_forward(&pool, batch, &out_shape))
}

/// Replaces every `k_1 x .. x k_D` block of each channel by its mean.
pub fn downsample(sample: &Tensor, factors: &ResolutionFactors) -> Result<Tensor, DataError> {
    let mut batched = vec![1];
    batched.extend_from_slice(sample.shape());
    let batch = sample.clone().reshape(&batched)?;
    let out = downsample_batch(&batch, factors)?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(&shape)?)
}

/// Samples paired with label vectors, plus the accumulated reduction
/// relative to the original resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Tensor,
    resolution: ResolutionFactors,
}

impl Dataset {
    /// `samples` is `(N, spatial.., C)` with 1 to 3 spatial axes and
    /// `labels` is `(N, m)`.
    pub fn new(samples: Tensor, labels: Tensor) -> Result<Self, DataError> {
        let spatial = samples.rank().saturating_sub(2);
        let resolution = ResolutionFactors::identity(spatial.max(1));
        Self::with_resolution(samples, labels, resolution)
    }

    pub fn with_resolution(samples: Tensor, labels: Tensor, resolution: ResolutionFactors) -> Result<Self, DataError> {
        let rank = samples.rank();
        if !(3..=5).contains(&rank) {
            return Err(DataError::Invalid(format!(
                "samples need shape (N, 1-3 spatial axes, C), got {:?}",
                samples.shape()
            )));
        }
        if labels.rank() != 2 || labels.shape()[0] != samples.shape()[0] {
            return Err(DataError::Invalid(format!(
                "labels {:?} do not pair with samples {:?}",
                labels.shape(),
                samples.shape()
            )));
        }
        if resolution.as_slice().len() != rank - 2 {
            return Err(DataError::FactorRank {
                expected: rank - 2,
                got: resolution.as_slice().len(),
            });
        }
        Ok(Self {
            samples,
            labels,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample: spatial extents then channels.
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn label_len(&self) -> usize {
        self.labels.shape()[1]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn resolution(&self) -> &ResolutionFactors {
        &self.resolution
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.samples
            .slice_rows(i, i + 1)
            .reshape(self.sample_shape())
            .expect("row reshape")
    }

    pub fn label(&self, i: usize) -> &[f64] {
        let m = self.label_len();
        &self.labels.data()[i * m..(i + 1) * m]
    }

    /// Gathers the given sample indices into a batch `(inputs, targets)`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let row: usize = self.sample_shape().iter().product();
        let m = self.label_len();
        let mut x = Vec::with_capacity(indices.len() * row);
        let mut y = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            x.extend_from_slice(&self.samples.data()[i * row..(i + 1) * row]);
            y.extend_from_slice(self.label(i));
        }
        let mut xs = vec![indices.len()];
        xs.extend_from_slice(self.sample_shape());
        (
            Tensor::new(xs, x).expect("batch shape"),
            Tensor::new(vec![indices.len(), m], y).expect("label shape"),
        )
    }

    /// Contiguous rows `start..end`.
    pub fn subset(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            samples: self.samples.slice_rows(start, end),
            labels: self.labels.slice_rows(start, end),
            resolution: self.resolution.clone(),
        }
    }

    /// Every sample block-averaged by `factors`; labels copied unchanged.
    pub fn downsample(&self, factors: &ResolutionFactors) -> Result<Dataset, DataError> {
        let samples = downsample_batch(&self.samples, factors)?;
        Ok(Dataset {
            samples,
            labels: self.labels.clone(),
            resolution: self.resolution.compose(factors)?,
        })
    }

    /// Contiguous train/validation/test partition. Train and validation must
    /// be non-empty; the test split may be empty.
    pub fn split(&self, fractions: [f64; 3]) -> Result<Splits, DataError> {
        check_fractions(fractions)?;
        let n = self.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train.min(n));
        if n_train == 0 || n_val == 0 {
            return Err(DataError::Invalid(format!(
                "{n} samples cannot be split by {fractions:?} into non-empty train and validation sets"
            )));
        }
        let test = (n_train + n_val < n).then(|| self.subset(n_train + n_val, n));
        Ok(Splits {
            train: self.subset(0, n_train),
            val: self.subset(n_train, n_train + n_val),
            test,
        })
    }
}

pub fn check_fractions(fractions: [f64; 3]) -> Result<(), DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}
