//! Sinusoidal parameter-inversion tasks.
//!
//! Each label entry scales a fixed family of low-frequency sinusoids; a
//! sample is the superposition of all families, so predicting the label
//! means inverting the generating process. Frequencies, phases and channel
//! mixing are drawn once per task from the seed; labels are drawn per sample.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_fractions, DataError, Dataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Spatial extents, 1 to 3 axes.
    pub extents: Vec<usize>,
    pub channels: usize,
    pub label_len: usize,
    /// Sinusoids per label entry.
    pub components: usize,
    /// Highest frequency in cycles per domain length.
    pub max_frequency: usize,
    /// Amplitude range that the unit label interval maps onto.
    pub amplitude: [f64; 2],
    pub seed: u64,
    pub samples: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

const TASK_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;

#[derive(Debug, Clone)]
struct Component {
    frequency: Vec<f64>,
    phase: f64,
    weights: Vec<f64>,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidTask(m));
        if !(1..=3).contains(&self.extents.len()) {
            return bad(format!("need 1 to 3 spatial axes, got {}", self.extents.len()));
        }
        if self.channels == 0 || self.label_len == 0 || self.components == 0 || self.samples == 0 {
            return bad("channels, label_len, components and samples must be >= 1".into());
        }
        if self.max_frequency == 0 {
            return bad("max_frequency must be >= 1".into());
        }
        for (axis, &extent) in self.extents.iter().enumerate() {
            if self.max_frequency * 8 > extent {
                return bad(format!(
                    "max_frequency {} exceeds extent/8 on axis {axis} (extent {extent})",
                    self.max_frequency
                ));
            }
        }
        let [lo, hi] = self.amplitude;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!(
                "amplitude range {:?} is not ordered and finite",
                self.amplitude
            ));
        }
        check_fractions(self.splits).map_err(|e| DataError::InvalidTask(e.to_string()))
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        let mut s = self.extents.clone();
        s.push(self.channels);
        s
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Per label entry, its family of sinusoids.
    fn components(&self) -> Vec<Vec<Component>> {
        let mut rng = self.rng(TASK_STREAM);
        (0..self.label_len)
            .map(|_| {
                (0..self.components)
                    .map(|_| Component {
                        frequency: self
                            .extents
                            .iter()
                            .map(|_| rng.gen_range(1..=self.max_frequency) as f64)
                            .collect(),
                        phase: rng.gen_range(0.0..2.0 * PI),
                        weights: (0..self.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    })
                    .collect()
            })
            .collect()
    }

    /// Regenerates the sample belonging to a label in `[0, 1]^m`.
    pub fn synthesize(&self, label: &[f64]) -> Tensor {
        self.synthesize_with(&self.components(), label)
    }

    fn synthesize_with(&self, families: &[Vec<Component>], label: &[f64]) -> Tensor {
        assert_eq!(label.len(), self.label_len, "label length");
        let [lo, hi] = self.amplitude;
        let norm = 1.0 / ((self.label_len * self.components) as f64).sqrt();
        let shape = self.sample_shape();
        let c = self.channels;
        let mut out = Tensor::zeros(&shape);
        let mut pos = vec![0usize; self.extents.len()];
        for cell in out.data_mut().chunks_exact_mut(c) {
            for (u, family) in label.iter().zip(families) {
                let amp = (lo + (hi - lo) * u) * norm;
                for comp in family {
                    let mut arg = comp.phase;
                    for ((&p, &f), &l) in pos.iter().zip(&comp.frequency).zip(&self.extents) {
                        arg += 2.0 * PI * f * (p as f64 + 0.5) / l as f64;
                    }
                    let s = amp * arg.sin();
                    for (v, w) in cell.iter_mut().zip(&comp.weights) {
                        *v += s * w;
                    }
                }
            }
            // advance the row-major spatial position
            for d in (0..pos.len()).rev() {
                pos[d] += 1;
                if pos[d] < self.extents[d] {
                    break;
                }
                pos[d] = 0;
            }
        }
        out
    }
}

/// Deterministic dataset of `spec.samples` samples at full resolution.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let families = spec.components();
    let mut rng = spec.rng(LABEL_STREAM);
    let m = spec.label_len;
    let labels = Tensor::from_fn(&[spec.samples, m], |_| rng.gen_range(0.0..1.0));
    let row: usize = spec.sample_shape().iter().product();
    let mut data = Vec::with_capacity(spec.samples * row);
    for i in 0..spec.samples {
        let label = &labels.data()[i * m..(i + 1) * m];
        data.extend(spec.synthesize_with(&families, label).into_data());
    }
    let mut shape = vec![spec.samples];
    shape.extend(spec.sample_shape());
    Dataset::new(Tensor::new(shape, data)?, labels)
}
