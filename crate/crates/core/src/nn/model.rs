use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::layer::{self, BatchNormCache, LayerSpec, Mode, PoolSpec, ShapeError};
use super::reduce::{BatchReduce, LocalReduce};
use crate::tensor::{checksum, Tensor};

/// One gradient list per layer, one tensor per trainable parameter.
pub type Gradients = Vec<Vec<Tensor>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model structure: {0}")]
    Structure(String),
    #[error("layer {layer} ({kind}): {source}")]
    Shape {
        layer: usize,
        kind: &'static str,
        #[source]
        source: ShapeError,
    },
    #[error("input sample shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("layer {layer}: parameter {index} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        layer: usize,
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("backward needs a train-mode forward cache")]
    EvalCache,
    #[error("forward cache does not belong to the current model parameters")]
    StaleCache,
    #[error("loss gradient shape {got:?} does not match output shape {expected:?}")]
    LossGradShape { expected: Vec<usize>, got: Vec<usize> },
}

/// Checks the Flatten-centred layout: spatial layers, one Flatten, then a
/// non-empty fully connected head.
pub fn validate_structure(layers: &[LayerSpec]) -> Result<usize, ModelError> {
    let flatten: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Flatten))
        .map(|(i, _)| i)
        .collect();
    let &[flat] = flatten.as_slice() else {
        return Err(ModelError::Structure(format!(
            "expected exactly one flatten layer, found {}",
            flatten.len()
        )));
    };
    for (i, l) in layers.iter().enumerate() {
        let spatial = matches!(
            l,
            LayerSpec::Conv(_) | LayerSpec::AvgPool(_) | LayerSpec::BatchNorm { .. }
        );
        if spatial && i > flat {
            return Err(ModelError::Structure(format!(
                "layer {i} ({}) must precede the flatten layer",
                l.kind_name()
            )));
        }
        if matches!(l, LayerSpec::FullyConnected { .. }) && i < flat {
            return Err(ModelError::Structure(format!(
                "layer {i} (fc) must follow the flatten layer"
            )));
        }
    }
    if !layers[flat + 1..]
        .iter()
        .any(|l| matches!(l, LayerSpec::FullyConnected { .. }))
    {
        return Err(ModelError::Structure("no fully connected layer after flatten".into()));
    }
    Ok(flat)
}

/// Per-layer output sample shapes, starting from `input_shape`.
pub fn propagate_shapes(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>, ModelError> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (i, l) in layers.iter().enumerate() {
        cur = l.output_shape(&cur).map_err(|source| ModelError::Shape {
            layer: i,
            kind: l.kind_name(),
            source,
        })?;
        if cur.contains(&0) {
            return Err(ModelError::Shape {
                layer: i,
                kind: l.kind_name(),
                source: ShapeError::Invalid("zero-sized output".into()),
            });
        }
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// Activations and batch statistics recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer followed by the network output.
    activations: Vec<Tensor>,
    batch_norm: Vec<Option<BatchNormCache>>,
    mode: Mode,
    fingerprint: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache holds the output")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    buffers: Vec<Vec<Tensor>>,
    input_shape: Vec<usize>,
}

impl Model {
    /// Builds a model with freshly seeded parameters.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Self, ModelError> {
        validate_structure(&layers)?;
        propagate_shapes(&layers, &input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, buffers) = layers.iter().map(|l| l.init_params(&mut rng)).unzip();
        Ok(Self {
            layers,
            params,
            buffers,
            input_shape,
        })
    }

    /// Assembles a model from existing tensors, checking every shape.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        params: Vec<Vec<Tensor>>,
        buffers: Vec<Vec<Tensor>>,
    ) -> Result<Self, ModelError> {
        validate_structure(&layers)?;
        propagate_shapes(&layers, &input_shape)?;
        if params.len() != layers.len() || buffers.len() != layers.len() {
            return Err(ModelError::Structure(format!(
                "{} layers but {} parameter and {} buffer lists",
                layers.len(),
                params.len(),
                buffers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            check_shapes(i, &l.param_shapes(), &params[i])?;
            check_shapes(i, &l.buffer_shapes(), &buffers[i])?;
        }
        Ok(Self {
            layers,
            params,
            buffers,
            input_shape,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Vec<Tensor>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.buffers
    }

    pub fn flatten_index(&self) -> usize {
        validate_structure(&self.layers).expect("model structure is validated on construction")
    }

    pub fn output_features(&self) -> usize {
        let shapes = propagate_shapes(&self.layers, &self.input_shape).expect("validated");
        shapes.last().unwrap()[0]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// FNV checksum over every parameter and buffer bit pattern.
    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter().chain(&self.buffers).flatten().flat_map(|t| t.data()))
    }

    /// Multiply-accumulates of one single-sample forward pass.
    pub fn forward_macs(&self) -> u64 {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for l in &self.layers {
            total += l.forward_macs(&shape);
            shape = l.output_shape(&shape).expect("validated");
        }
        total
    }

    /// Bitwise equality of architecture and all tensors.
    pub fn bit_eq(&self, other: &Model) -> bool {
        let tensors_eq = |a: &[Vec<Tensor>], b: &[Vec<Tensor>]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(s, t)| s.bit_eq(t)))
        };
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && tensors_eq(&self.params, &other.params)
            && tensors_eq(&self.buffers, &other.buffers)
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache), ModelError> {
        self.forward_with(batch, mode, &LocalReduce)
    }

    /// Forward pass whose batch-norm statistics are reduced through `reduce`.
    pub fn forward_with(
        &self,
        batch: &Tensor,
        mode: Mode,
        reduce: &dyn BatchReduce,
    ) -> Result<(Tensor, ForwardCache), ModelError> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut batch_norm = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let (y, bn) = layer::forward(l, &self.params[i], &self.buffers[i], x, mode, reduce).map_err(|source| {
                ModelError::Shape {
                    layer: i,
                    kind: l.kind_name(),
                    source,
                }
            })?;
            activations.push(y);
            batch_norm.push(bn);
        }
        let out = activations.last().unwrap().clone();
        let cache = ForwardCache {
            activations,
            batch_norm,
            mode,
            fingerprint: self.checksum(),
        };
        Ok((out, cache))
    }

    /// Eval-mode forward without keeping intermediate activations.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = layer::forward(l, &self.params[i], &self.buffers[i], &x, Mode::Eval, &LocalReduce)
                .map_err(|source| ModelError::Shape {
                    layer: i,
                    kind: l.kind_name(),
                    source,
                })?
                .0;
        }
        Ok(x)
    }

    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Tensor) -> Result<Gradients, ModelError> {
        self.backward_with(cache, loss_grad, &LocalReduce)
    }

    pub fn backward_with(
        &self,
        cache: &ForwardCache,
        loss_grad: &Tensor,
        reduce: &dyn BatchReduce,
    ) -> Result<Gradients, ModelError> {
        if cache.mode != Mode::Train {
            return Err(ModelError::EvalCache);
        }
        if cache.activations.len() != self.layers.len() + 1 || cache.fingerprint != self.checksum() {
            return Err(ModelError::StaleCache);
        }
        if loss_grad.shape() != cache.output().shape() {
            return Err(ModelError::LossGradShape {
                expected: cache.output().shape().to_vec(),
                got: loss_grad.shape().to_vec(),
            });
        }
        let mut grads: Gradients = vec![Vec::new(); self.layers.len()];
        let mut gy = loss_grad.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (dx, dp) = layer::backward(
                l,
                &self.params[i],
                &cache.activations[i],
                &cache.activations[i + 1],
                cache.batch_norm[i].as_ref(),
                &gy,
                i > 0,
                reduce,
            );
            grads[i] = dp;
            if let Some(dx) = dx {
                gy = dx;
            }
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// batch-norm statistics.
    pub fn apply_batch_stats(&mut self, cache: &ForwardCache) {
        for (buffers, bn) in self.buffers.iter_mut().zip(&cache.batch_norm) {
            if let Some(bn) = bn {
                layer::update_running_stats(buffers, bn);
            }
        }
    }

    /// The same model fed through a leading non-overlapping average pool, so
    /// it accepts input `factors` times finer along each spatial axis.
    pub fn with_input_pool(&self, factors: &[usize]) -> Result<Model, ModelError> {
        let spatial = self.input_shape.len() - 1;
        if factors.len() != spatial {
            return Err(ModelError::Structure(format!(
                "{} pooling factors for {} spatial axes",
                factors.len(),
                spatial
            )));
        }
        let mut input_shape: Vec<usize> = self.input_shape[..spatial]
            .iter()
            .zip(factors)
            .map(|(l, k)| l * k)
            .collect();
        input_shape.push(self.input_shape[spatial]);
        let mut layers = vec![LayerSpec::AvgPool(PoolSpec::blocks(factors))];
        layers.extend(self.layers.iter().cloned());
        let mut params = vec![Vec::new()];
        params.extend(self.params.iter().cloned());
        let mut buffers = vec![Vec::new()];
        buffers.extend(self.buffers.iter().cloned());
        Model::from_parts(layers, input_shape, params, buffers)
    }

    /// Inverse of [`Model::with_input_pool`].
    pub fn without_input_pool(&self) -> Result<Model, ModelError> {
        let LayerSpec::AvgPool(p) = &self.layers[0] else {
            return Err(ModelError::Structure("first layer is not a pooling layer".into()));
        };
        let spatial = self.input_shape.len() - 1;
        if p.kernel != p.stride || p.dims() != spatial {
            return Err(ModelError::Structure("leading pool is not a block reduction".into()));
        }
        let mut input_shape: Vec<usize> = self.input_shape[..spatial]
            .iter()
            .zip(&p.kernel)
            .map(|(l, k)| l / k)
            .collect();
        input_shape.push(self.input_shape[spatial]);
        Model::from_parts(
            self.layers[1..].to_vec(),
            input_shape,
            self.params[1..].to_vec(),
            self.buffers[1..].to_vec(),
        )
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        if batch.shape()[1..] != self.input_shape[..] {
            return Err(ModelError::InputShape {
                expected: self.input_shape.clone(),
                got: batch.shape()[1..].to_vec(),
            });
        }
        Ok(())
    }
}

fn check_shapes(layer: usize, expected: &[Vec<usize>], got: &[Tensor]) -> Result<(), ModelError> {
    if expected.len() != got.len() {
        return Err(ModelError::Structure(format!(
            "layer {layer}: expected {} tensors, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (index, (e, t)) in expected.iter().zip(got).enumerate() {
        if e.as_slice() != t.shape() {
            return Err(ModelError::ParamShape {
                layer,
                index,
                expected: e.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::ConvSpec;
    use crate::nn::loss::mse_loss;

    fn mini() -> Model {
        Model::new(
            vec![
                LayerSpec::Conv(ConvSpec::new(1, 2, &[3])),
                LayerSpec::Tanh,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    in_features: 16,
                    out_features: 3,
                },
            ],
            vec![10, 1],
            5,
        )
        .unwrap()
    }

    #[test]
    fn structure_rules() {
        let fc = LayerSpec::FullyConnected {
            in_features: 4,
            out_features: 1,
        };
        assert!(validate_structure(std::slice::from_ref(&fc)).is_err());
        assert!(validate_structure(&[LayerSpec::Flatten]).is_err());
        assert!(validate_structure(&[LayerSpec::Flatten, LayerSpec::Flatten, fc.clone()]).is_err());
        assert!(validate_structure(&[LayerSpec::Flatten, fc.clone(), LayerSpec::BatchNorm { channels: 1 }]).is_err());
        assert_eq!(validate_structure(&[LayerSpec::Flatten, fc]).unwrap(), 0);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = mini();
        let x = Tensor::zeros(&[2, 9, 1]);
        assert!(matches!(m.forward(&x, Mode::Eval), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn first_offending_layer_identified() {
        let err = Model::new(
            vec![
                LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
                LayerSpec::Conv(ConvSpec::new(1, 1, &[5])),
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    in_features: 1,
                    out_features: 1,
                },
            ],
            vec![6, 1],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Shape { layer: 1, .. }));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let m = mini();
        let x = Tensor::from_fn(&[4, 10, 1], |i| (i as f64 * 0.37).sin());
        let a = m.forward(&x, Mode::Train).unwrap().0;
        let b = m.forward(&x, Mode::Train).unwrap().0;
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[4, 3]);
    }

    #[test]
    fn zero_loss_grad_gives_zero_grads() {
        let m = mini();
        let x = Tensor::from_fn(&[2, 10, 1], |i| i as f64 / 7.0);
        let (y, cache) = m.forward(&x, Mode::Train).unwrap();
        let grads = m.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(grads.iter().flatten().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_and_eval_caches_rejected() {
        let mut m = mini();
        let x = Tensor::from_fn(&[2, 10, 1], |i| i as f64);
        let (y, eval_cache) = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(
            m.backward(&eval_cache, &Tensor::zeros(y.shape())),
            Err(ModelError::EvalCache)
        );
        let (_, cache) = m.forward(&x, Mode::Train).unwrap();
        m.params_mut()[0][1].data_mut()[0] += 1.0;
        assert_eq!(
            m.backward(&cache, &Tensor::zeros(y.shape())),
            Err(ModelError::StaleCache)
        );
    }

    #[test]
    fn scalar_linear_gradient() {
        // y = w x with w = 1, x = 1, target 0: d/dw (w x - y)^2 = 2
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
        m.params_mut()[1][0].data_mut()[0] = 1.0;
        m.params_mut()[1][1].data_mut()[0] = 0.0;
        let x = Tensor::full(&[1, 1, 1], 1.0);
        let (y, cache) = m.forward(&x, Mode::Train).unwrap();
        let (_, g) = mse_loss(&y, &Tensor::zeros(&[1, 1])).unwrap();
        let grads = m.backward(&cache, &g).unwrap();
        assert_eq!(grads[1][0].data(), &[2.0]);
    }

    #[test]
    fn input_pool_round_trip() {
        let m = mini();
        let pooled = m.with_input_pool(&[2]).unwrap();
        assert_eq!(pooled.input_shape(), &[20, 1]);
        assert!(pooled.without_input_pool().unwrap().bit_eq(&m));
    }
}
