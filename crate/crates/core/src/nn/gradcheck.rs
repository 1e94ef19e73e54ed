//! Central finite-difference checks of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{self, LayerSpec, Mode, ShapeError};
use super::loss::mse_loss;
use super::model::{Model, ModelError};
use super::reduce::LocalReduce;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively; finite-difference noise at `FD_STEP` sits far below it.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub layer: usize,
    pub kind: &'static str,
    /// Parameter index within the layer; `None` for the layer input.
    pub param: Option<usize>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Largest error per layer, in layer order.
    pub fn per_layer(&self) -> Vec<(usize, &'static str, f64)> {
        let mut out: Vec<(usize, &'static str, f64)> = Vec::new();
        for c in &self.checks {
            match out.last_mut() {
                Some(last) if last.0 == c.layer => last.2 = last.2.max(c.max_rel_error),
                _ => out.push((c.layer, c.kind, c.max_rel_error)),
            }
        }
        out
    }
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares train-mode backward of `model` under MSE against `targets` with
/// central differences on every parameter element.
pub fn gradient_check(
    model: &Model,
    batch: &Tensor,
    targets: &Tensor,
    tolerance: f64,
) -> Result<GradCheckReport, ModelError> {
    let (pred, cache) = model.forward(batch, Mode::Train)?;
    let (_, loss_grad) = mse_loss(&pred, targets).map_err(|e| ModelError::LossGradShape {
        expected: e.target,
        got: e.pred,
    })?;
    let grads = model.backward(&cache, &loss_grad)?;

    let loss_of = |m: &Model| -> f64 {
        let (p, _) = m.forward(batch, Mode::Train).expect("shape checked");
        mse_loss(&p, targets).expect("shape checked").0
    };

    let mut probe = model.clone();
    let mut checks = Vec::new();
    for (li, layer_grads) in grads.iter().enumerate() {
        for (pi, g) in layer_grads.iter().enumerate() {
            let mut numeric = vec![0.0; g.len()];
            for (e, n) in numeric.iter_mut().enumerate() {
                let orig = probe.params()[li][pi].data()[e];
                probe.params_mut()[li][pi].data_mut()[e] = orig + FD_STEP;
                let up = loss_of(&probe);
                probe.params_mut()[li][pi].data_mut()[e] = orig - FD_STEP;
                let down = loss_of(&probe);
                probe.params_mut()[li][pi].data_mut()[e] = orig;
                *n = (up - down) / (2.0 * FD_STEP);
            }
            checks.push(ParamCheck {
                layer: li,
                kind: model.layers()[li].kind_name(),
                param: Some(pi),
                max_rel_error: max_rel(g.data(), &numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance, checks })
}

/// Checks one layer in isolation under the loss `sum(output * R)` for a
/// seeded random projection `R`, covering the input gradient and every
/// parameter gradient. Batch norm is checked in train mode.
pub fn check_layer(
    spec: &LayerSpec,
    params: &[Tensor],
    buffers: &[Tensor],
    input: &Tensor,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, ShapeError> {
    let reduce = LocalReduce;
    let (y, cache) = layer::forward(spec, params, buffers, input, Mode::Train, &reduce)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let (dx, dparams) = layer::backward(spec, params, input, &y, cache.as_ref(), &projection, true, &reduce);

    let loss = |params: &[Tensor], x: &Tensor| -> f64 {
        let (y, _) = layer::forward(spec, params, buffers, x, Mode::Train, &reduce).expect("shape checked");
        y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
    };

    let kind = spec.kind_name();
    let mut checks = Vec::new();

    let mut x = input.clone();
    let mut numeric = vec![0.0; x.len()];
    for (e, n) in numeric.iter_mut().enumerate() {
        let orig = x.data()[e];
        x.data_mut()[e] = orig + FD_STEP;
        let up = loss(params, &x);
        x.data_mut()[e] = orig - FD_STEP;
        let down = loss(params, &x);
        x.data_mut()[e] = orig;
        *n = (up - down) / (2.0 * FD_STEP);
    }
    let dx = dx.expect("input gradient requested");
    checks.push(ParamCheck {
        layer: 0,
        kind,
        param: None,
        max_rel_error: max_rel(dx.data(), &numeric),
    });

    let mut ps = params.to_vec();
    for (pi, g) in dparams.iter().enumerate() {
        let mut numeric = vec![0.0; g.len()];
        for (e, n) in numeric.iter_mut().enumerate() {
            let orig = ps[pi].data()[e];
            ps[pi].data_mut()[e] = orig + FD_STEP;
            let up = loss(&ps, input);
            ps[pi].data_mut()[e] = orig - FD_STEP;
            let down = loss(&ps, input);
            ps[pi].data_mut()[e] = orig;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        checks.push(ParamCheck {
            layer: 0,
            kind,
            param: Some(pi),
            max_rel_error: max_rel(g.data(), &numeric),
        });
    }
    Ok(GradCheckReport { tolerance, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::ConvSpec;

    fn mini_model(seed: u64) -> Model {
        Model::new(
            vec![
                LayerSpec::Conv(ConvSpec::new(2, 3, &[3]).with_padding(&[1])),
                LayerSpec::Tanh,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected {
                    in_features: 18,
                    out_features: 4,
                },
                LayerSpec::Tanh,
                LayerSpec::FullyConnected {
                    in_features: 4,
                    out_features: 2,
                },
            ],
            vec![6, 2],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn mini_conv_fc_model_passes() {
        let model = mini_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = Tensor::from_fn(&[4, 6, 2], |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::from_fn(&[4, 2], |_| rng.gen_range(-1.0..1.0));
        let report = gradient_check(&model, &x, &y, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.per_layer());
        assert_eq!(report.per_layer().len(), 3);
    }

    #[test]
    fn zero_weights_zero_targets_pass_trivially() {
        let mut model = mini_model(1);
        for t in model.params_mut().iter_mut().flatten() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(&[2, 6, 2], |i| i as f64 * 0.1);
        let y = Tensor::zeros(&[2, 2]);
        let report = gradient_check(&model, &x, &y, 1e-4).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_error(), 0.0);
    }

    #[test]
    fn batch_norm_train_mode_passes() {
        let spec = LayerSpec::BatchNorm { channels: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![
            Tensor::from_fn(&[2], |_| rng.gen_range(0.5..1.5)),
            Tensor::from_fn(&[2], |_| rng.gen_range(-0.5..0.5)),
        ];
        let buffers = vec![Tensor::zeros(&[2]), Tensor::full(&[2], 1.0)];
        let x = Tensor::from_fn(&[8, 3, 2], |_| rng.gen_range(-2.0..2.0));
        let report = check_layer(&spec, &params, &buffers, &x, 9, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Perturbing the analytic side must show up as a large error.
        assert!(relative_error(1.0, 1.01) > 1e-4);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }
}
