use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("prediction shape {pred:?} does not match target shape {target:?}")]
pub struct LossShapeError {
    pub pred: Vec<usize>,
    pub target: Vec<usize>,
}

/// Mean squared error over every element, with its gradient.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), LossShapeError> {
    let (sum, grad) = mse_partial(pred, target, pred.len())?;
    Ok((sum / pred.len() as f64, grad))
}

/// Sum of squared errors of one shard, with the gradient of the mean taken
/// over `total_count` elements of the whole batch. Shard gradients of one
/// batch add up to the full-batch MSE gradient.
pub fn mse_partial(pred: &Tensor, target: &Tensor, total_count: usize) -> Result<(f64, Tensor), LossShapeError> {
    if pred.shape() != target.shape() {
        return Err(LossShapeError {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let scale = 2.0 / total_count as f64;
    let mut grad = pred.clone();
    let mut sum = 0.0;
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        sum += d * d;
        *g = scale * d;
    }
    Ok((sum, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_inputs_give_zero() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn direct_arithmetic() {
        let p = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let t = Tensor::zeros(&[2]);
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(grad.data(), &[1.0, 3.0]);
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = Tensor::from_fn(&[19], |_| rng.gen_range(-2.0..2.0));
        let t = Tensor::from_fn(&[19], |_| rng.gen_range(-2.0..2.0));
        let mut oracle = 0.0;
        for i in 0..19 {
            let d = p.data()[i] - t.data()[i];
            oracle += d * d;
        }
        oracle /= 19.0;
        let (loss, _) = mse_loss(&p, &t).unwrap();
        assert!((loss - oracle).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(mse_loss(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }
}
