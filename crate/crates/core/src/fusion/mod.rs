//! Coarse-model adjustment, layer-group splitting and model fusion.
//!
//! A model is split at its Flatten layer: the bottom group (convolution,
//! pooling, normalization, Flatten) has parameter shapes that do not depend
//! on the input resolution, the top group is the fully connected head. Only
//! the first fully connected layer changes shape with resolution.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{propagate_shapes, LayerSpec, Model, ModelError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("layer count differs: coarse has {coarse}, dense has {dense}")]
    LayerCount { coarse: usize, dense: usize },
    #[error("layer {layer}: coarse is {coarse}, dense is {dense}")]
    KindMismatch {
        layer: usize,
        coarse: &'static str,
        dense: &'static str,
    },
    #[error("layer {layer}: bottom-group hyperparameters differ between coarse and dense models")]
    BottomMismatch { layer: usize },
    #[error("coarse input {coarse:?} is not a block reduction of {reference:?}")]
    InputShape { reference: Vec<usize>, coarse: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Indices of the input-side layers (through Flatten) and of the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroups {
    pub bottom: Vec<usize>,
    pub top: Vec<usize>,
}

pub fn split_layer_groups(model: &Model) -> LayerGroups {
    let flat = model.flatten_index();
    LayerGroups {
        bottom: (0..=flat).collect(),
        top: (flat + 1..model.layers().len()).collect(),
    }
}

/// Sample shapes after every layer, with the size seen by the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    pub shapes: Vec<Vec<usize>>,
    pub flatten_size: usize,
}

pub fn propagate(layers: &[LayerSpec], input_shape: &[usize]) -> Result<ShapeChain, ModelError> {
    let shapes = propagate_shapes(layers, input_shape)?;
    let flat = layers
        .iter()
        .position(|l| matches!(l, LayerSpec::Flatten))
        .ok_or_else(|| ModelError::Structure("no flatten layer".into()))?;
    let flatten_size = shapes[flat][0];
    Ok(ShapeChain { shapes, flatten_size })
}

/// The reference architecture resized for a coarser input: every layer is
/// kept except that the first fully connected layer takes the flattened
/// size produced at the coarse resolution. Parameters are freshly seeded.
pub fn adjust_model(reference: &Model, coarse_input_shape: &[usize], seed: u64) -> Result<Model, FusionError> {
    let ref_shape = reference.input_shape();
    let reducible = ref_shape.len() == coarse_input_shape.len()
        && ref_shape.last() == coarse_input_shape.last()
        && ref_shape
            .iter()
            .zip(coarse_input_shape)
            .all(|(&r, &c)| c >= 1 && r % c == 0);
    if !reducible {
        return Err(FusionError::InputShape {
            reference: ref_shape.to_vec(),
            coarse: coarse_input_shape.to_vec(),
        });
    }
    let flat = reference.flatten_index();
    let bottom = &reference.layers()[..=flat];
    let flatten_size = propagate(bottom, coarse_input_shape)?.flatten_size;

    let mut layers = reference.layers().to_vec();
    let first_fc = layers[flat + 1..]
        .iter()
        .position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
        .map(|i| i + flat + 1)
        .expect("model structure guarantees a head");
    if let LayerSpec::FullyConnected { in_features, .. } = &mut layers[first_fc] {
        *in_features = flatten_size;
    }
    Ok(Model::new(layers, coarse_input_shape.to_vec(), seed)?)
}

/// Which model a fused layer's tensors are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Coarse,
    Dense,
    /// No parameters or buffers to copy.
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuseOptions {
    /// Re-seed the first fully connected layer instead of copying it from
    /// the dense model.
    pub reinit_first_fc: Option<u64>,
}

/// Checks that two models can be fused and returns the per-layer source.
pub fn fusion_plan(coarse: &Model, dense: &Model) -> Result<Vec<Source>, FusionError> {
    let (cl, dl) = (coarse.layers(), dense.layers());
    if cl.len() != dl.len() {
        return Err(FusionError::LayerCount {
            coarse: cl.len(),
            dense: dl.len(),
        });
    }
    for (layer, (c, d)) in cl.iter().zip(dl).enumerate() {
        if c.kind_name() != d.kind_name() {
            return Err(FusionError::KindMismatch {
                layer,
                coarse: c.kind_name(),
                dense: d.kind_name(),
            });
        }
    }
    let groups = split_layer_groups(dense);
    let mut plan = Vec::with_capacity(dl.len());
    for (layer, (c, d)) in cl.iter().zip(dl).enumerate() {
        let bottom = groups.bottom.contains(&layer);
        if bottom && c != d {
            return Err(FusionError::BottomMismatch { layer });
        }
        plan.push(
            match (d.param_shapes().is_empty() && d.buffer_shapes().is_empty(), bottom) {
                (true, _) => Source::None,
                (false, true) => Source::Coarse,
                (false, false) => Source::Dense,
            },
        );
    }
    Ok(plan)
}

/// Bottom group from `coarse`, first fully connected layer and the rest of
/// the head from `dense`. The result has the dense architecture and input.
pub fn fuse(coarse: &Model, dense: &Model) -> Result<Model, FusionError> {
    fuse_with(coarse, dense, FuseOptions::default())
}

pub fn fuse_with(coarse: &Model, dense: &Model, options: FuseOptions) -> Result<Model, FusionError> {
    let plan = fusion_plan(coarse, dense)?;
    let mut params = dense.params().to_vec();
    let mut buffers = dense.buffers().to_vec();
    for (i, source) in plan.iter().enumerate() {
        if *source == Source::Coarse {
            params[i] = coarse.params()[i].clone();
            buffers[i] = coarse.buffers()[i].clone();
        }
    }
    if let Some(seed) = options.reinit_first_fc {
        let first_fc = plan
            .iter()
            .zip(dense.layers())
            .position(|(s, l)| *s == Source::Dense && matches!(l, LayerSpec::FullyConnected { .. }))
            .expect("head has a fully connected layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params[first_fc] = dense.layers()[first_fc].init_params(&mut rng).0;
    }
    Ok(Model::from_parts(
        dense.layers().to_vec(),
        dense.input_shape().to_vec(),
        params,
        buffers,
    )?)
}

/// First layer whose tensors are not bitwise equal to the model named by
/// the fusion plan, if any.
pub fn provenance_violation(fused: &Model, coarse: &Model, dense: &Model) -> Option<usize> {
    let plan = fusion_plan(coarse, dense).ok()?;
    let same = |a: &[crate::tensor::Tensor], b: &[crate::tensor::Tensor]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
    };
    plan.iter().enumerate().find_map(|(i, s)| {
        let src = match s {
            Source::Coarse => coarse,
            Source::Dense => dense,
            Source::None => return None,
        };
        let ok = same(&fused.params()[i], &src.params()[i]) && same(&fused.buffers()[i], &src.buffers()[i]);
        (!ok).then_some(i)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, Mode};
    use crate::tensor::Tensor;

    fn fc(i: usize, o: usize) -> LayerSpec {
        LayerSpec::FullyConnected {
            in_features: i,
            out_features: o,
        }
    }

    fn mini(len: usize, fc_in: usize, seed: u64) -> Model {
        Model::new(
            vec![
                LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
                LayerSpec::Flatten,
                fc(fc_in, 4),
            ],
            vec![len, 1],
            seed,
        )
        .unwrap()
    }

    fn fill(model: &mut Model, layers: &[usize], v: f64) {
        for &l in layers {
            for t in &mut model.params_mut()[l] {
                t.data_mut().fill(v);
            }
        }
    }

    #[test]
    fn conv_shape_step() {
        let chain = propagate(
            &[LayerSpec::Conv(ConvSpec::new(1, 1, &[3])), LayerSpec::Flatten],
            &[10, 1],
        )
        .unwrap();
        assert_eq!(chain.shapes[0], vec![8, 1]);
    }

    #[test]
    fn three_layer_chain() {
        let layers = [
            LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
            LayerSpec::AvgPool(crate::nn::PoolSpec::blocks(&[2])),
            LayerSpec::Flatten,
        ];
        let chain = propagate(&layers, &[10, 1]).unwrap();
        let lens: Vec<usize> = chain.shapes.iter().map(|s| s[0]).collect();
        assert_eq!(lens, vec![8, 4, 4]);
        assert_eq!(chain.flatten_size, 4);
    }

    #[test]
    fn underflow_names_layer() {
        let layers = [
            LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
            LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
            LayerSpec::Flatten,
        ];
        assert!(matches!(
            propagate(&layers, &[4, 1]),
            Err(ModelError::Shape { layer: 1, .. })
        ));
    }

    #[test]
    fn adjust_mini_model() {
        let reference = mini(10, 8, 0);
        let coarse = adjust_model(&reference, &[5, 1], 1).unwrap();
        assert_eq!(coarse.layers()[2], fc(3, 4));
        assert_eq!(coarse.layers()[..2], reference.layers()[..2]);
    }

    #[test]
    fn adjust_identity_keeps_architecture() {
        let reference = mini(10, 8, 0);
        let same = adjust_model(&reference, &[10, 1], 7).unwrap();
        assert_eq!(same.layers(), reference.layers());
    }

    #[test]
    fn adjust_rejects_non_reduction() {
        let reference = mini(10, 8, 0);
        assert!(matches!(
            adjust_model(&reference, &[7, 1], 1),
            Err(FusionError::InputShape { .. })
        ));
        assert!(matches!(
            adjust_model(&reference, &[5, 2], 1),
            Err(FusionError::InputShape { .. })
        ));
    }

    #[test]
    fn group_sizes() {
        let m = mini(10, 8, 0);
        let g = split_layer_groups(&m);
        assert_eq!((g.bottom, g.top), (vec![0, 1], vec![2]));
    }

    #[test]
    fn constant_weight_provenance() {
        let mut coarse = mini(6, 4, 0);
        let mut dense = mini(10, 8, 1);
        fill(&mut coarse, &[0], 1.0);
        fill(&mut dense, &[0], 2.0);
        fill(&mut coarse, &[2], 3.0);
        fill(&mut dense, &[2], 4.0);
        let fused = fuse(&coarse, &dense).unwrap();
        assert!(fused.params()[0].iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
        assert!(fused.params()[2].iter().all(|t| t.data().iter().all(|&v| v == 4.0)));
        assert_eq!(fused.input_shape(), &[10, 1]);
        assert_eq!(provenance_violation(&fused, &coarse, &dense), None);
        let x = Tensor::zeros(&[1, 10, 1]);
        assert!(fused.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn self_fusion_is_identity() {
        let m = mini(10, 8, 3);
        assert!(fuse(&m, &m).unwrap().bit_eq(&m));
    }

    #[test]
    fn mismatches_rejected_with_layer() {
        let a = mini(10, 8, 0);
        let b = Model::new(
            vec![
                LayerSpec::Conv(ConvSpec::new(1, 1, &[3])),
                LayerSpec::Tanh,
                LayerSpec::Flatten,
                fc(8, 4),
            ],
            vec![10, 1],
            0,
        )
        .unwrap();
        assert_eq!(fuse(&a, &b), Err(FusionError::LayerCount { coarse: 3, dense: 4 }));

        let c = Model::new(
            vec![LayerSpec::Conv(ConvSpec::new(1, 1, &[2])), LayerSpec::Flatten, fc(9, 4)],
            vec![10, 1],
            0,
        )
        .unwrap();
        assert_eq!(fuse(&a, &c), Err(FusionError::BottomMismatch { layer: 0 }));
    }

    #[test]
    fn reinit_first_fc_option() {
        let coarse = mini(6, 4, 0);
        let dense = mini(10, 8, 1);
        let fused = fuse_with(
            &coarse,
            &dense,
            FuseOptions {
                reinit_first_fc: Some(9),
            },
        )
        .unwrap();
        assert!(!fused.params()[2][0].bit_eq(&dense.params()[2][0]));
        assert!(fused.params()[0][0].bit_eq(&coarse.params()[0][0]));
    }
}
