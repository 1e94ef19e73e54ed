//! The `.mrc` checkpoint format.
//!
//! ```text
//! "MRC1" | u8 R | R x u32 input shape | u32 layer count
//! per layer: u8 kind | hyperparameters | u8 tensor count
//!            | per tensor: u8 rank | rank x u32 dims | f64 values
//! ```
//!
//! All integers and floats are little-endian. Each layer stores its
//! trainable parameters followed by its buffers.

use std::fs;
use std::path::Path;

use crate::data::format::{check_magic, put_u32, FormatError, Reader};
use crate::nn::{ConvSpec, LayerSpec, Model, PoolSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MRC1";

const KIND_CONV: u8 = 0;
const KIND_AVG_POOL: u8 = 1;
const KIND_BATCH_NORM: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_TANH: u8 = 4;
const KIND_FLATTEN: u8 = 5;
const KIND_FC: u8 = 6;

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        put_u32(out, d);
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_dims(out, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_layer(out: &mut Vec<u8>, layer: &LayerSpec) {
    match layer {
        LayerSpec::Conv(c) => {
            out.push(KIND_CONV);
            out.push(c.dims() as u8);
            put_u32(out, c.in_channels);
            put_u32(out, c.out_channels);
            for v in c.kernel.iter().chain(&c.stride).chain(&c.padding) {
                put_u32(out, *v);
            }
        }
        LayerSpec::AvgPool(p) => {
            out.push(KIND_AVG_POOL);
            out.push(p.dims() as u8);
            for v in p.kernel.iter().chain(&p.stride) {
                put_u32(out, *v);
            }
        }
        LayerSpec::BatchNorm { channels } => {
            out.push(KIND_BATCH_NORM);
            put_u32(out, *channels);
        }
        LayerSpec::Relu => out.push(KIND_RELU),
        LayerSpec::Tanh => out.push(KIND_TANH),
        LayerSpec::Flatten => out.push(KIND_FLATTEN),
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => {
            out.push(KIND_FC);
            put_u32(out, *in_features);
            put_u32(out, *out_features);
        }
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_dims(&mut out, model.input_shape());
    put_u32(&mut out, model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        put_layer(&mut out, layer);
        let tensors: Vec<&Tensor> = model.params()[i].iter().chain(&model.buffers()[i]).collect();
        out.push(tensors.len() as u8);
        for t in tensors {
            put_tensor(&mut out, t);
        }
    }
    out
}

fn read_dims(r: &mut Reader<'_>) -> Result<Vec<usize>, FormatError> {
    let rank = r.u8()? as usize;
    (0..rank).map(|_| r.usize()).collect()
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor, FormatError> {
    let shape = read_dims(r)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(FormatError::Overflow)?;
    let data = r.f64s(count)?;
    Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

fn read_layer(r: &mut Reader<'_>) -> Result<LayerSpec, FormatError> {
    let kind = r.u8()?;
    Ok(match kind {
        KIND_CONV => {
            let n = r.u8()? as usize;
            let in_channels = r.usize()?;
            let out_channels = r.usize()?;
            let mut vals = (0..3 * n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let padding = vals.split_off(2 * n);
            let stride = vals.split_off(n);
            LayerSpec::Conv(ConvSpec {
                in_channels,
                out_channels,
                kernel: vals,
                stride,
                padding,
            })
        }
        KIND_AVG_POOL => {
            let n = r.u8()? as usize;
            let mut kernel = (0..2 * n).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let stride = kernel.split_off(n);
            LayerSpec::AvgPool(PoolSpec { kernel, stride })
        }
        KIND_BATCH_NORM => LayerSpec::BatchNorm { channels: r.usize()? },
        KIND_RELU => LayerSpec::Relu,
        KIND_TANH => LayerSpec::Tanh,
        KIND_FLATTEN => LayerSpec::Flatten,
        KIND_FC => LayerSpec::FullyConnected {
            in_features: r.usize()?,
            out_features: r.usize()?,
        },
        other => return Err(FormatError::Malformed(format!("unknown layer kind {other}"))),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, FormatError> {
    let mut r = Reader::new(bytes);
    check_magic(r.magic()?, CHECKPOINT_MAGIC)?;
    let input_shape = read_dims(&mut r)?;
    let count = r.usize()?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for _ in 0..count {
        let layer = read_layer(&mut r)?;
        layer.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
        let n_params = layer.param_shapes().len();
        let n_tensors = r.u8()? as usize;
        if n_tensors != n_params + layer.buffer_shapes().len() {
            return Err(FormatError::Malformed(format!(
                "{} layer stores {n_tensors} tensors",
                layer.kind_name()
            )));
        }
        let mut tensors = (0..n_tensors)
            .map(|_| read_tensor(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        buffers.push(tensors.split_off(n_params));
        params.push(tensors);
        layers.push(layer);
    }
    r.finish()?;
    Model::from_parts(layers, input_shape, params, buffers).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, FormatError> {
    decode_checkpoint(&fs::read(path)?)
}
