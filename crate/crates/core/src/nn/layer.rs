//! Layer specifications and their analytic forward/backward kernels.
//!
//! Every spatial layer is evaluated on a 3-D grid; lower-dimensional layers
//! are padded with unit extents, unit kernels and unit strides, which leaves
//! the arithmetic unchanged.

use rand::Rng;
use thiserror::Error;

use super::reduce::BatchReduce;
use crate::tensor::Tensor;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("invalid layer hyperparameters: {0}")]
    Invalid(String),
    #[error("expected {expected} spatial axes plus channels, got shape {got:?}")]
    Rank { expected: usize, got: Vec<usize> },
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("expected {expected} input features, got {got}")]
    Features { expected: usize, got: usize },
    #[error("axis {axis} of extent {extent} underflows (kernel {kernel}, padding {padding})")]
    Underflow {
        axis: usize,
        extent: usize,
        kernel: usize,
        padding: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    /// A convolution with unit stride and no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            padding: vec![0; kernel.len()],
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    pub fn dims(&self) -> usize {
        self.kernel.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
}

impl PoolSpec {
    /// Non-overlapping pooling: stride equals kernel.
    pub fn blocks(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: kernel.to_vec(),
        }
    }

    pub fn dims(&self) -> usize {
        self.kernel.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    AvgPool(PoolSpec),
    BatchNorm { channels: usize },
    Relu,
    Tanh,
    Flatten,
    FullyConnected { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(c) => match c.dims() {
                1 => "conv1d",
                2 => "conv2d",
                _ => "conv3d",
            },
            LayerSpec::AvgPool(p) => match p.dims() {
                1 => "avgpool1d",
                2 => "avgpool2d",
                _ => "avgpool3d",
            },
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
            LayerSpec::FullyConnected { .. } => "fc",
        }
    }

    /// Layers that carry no parameters and act element-wise or by reshaping.
    pub fn is_parameterless(&self) -> bool {
        matches!(
            self,
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Flatten | LayerSpec::AvgPool(_)
        )
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let bad = |msg: String| Err(ShapeError::Invalid(msg));
        match self {
            LayerSpec::Conv(c) => {
                let n = c.dims();
                if !(1..=3).contains(&n) {
                    return bad(format!("convolution must be 1-, 2- or 3-D, got {n}"));
                }
                if c.stride.len() != n || c.padding.len() != n {
                    return bad("kernel, stride and padding ranks differ".into());
                }
                if c.kernel.contains(&0) || c.stride.contains(&0) {
                    return bad("kernel extents and strides must be >= 1".into());
                }
                if c.in_channels == 0 || c.out_channels == 0 {
                    return bad("channel counts must be >= 1".into());
                }
            }
            LayerSpec::AvgPool(p) => {
                let n = p.dims();
                if !(1..=3).contains(&n) {
                    return bad(format!("pooling must be 1-, 2- or 3-D, got {n}"));
                }
                if p.stride.len() != n {
                    return bad("kernel and stride ranks differ".into());
                }
                if p.kernel.contains(&0) || p.stride.contains(&0) {
                    return bad("kernel extents and strides must be >= 1".into());
                }
            }
            LayerSpec::BatchNorm { channels } if *channels == 0 => return bad("batch norm needs >= 1 channel".into()),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } if *in_features == 0 || *out_features == 0 => return bad("feature counts must be >= 1".into()),
            _ => {}
        }
        Ok(())
    }

    /// Output shape of one sample (no batch axis).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, ShapeError> {
        self.validate()?;
        match self {
            LayerSpec::Conv(c) => {
                let g = Grid::new(input, c.dims(), &c.kernel, &c.stride, &c.padding)?;
                let channels = *input.last().unwrap();
                if channels != c.in_channels {
                    return Err(ShapeError::Channels {
                        expected: c.in_channels,
                        got: channels,
                    });
                }
                let mut out = g.out[..c.dims()].to_vec();
                out.push(c.out_channels);
                Ok(out)
            }
            LayerSpec::AvgPool(p) => {
                let zeros = vec![0; p.dims()];
                let g = Grid::new(input, p.dims(), &p.kernel, &p.stride, &zeros)?;
                let mut out = g.out[..p.dims()].to_vec();
                out.push(*input.last().unwrap());
                Ok(out)
            }
            LayerSpec::BatchNorm { channels } => {
                let got = *input.last().unwrap_or(&0);
                if got != *channels {
                    return Err(ShapeError::Channels {
                        expected: *channels,
                        got,
                    });
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => {
                if input.len() != 1 || input[0] != *in_features {
                    return Err(ShapeError::Features {
                        expected: *in_features,
                        got: input.iter().product(),
                    });
                }
                Ok(vec![*out_features])
            }
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv(c) => {
                let mut w = c.kernel.clone();
                w.push(c.in_channels);
                w.push(c.out_channels);
                vec![w, vec![c.out_channels]]
            }
            LayerSpec::BatchNorm { channels } => vec![vec![*channels], vec![*channels]],
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => vec![vec![*in_features, *out_features], vec![*out_features]],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batch-norm running mean and variance).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::BatchNorm { channels } => vec![vec![*channels], vec![*channels]],
            _ => Vec::new(),
        }
    }

    /// Uniform in +-sqrt(1/fan_in) for weights and biases; batch norm starts
    /// at the identity transform with unit running variance.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> (Vec<Tensor>, Vec<Tensor>) {
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut R| {
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        };
        match self {
            LayerSpec::Conv(c) => {
                let shapes = self.param_shapes();
                let fan_in = c.kernel.iter().product::<usize>() * c.in_channels;
                let w = uniform(&shapes[0], fan_in, rng);
                let b = uniform(&shapes[1], fan_in, rng);
                (vec![w, b], Vec::new())
            }
            LayerSpec::FullyConnected { in_features, .. } => {
                let shapes = self.param_shapes();
                let w = uniform(&shapes[0], *in_features, rng);
                let b = uniform(&shapes[1], *in_features, rng);
                (vec![w, b], Vec::new())
            }
            LayerSpec::BatchNorm { channels } => (
                vec![Tensor::full(&[*channels], 1.0), Tensor::zeros(&[*channels])],
                vec![Tensor::zeros(&[*channels]), Tensor::full(&[*channels], 1.0)],
            ),
            _ => (Vec::new(), Vec::new()),
        }
    }

    /// Multiply-accumulate count of one forward pass over one sample.
    pub fn forward_macs(&self, input: &[usize]) -> u64 {
        let out = match self.output_shape(input) {
            Ok(o) => o,
            Err(_) => return 0,
        };
        let out_elems: usize = out.iter().product();
        let in_elems: usize = input.iter().product();
        let macs = match self {
            LayerSpec::Conv(c) => out_elems * c.kernel.iter().product::<usize>() * c.in_channels,
            LayerSpec::AvgPool(p) => out_elems * p.kernel.iter().product::<usize>(),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => in_features * out_features,
            LayerSpec::BatchNorm { .. } => 2 * in_elems,
            LayerSpec::Relu | LayerSpec::Tanh => in_elems,
            LayerSpec::Flatten => 0,
        };
        macs as u64
    }
}

/// Strided window geometry normalized to three spatial axes.
#[derive(Debug, Clone)]
pub(crate) struct Grid {
    pub inp: [usize; 3],
    pub out: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Grid {
    /// `input` is a sample shape: `dims` spatial extents followed by channels.
    pub fn new(
        input: &[usize],
        dims: usize,
        kernel: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self, ShapeError> {
        if input.len() != dims + 1 {
            return Err(ShapeError::Rank {
                expected: dims,
                got: input.to_vec(),
            });
        }
        let mut g = Grid {
            inp: [1; 3],
            out: [1; 3],
            k: [1; 3],
            s: [1; 3],
            p: [0; 3],
        };
        for d in 0..dims {
            let padded = input[d] + 2 * padding[d];
            if padded < kernel[d] {
                return Err(ShapeError::Underflow {
                    axis: d,
                    extent: input[d],
                    kernel: kernel[d],
                    padding: padding[d],
                });
            }
            g.inp[d] = input[d];
            g.k[d] = kernel[d];
            g.s[d] = stride[d];
            g.p[d] = padding[d];
            g.out[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        Ok(g)
    }

    pub fn in_size(&self) -> usize {
        self.inp.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.out.iter().product()
    }

    pub fn kernel_size(&self) -> usize {
        self.k.iter().product()
    }

    /// Visits every output position with its in-bounds taps as
    /// `(kernel offset, input position)` pairs in row-major kernel order.
    pub fn for_each_window(&self, mut f: impl FnMut(usize, &[(usize, usize)])) {
        let mut taps = Vec::with_capacity(self.kernel_size());
        let tap = |axis: usize, o: usize, k: usize| -> Option<usize> {
            let pos = o * self.s[axis] + k;
            let pos = pos.checked_sub(self.p[axis])?;
            (pos < self.inp[axis]).then_some(pos)
        };
        let mut oflat = 0;
        for o0 in 0..self.out[0] {
            for o1 in 0..self.out[1] {
                for o2 in 0..self.out[2] {
                    taps.clear();
                    for k0 in 0..self.k[0] {
                        let Some(i0) = tap(0, o0, k0) else { continue };
                        for k1 in 0..self.k[1] {
                            let Some(i1) = tap(1, o1, k1) else { continue };
                            for k2 in 0..self.k[2] {
                                let Some(i2) = tap(2, o2, k2) else { continue };
                                let kflat = (k0 * self.k[1] + k1) * self.k[2] + k2;
                                let iflat = (i0 * self.inp[1] + i1) * self.inp[2] + i2;
                                taps.push((kflat, iflat));
                            }
                        }
                    }
                    f(oflat, &taps);
                    oflat += 1;
                }
            }
        }
    }
}

/// Batch statistics captured by a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Rows reduced over, across all replicas.
    pub count: f64,
}

pub fn forward(
    spec: &LayerSpec,
    params: &[Tensor],
    buffers: &[Tensor],
    x: &Tensor,
    mode: Mode,
    reduce: &dyn BatchReduce,
) -> Result<(Tensor, Option<BatchNormCache>), ShapeError> {
    let batch = x.shape()[0];
    let out_sample = spec.output_shape(&x.shape()[1..])?;
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&out_sample);
    let y = match spec {
        LayerSpec::Conv(c) => conv_forward(c, &params[0], &params[1], x, &out_shape),
        LayerSpec::AvgPool(p) => avg_pool_forward(p, x, &out_shape),
        LayerSpec::BatchNorm { .. } => {
            return Ok(match mode {
                Mode::Train => {
                    let (y, cache) = batch_norm_train(params, x, reduce);
                    (y, Some(cache))
                }
                Mode::Eval => (batch_norm_eval(params, buffers, x), None),
            })
        }
        LayerSpec::Relu => map(x, |v| if v > 0.0 { v } else { 0.0 }),
        LayerSpec::Tanh => map(x, f64::tanh),
        LayerSpec::Flatten => x.clone().reshape(&out_shape).expect("flatten size"),
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => fc_forward(*in_features, *out_features, &params[0], &params[1], x),
    };
    Ok((y, None))
}

/// Gradients of one layer. `x` and `y` are the cached input and output of
/// the matching forward. Returns the input gradient when requested and one
/// gradient per trainable parameter.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    spec: &LayerSpec,
    params: &[Tensor],
    x: &Tensor,
    y: &Tensor,
    cache: Option<&BatchNormCache>,
    gy: &Tensor,
    need_input_grad: bool,
    reduce: &dyn BatchReduce,
) -> (Option<Tensor>, Vec<Tensor>) {
    match spec {
        LayerSpec::Conv(c) => conv_backward(c, &params[0], x, gy, need_input_grad),
        LayerSpec::AvgPool(p) => {
            let dx = need_input_grad.then(|| avg_pool_backward(p, x.shape(), gy));
            (dx, Vec::new())
        }
        LayerSpec::BatchNorm { .. } => {
            let cache = cache.expect("batch norm backward needs a train-mode cache");
            batch_norm_backward(params, cache, gy, reduce)
        }
        LayerSpec::Relu => {
            let dx = need_input_grad.then(|| {
                let mut dx = gy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                dx
            });
            (dx, Vec::new())
        }
        LayerSpec::Tanh => {
            let dx = need_input_grad.then(|| {
                let mut dx = gy.clone();
                for (g, &t) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= 1.0 - t * t;
                }
                dx
            });
            (dx, Vec::new())
        }
        LayerSpec::Flatten => {
            let dx = need_input_grad.then(|| gy.clone().reshape(x.shape()).expect("unflatten"));
            (dx, Vec::new())
        }
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => fc_backward(*in_features, *out_features, &params[0], x, gy, need_input_grad),
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = f(*v);
    }
    y
}

fn conv_grid(c: &ConvSpec, x: &Tensor) -> Grid {
    Grid::new(&x.shape()[1..], c.dims(), &c.kernel, &c.stride, &c.padding)
        .expect("conv geometry validated by output_shape")
}

fn conv_forward(c: &ConvSpec, w: &Tensor, b: &Tensor, x: &Tensor, out_shape: &[usize]) -> Tensor {
    let g = conv_grid(c, x);
    let (cin, cout) = (c.in_channels, c.out_channels);
    let (in_len, out_len) = (g.in_size() * cin, g.out_size() * cout);
    let (w, bias) = (w.data(), b.data());
    let mut out = Tensor::zeros(out_shape);
    for (xb, ob) in x
        .data()
        .chunks_exact(in_len)
        .zip(out.data_mut().chunks_exact_mut(out_len))
    {
        g.for_each_window(|o, taps| {
            let acc = &mut ob[o * cout..(o + 1) * cout];
            acc.copy_from_slice(bias);
            for &(k, i) in taps {
                let xs = &xb[i * cin..(i + 1) * cin];
                let wk = &w[k * cin * cout..(k + 1) * cin * cout];
                for (&xv, wrow) in xs.iter().zip(wk.chunks_exact(cout)) {
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += wv * xv;
                    }
                }
            }
        });
    }
    out
}

fn conv_backward(
    c: &ConvSpec,
    w: &Tensor,
    x: &Tensor,
    gy: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<Tensor>) {
    let g = conv_grid(c, x);
    let (cin, cout) = (c.in_channels, c.out_channels);
    let (in_len, out_len) = (g.in_size() * cin, g.out_size() * cout);
    let mut dw = Tensor::zeros(w.shape());
    let w = w.data();
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    for (b, (xb, gb)) in x
        .data()
        .chunks_exact(in_len)
        .zip(gy.data().chunks_exact(out_len))
        .enumerate()
    {
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let mut dxb = dx.as_mut().map(|t| &mut t.data_mut()[b * in_len..(b + 1) * in_len]);
        g.for_each_window(|o, taps| {
            let go = &gb[o * cout..(o + 1) * cout];
            for (d, &v) in dbd.iter_mut().zip(go) {
                *d += v;
            }
            for &(k, i) in taps {
                let xs = &xb[i * cin..(i + 1) * cin];
                let base = k * cin * cout;
                for (ci, &xv) in xs.iter().enumerate() {
                    let row = base + ci * cout;
                    for (d, &v) in dwd[row..row + cout].iter_mut().zip(go) {
                        *d += xv * v;
                    }
                }
                if let Some(dxb) = dxb.as_deref_mut() {
                    let dxs = &mut dxb[i * cin..(i + 1) * cin];
                    for (ci, d) in dxs.iter_mut().enumerate() {
                        let row = base + ci * cout;
                        let mut s = 0.0;
                        for (&wv, &v) in w[row..row + cout].iter().zip(go) {
                            s += wv * v;
                        }
                        *d += s;
                    }
                }
            }
        });
    }
    (dx, vec![dw, db])
}

fn pool_grid(p: &PoolSpec, input: &[usize]) -> Grid {
    let zeros = vec![0; p.dims()];
    Grid::new(&input[1..], p.dims(), &p.kernel, &p.stride, &zeros).expect("pool geometry validated by output_shape")
}

/// Window mean per channel. Sums run in row-major kernel order starting from
/// the first tap, so a unit kernel reproduces its input bit for bit.
pub(crate) fn avg_pool_forward(p: &PoolSpec, x: &Tensor, out_shape: &[usize]) -> Tensor {
    let g = pool_grid(p, x.shape());
    let c = *x.shape().last().unwrap();
    let count = g.kernel_size() as f64;
    let (in_len, out_len) = (g.in_size() * c, g.out_size() * c);
    let mut out = Tensor::zeros(out_shape);
    for (xb, ob) in x
        .data()
        .chunks_exact(in_len)
        .zip(out.data_mut().chunks_exact_mut(out_len))
    {
        g.for_each_window(|o, taps| {
            let acc = &mut ob[o * c..(o + 1) * c];
            let (&(_, first), rest) = taps.split_first().expect("window has taps");
            acc.copy_from_slice(&xb[first * c..(first + 1) * c]);
            for &(_, i) in rest {
                for (a, &v) in acc.iter_mut().zip(&xb[i * c..(i + 1) * c]) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= count;
            }
        });
    }
    out
}

fn avg_pool_backward(p: &PoolSpec, in_shape: &[usize], gy: &Tensor) -> Tensor {
    let g = pool_grid(p, in_shape);
    let c = *in_shape.last().unwrap();
    let count = g.kernel_size() as f64;
    let (in_len, out_len) = (g.in_size() * c, g.out_size() * c);
    let mut dx = Tensor::zeros(in_shape);
    for (dxb, gb) in dx
        .data_mut()
        .chunks_exact_mut(in_len)
        .zip(gy.data().chunks_exact(out_len))
    {
        g.for_each_window(|o, taps| {
            let go = &gb[o * c..(o + 1) * c];
            for &(_, i) in taps {
                for (d, &v) in dxb[i * c..(i + 1) * c].iter_mut().zip(go) {
                    *d += v / count;
                }
            }
        });
    }
    dx
}

fn batch_norm_train(params: &[Tensor], x: &Tensor, reduce: &dyn BatchReduce) -> (Tensor, BatchNormCache) {
    let c = *x.shape().last().unwrap();
    let rows = x.len() / c;

    let mut local = vec![0.0; c + 1];
    local[0] = rows as f64;
    for row in x.data().chunks_exact(c) {
        for (s, &v) in local[1..].iter_mut().zip(row) {
            *s += v;
        }
    }
    let global = reduce.all_reduce(local);
    let count = global[0];
    let mean: Vec<f64> = global[1..].iter().map(|s| s / count).collect();

    let mut ssd = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in ssd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let ssd = reduce.all_reduce(ssd);
    let var: Vec<f64> = ssd.iter().map(|s| s / count).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();

    let (gamma, beta) = (params[0].data(), params[1].data());
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (xr, yr) in xhat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xr[ch] - mean[ch]) * inv_std[ch];
            xr[ch] = h;
            yr[ch] = gamma[ch] * h + beta[ch];
        }
    }
    let cache = BatchNormCache {
        xhat,
        inv_std,
        mean,
        var,
        count,
    };
    (y, cache)
}

fn batch_norm_eval(params: &[Tensor], buffers: &[Tensor], x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let (gamma, beta) = (params[0].data(), params[1].data());
    let (rm, rv) = (buffers[0].data(), buffers[1].data());
    let scale: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = gamma[ch] * (row[ch] - rm[ch]) * scale[ch] + beta[ch];
        }
    }
    y
}

fn batch_norm_backward(
    params: &[Tensor],
    cache: &BatchNormCache,
    gy: &Tensor,
    reduce: &dyn BatchReduce,
) -> (Option<Tensor>, Vec<Tensor>) {
    let c = params[0].len();
    let gamma = params[0].data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for (gr, hr) in gy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dbeta.data_mut()[ch] += gr[ch];
            dgamma.data_mut()[ch] += gr[ch] * hr[ch];
        }
    }
    let mut local = dbeta.data().to_vec();
    local.extend_from_slice(dgamma.data());
    let global = reduce.all_reduce(local);
    let (sum_dy, sum_dy_xhat) = global.split_at(c);

    let n = cache.count;
    let mut dx = gy.clone();
    for (dr, hr) in dx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dr[ch] = gamma[ch] * cache.inv_std[ch] * (dr[ch] - sum_dy[ch] / n - hr[ch] * sum_dy_xhat[ch] / n);
        }
    }
    (Some(dx), vec![dgamma, dbeta])
}

/// Folds one batch's statistics into the running mean and (unbiased) variance.
pub fn update_running_stats(buffers: &mut [Tensor], cache: &BatchNormCache) {
    let n = cache.count;
    let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let m = BATCH_NORM_MOMENTUM;
    for (r, &b) in buffers[0].data_mut().iter_mut().zip(&cache.mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, &b) in buffers[1].data_mut().iter_mut().zip(&cache.var) {
        *r = (1.0 - m) * *r + m * b * correction;
    }
}

fn fc_forward(inf: usize, outf: usize, w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    let batch = x.shape()[0];
    let mut y = Tensor::zeros(&[batch, outf]);
    let w = w.data();
    for (xr, yr) in x.data().chunks_exact(inf).zip(y.data_mut().chunks_exact_mut(outf)) {
        yr.copy_from_slice(b.data());
        for (&xv, wrow) in xr.iter().zip(w.chunks_exact(outf)) {
            for (a, &wv) in yr.iter_mut().zip(wrow) {
                *a += wv * xv;
            }
        }
    }
    y
}

fn fc_backward(
    inf: usize,
    outf: usize,
    w: &Tensor,
    x: &Tensor,
    gy: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<Tensor>) {
    let mut dw = Tensor::zeros(&[inf, outf]);
    let mut db = Tensor::zeros(&[outf]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    for (b, (xr, gr)) in x.data().chunks_exact(inf).zip(gy.data().chunks_exact(outf)).enumerate() {
        for (d, &g) in db.data_mut().iter_mut().zip(gr) {
            *d += g;
        }
        for (&xv, drow) in xr.iter().zip(dw.data_mut().chunks_exact_mut(outf)) {
            for (d, &g) in drow.iter_mut().zip(gr) {
                *d += xv * g;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxr = &mut dx.data_mut()[b * inf..(b + 1) * inf];
            for (d, wrow) in dxr.iter_mut().zip(w.data().chunks_exact(outf)) {
                *d = wrow.iter().zip(gr).map(|(&wv, &g)| wv * g).sum();
            }
        }
    }
    (dx, vec![dw, db])
}
