//! Layer definitions with forward evaluation and reverse-mode gradients.

use rand::Rng;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binary keep-mask congruent to a weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(len: usize) -> Self {
        Mask { keep: vec![true; len] }
    }

    pub fn from_bools(keep: Vec<bool>) -> Self {
        Mask { keep }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn prune(&mut self, i: usize) {
        self.keep[i] = false;
    }
}

/// A learnable tensor. Prunable weights carry a mask; masked entries are
/// held at exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub mask: Option<Mask>,
}

impl Param {
    pub fn weight(value: Tensor) -> Self {
        let mask = Some(Mask::all(value.len()));
        Param { value, mask }
    }

    pub fn plain(value: Tensor) -> Self {
        Param { value, mask: None }
    }

    /// Zeroes every masked entry.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &k) in self.value.data_mut().iter_mut().zip(mask.as_slice()) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    /// Entries that count as parameters: unmasked weights, or every entry.
    pub fn active_count(&self) -> usize {
        self.mask.as_ref().map_or(self.value.len(), Mask::kept)
    }

    pub fn is_prunable(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    /// `[N, d/g, k, k]`
    pub weight: Param,
    pub bias: Param,
}

/// Depthwise convolution followed directly by a pointwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableConv {
    pub depthwise: Conv,
    pub pointwise: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv),
    SeparableConv(SeparableConv),
    ChannelShuffle {
        groups: usize,
    },
    BatchNorm(BatchNorm),
    Dropout {
        rate: f64,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// `y = x + body(x)`
    Residual(Vec<Layer>),
}

/// Saved forward state needed by [`Layer::backward`].
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Input(Tensor),
    Separable {
        input: Tensor,
        mid: Tensor,
    },
    Relu(Vec<bool>),
    Dropout(Vec<f64>),
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
        train: bool,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    Residual(Vec<Cache>),
}

impl Conv {
    pub fn new(spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Conv {
            spec,
            weight: Param::weight(Tensor::zeros(&spec.weight_shape())),
            bias: Param::plain(Tensor::zeros(&[spec.n_filters])),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv::conv_forward(x, &self.weight.value, Some(self.bias.value.data()), &self.spec)
    }

    fn backward(&self, x: &Tensor, gy: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let g = conv::conv_backward(x, &self.weight.value, gy, &self.spec);
        grads[0] = g.weight;
        grads[1] = Tensor::new(&[self.spec.n_filters], g.bias).expect("bias grad");
        g.input
    }
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Param::weight(Tensor::zeros(&[out_features, in_features])),
            bias: Param::plain(Tensor::zeros(&[out_features])),
        }
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::plain(Tensor::full(&[channels], 1.0)),
            beta: Param::plain(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = (0..self.channels)
            .map(|c| self.gamma.value.data()[c] / (self.running_var[c] + self.eps).sqrt())
            .collect();
        let shift = (0..self.channels)
            .map(|c| self.beta.value.data()[c] - self.running_mean[c] * scale[c])
            .collect();
        (scale, shift)
    }
}

/// `(batch, channels, plane)` view of a `[B, C, ...]` activation.
fn channel_layout(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2..].iter().product())
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(c) if c.spec.groups == 1 => "conv",
            Layer::Conv(c) if c.spec.groups == c.spec.d && c.spec.groups == c.spec.n_filters => "depthwise_conv",
            Layer::Conv(_) => "group_conv",
            Layer::SeparableConv(_) => "depthwise_separable_conv",
            Layer::ChannelShuffle { .. } => "channel_shuffle",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout { .. } => "dropout",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::Residual(_) => "residual_block",
        }
    }

    /// Dropout and batch normalisation.
    pub fn is_regularisation(&self) -> bool {
        matches!(self, Layer::Dropout { .. } | Layer::BatchNorm(_))
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::SeparableConv(s) => vec![
                &s.depthwise.weight,
                &s.depthwise.bias,
                &s.pointwise.weight,
                &s.pointwise.bias,
            ],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Residual(body) => body.iter().flat_map(Layer::params).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::SeparableConv(s) => vec![
                &mut s.depthwise.weight,
                &mut s.depthwise.bias,
                &mut s.pointwise.weight,
                &mut s.pointwise.bias,
            ],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Residual(body) => body.iter_mut().flat_map(Layer::params_mut).collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_tensor_count(&self) -> usize {
        match self {
            Layer::Dense(_) | Layer::Conv(_) | Layer::BatchNorm(_) => 2,
            Layer::SeparableConv(_) => 4,
            Layer::Residual(body) => body.iter().map(Layer::param_tensor_count).sum(),
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: String| {
            Err(Error::shape(
                self.kind_name(),
                format!("expected input {want}, got {input:?}"),
            ))
        };
        match self {
            Layer::Dense(d) => {
                if input != [d.in_features] {
                    return mismatch(format!("[{}]", d.in_features));
                }
                Ok(vec![d.out_features])
            }
            Layer::Conv(c) => conv_output_shape(&c.spec, input, self.kind_name()),
            Layer::SeparableConv(s) => {
                let mid = conv_output_shape(&s.depthwise.spec, input, "depthwise")?;
                conv_output_shape(&s.pointwise.spec, &mid, "pointwise")
            }
            Layer::ChannelShuffle { groups } => {
                if input.len() != 3 || *groups == 0 || !input[0].is_multiple_of(*groups) {
                    return mismatch(format!("[c, h, w] with c divisible by {groups}"));
                }
                Ok(input.to_vec())
            }
            Layer::BatchNorm(b) => {
                if input.first() != Some(&b.channels) {
                    return mismatch(format!("{} channels", b.channels));
                }
                Ok(input.to_vec())
            }
            Layer::Dropout { .. } | Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { size } => {
                if input.len() != 3 || input[1] < *size || input[2] < *size {
                    return mismatch(format!("[c, h, w] with h, w >= {size}"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return mismatch("[c, h, w]".into());
                }
                Ok(vec![input[0]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Residual(body) => {
                let mut shape = input.to_vec();
                for layer in body {
                    shape = layer.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(Error::shape(
                        "residual_block",
                        format!("body maps {input:?} to {shape:?}"),
                    ));
                }
                Ok(shape)
            }
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense(d) => {
                let b = x.shape()[0];
                if x.shape() != [b, d.in_features] {
                    return Err(Error::shape(
                        "dense",
                        format!("expected [B, {}], got {:?}", d.in_features, x.shape()),
                    ));
                }
                let mut y = vec![0.0; b * d.out_features];
                for row in y.chunks_mut(d.out_features) {
                    row.copy_from_slice(d.bias.value.data());
                }
                gemm(
                    b,
                    d.in_features,
                    d.out_features,
                    1.0,
                    x.data(),
                    (d.in_features, 1),
                    d.weight.value.data(),
                    (1, d.in_features),
                    1.0,
                    &mut y,
                    (d.out_features, 1),
                );
                Ok((Tensor::new(&[b, d.out_features], y)?, Cache::Input(x.clone())))
            }
            Layer::Conv(c) => Ok((c.forward(x)?, Cache::Input(x.clone()))),
            Layer::SeparableConv(s) => {
                let mid = s.depthwise.forward(x)?;
                let y = s.pointwise.forward(&mid)?;
                Ok((y, Cache::Separable { input: x.clone(), mid }))
            }
            Layer::ChannelShuffle { groups } => Ok((conv::channel_shuffle(x, *groups)?, Cache::None)),
            Layer::BatchNorm(bn) => batch_norm_forward(bn, x, mode),
            Layer::Dropout { rate } => {
                if mode == Mode::Eval || *rate == 0.0 {
                    return Ok((x.clone(), Cache::Dropout(vec![1.0; x.len()])));
                }
                let keep_scale = 1.0 / (1.0 - rate);
                let scale: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep_scale })
                    .collect();
                let y = Tensor::new(x.shape(), x.data().iter().zip(&scale).map(|(v, s)| v * s).collect())?;
                Ok((y, Cache::Dropout(scale)))
            }
            Layer::Relu => {
                let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), Cache::Relu(active)))
            }
            Layer::MaxPool { size } => max_pool_forward(x, *size),
            Layer::GlobalAvgPool => {
                if x.rank() != 4 {
                    return Err(Error::shape("global_avg_pool", format!("{:?}", x.shape())));
                }
                let (b, c, plane) = channel_layout(x);
                let y: Vec<f64> = x
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                Ok((Tensor::new(&[b, c], y)?, Cache::Shape(x.shape().to_vec())))
            }
            Layer::Flatten => {
                let b = x.shape()[0];
                let rest = x.len() / b;
                Ok((x.clone().reshape(&[b, rest])?, Cache::Shape(x.shape().to_vec())))
            }
            Layer::Residual(body) => {
                let mut h = x.clone();
                let mut caches = Vec::with_capacity(body.len());
                for layer in body {
                    let (out, cache) = layer.forward(&h, mode, rng)?;
                    caches.push(cache);
                    h = out;
                }
                Ok((x.axpby(1.0, &h, 1.0)?, Cache::Residual(caches)))
            }
        }
    }

    /// Writes this layer's parameter gradients into `grads` (length
    /// [`Layer::param_tensor_count`]) and returns the input gradient.
    pub fn backward(&self, cache: &Cache, gy: &Tensor, grads: &mut [Tensor]) -> Tensor {
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => {
                let b = x.shape()[0];
                let mut dw = vec![0.0; d.out_features * d.in_features];
                gemm(
                    d.out_features,
                    b,
                    d.in_features,
                    1.0,
                    gy.data(),
                    (1, d.out_features),
                    x.data(),
                    (d.in_features, 1),
                    0.0,
                    &mut dw,
                    (d.in_features, 1),
                );
                let mut db = vec![0.0; d.out_features];
                for row in gy.data().chunks(d.out_features) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                let mut dx = vec![0.0; b * d.in_features];
                gemm(
                    b,
                    d.out_features,
                    d.in_features,
                    1.0,
                    gy.data(),
                    (d.out_features, 1),
                    d.weight.value.data(),
                    (d.in_features, 1),
                    0.0,
                    &mut dx,
                    (d.in_features, 1),
                );
                grads[0] = Tensor::new(&[d.out_features, d.in_features], dw).expect("dense dw");
                grads[1] = Tensor::new(&[d.out_features], db).expect("dense db");
                Tensor::new(x.shape(), dx).expect("dense dx")
            }
            (Layer::Conv(c), Cache::Input(x)) => c.backward(x, gy, grads),
            (Layer::SeparableConv(s), Cache::Separable { input, mid }) => {
                let (dw_grads, pw_grads) = grads.split_at_mut(2);
                let dmid = s.pointwise.backward(mid, gy, pw_grads);
                s.depthwise.backward(input, &dmid, dw_grads)
            }
            (Layer::ChannelShuffle { groups }, _) => {
                let d = gy.shape()[1];
                conv::channel_shuffle(gy, d / groups).expect("inverse shuffle")
            }
            (Layer::BatchNorm(bn), cache) => batch_norm_backward(bn, cache, gy, grads),
            (Layer::Dropout { .. }, Cache::Dropout(scale)) => {
                Tensor::new(gy.shape(), gy.data().iter().zip(scale).map(|(g, s)| g * s).collect())
                    .expect("dropout grad")
            }
            (Layer::Relu, Cache::Relu(active)) => Tensor::new(
                gy.shape(),
                gy.data()
                    .iter()
                    .zip(active)
                    .map(|(&g, &a)| if a { g } else { 0.0 })
                    .collect(),
            )
            .expect("relu grad"),
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, input_shape }) => {
                let mut dx = Tensor::zeros(input_shape);
                for (&src, &g) in argmax.iter().zip(gy.data()) {
                    dx.data_mut()[src] += g;
                }
                dx
            }
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                let plane: usize = shape[2..].iter().product();
                let mut dx = Vec::with_capacity(plane * gy.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / plane as f64, plane));
                }
                Tensor::new(shape, dx).expect("gap grad")
            }
            (Layer::Flatten, Cache::Shape(shape)) => gy.clone().reshape(shape).expect("flatten grad"),
            (Layer::Residual(body), Cache::Residual(caches)) => {
                let mut offsets = Vec::with_capacity(body.len());
                let mut at = 0;
                for layer in body {
                    offsets.push(at);
                    at += layer.param_tensor_count();
                }
                let mut g = gy.clone();
                for (i, layer) in body.iter().enumerate().rev() {
                    let n = layer.param_tensor_count();
                    g = layer.backward(&caches[i], &g, &mut grads[offsets[i]..offsets[i] + n]);
                }
                gy.axpby(1.0, &g, 1.0).expect("residual grad")
            }
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {}", layer.kind_name()),
        }
    }

    /// Folds train-mode batch statistics into running statistics.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        match (self, cache) {
            (
                Layer::BatchNorm(bn),
                Cache::BatchNorm {
                    batch_mean,
                    batch_var,
                    train: true,
                    xhat,
                    ..
                },
            ) => {
                let (b, _, plane) = channel_layout(xhat);
                let n = (b * plane) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..bn.channels {
                    bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * batch_mean[c];
                    bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * batch_var[c] * unbias;
                }
            }
            (Layer::Residual(body), Cache::Residual(caches)) => {
                for (layer, cache) in body.iter_mut().zip(caches) {
                    layer.update_running_stats(cache);
                }
            }
            _ => {}
        }
    }
}

fn conv_output_shape(spec: &ConvSpec, input: &[usize], kind: &'static str) -> Result<Vec<usize>> {
    let want = [spec.d, spec.h_in, spec.w_in];
    if input != want {
        return Err(Error::shape(kind, format!("expected input {want:?}, got {input:?}")));
    }
    Ok(vec![spec.n_filters, spec.h_out(), spec.w_out()])
}

fn batch_norm_forward(bn: &BatchNorm, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    if x.rank() < 2 || x.shape()[1] != bn.channels {
        return Err(Error::shape(
            "batch_norm",
            format!("expected [B, {}, ...], got {:?}", bn.channels, x.shape()),
        ));
    }
    let (b, c, plane) = channel_layout(x);
    let n = (b * plane) as f64;
    let (mean, var) = if mode == Mode::Train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += x.data()[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
            }
            mean[ch] = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                v += x.data()[(bi * c + ch) * plane..][..plane]
                    .iter()
                    .map(|&e| (e - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = v / n;
        }
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (g, be) = (bn.gamma.value.data()[ch], bn.beta.value.data()[ch]);
            for i in off..off + plane {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = g * h + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        Cache::BatchNorm {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train: mode == Mode::Train,
        },
    ))
}

fn batch_norm_backward(bn: &BatchNorm, cache: &Cache, gy: &Tensor, grads: &mut [Tensor]) -> Tensor {
    let Cache::BatchNorm {
        xhat, inv_std, train, ..
    } = cache
    else {
        panic!("batch_norm backward without batch_norm cache");
    };
    let (b, c, plane) = channel_layout(gy);
    let n = (b * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += gy.data()[i] * xhat.data()[i];
                dbeta[ch] += gy.data()[i];
            }
        }
    }
    let mut dx = vec![0.0; gy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let k = bn.gamma.value.data()[ch] * inv_std[ch];
            for (i, d) in dx.iter_mut().enumerate().skip(off).take(plane) {
                *d = if *train {
                    k * (gy.data()[i] - dbeta[ch] / n - xhat.data()[i] * dgamma[ch] / n)
                } else {
                    k * gy.data()[i]
                };
            }
        }
    }
    grads[0] = Tensor::new(&[c], dgamma).expect("dgamma");
    grads[1] = Tensor::new(&[c], dbeta).expect("dbeta");
    Tensor::new(gy.shape(), dx).expect("bn dx")
}

fn max_pool_forward(x: &Tensor, size: usize) -> Result<(Tensor, Cache)> {
    if x.rank() != 4 || x.shape()[2] < size || x.shape()[3] < size {
        return Err(Error::shape("max_pool", format!("{:?} with window {size}", x.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let at = base + (oy * size + dy) * w + ox * size + dx;
                        if x.data()[at] > x.data()[best] {
                            best = at;
                        }
                    }
                }
                y.push(x.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[b, c, ho, wo], y)?,
        Cache::MaxPool {
            argmax,
            input_shape: x.shape().to_vec(),
        },
    ))
}
