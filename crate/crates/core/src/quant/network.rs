use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{calibrate, quantize, rounding_shift, Granularity, Multiplier, QuantParams};
use crate::conv::{shuffle_permutation, ConvSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, ArchTag, Layer, Mode, Network};
use crate::tensor::{QTensor, Tensor};

/// Fractional bits kept while summing the two branches of a residual add.
const ADD_BITS: u32 = 16;

/// Integer weights with one quantiser per output channel (axis 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QWeights {
    pub values: QTensor,
    pub params: Vec<QuantParams>,
}

impl QWeights {
    /// Per-channel min-max quantisation with `f32`-rounded scales.
    pub fn from_float(w: &Tensor, bit_width: u8) -> Result<Self> {
        let params: Vec<QuantParams> = calibrate(w, bit_width, Granularity::PerChannel { axis: 0 })?
            .into_iter()
            .map(QuantParams::to_f32_scale)
            .collect();
        let per = w.len() / params.len();
        let data = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| quantize(x, &params[i / per]))
            .collect();
        Ok(QWeights {
            values: QTensor::new(w.shape(), data, bit_width)?,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.params.len()
    }

    pub fn per_channel(&self) -> usize {
        self.values.len() / self.params.len()
    }

    pub fn dequantize(&self) -> Tensor {
        let per = self.per_channel();
        let data = self
            .values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &q)| super::dequantize(q, &self.params[i / per]))
            .collect();
        Tensor::new(self.values.shape(), data).expect("same shape")
    }

    fn centered(&self) -> Vec<i32> {
        let per = self.per_channel();
        self.values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &q)| q - self.params[i / per].zero_point)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Dense { in_features: usize, out_features: usize },
    Conv(ConvSpec),
}

/// Dense or convolution layer in the integer domain. Accumulation is
/// `bias + Σ (q_w − z_w)(q_x − z_x)` in `i32`; the result is requantised to
/// `output`, or scaled back to reals when `output` is `None` (final layer).
#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    pub kind: LinearKind,
    pub weights: QWeights,
    /// Biases at scale `Δ_w[c]·Δ_x`.
    pub bias: Vec<i32>,
    pub relu: bool,
    pub input: QuantParams,
    pub output: Option<QuantParams>,
    centered: Vec<i32>,
    multipliers: Vec<Multiplier>,
}

impl QLinear {
    pub fn new(
        kind: LinearKind,
        weights: QWeights,
        bias: Vec<i32>,
        relu: bool,
        input: QuantParams,
        output: Option<QuantParams>,
    ) -> Result<Self> {
        let (channels, shape): (usize, Vec<usize>) = match kind {
            LinearKind::Dense {
                in_features,
                out_features,
            } => (out_features, vec![out_features, in_features]),
            LinearKind::Conv(spec) => {
                spec.validate()?;
                (spec.n_filters, spec.weight_shape().to_vec())
            }
        };
        if weights.values.shape() != shape || weights.channels() != channels || bias.len() != channels {
            return Err(Error::shape(
                "quantised layer",
                format!(
                    "weights {:?} with {} channel params and {} biases for {kind:?}",
                    weights.values.shape(),
                    weights.channels(),
                    bias.len()
                ),
            ));
        }
        if weights.params.iter().any(|p| p.bit_width != weights.values.bit_width())
            || output.is_some_and(|o| o.bit_width != input.bit_width)
        {
            return Err(Error::invalid("mixed bit widths inside one layer"));
        }
        let multipliers = match output {
            Some(out) => weights
                .params
                .iter()
                .map(|p| Multiplier::from_real(p.scale * input.scale / out.scale))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let centered = weights.centered();
        Ok(QLinear {
            kind,
            weights,
            bias,
            relu,
            input,
            output,
            centered,
            multipliers,
        })
    }

    fn from_float(
        kind: LinearKind,
        weight: &Tensor,
        bias: &[f64],
        relu: bool,
        input: QuantParams,
        output: Option<QuantParams>,
    ) -> Result<Self> {
        let weights = QWeights::from_float(weight, input.bit_width)?;
        let bias = bias
            .iter()
            .zip(&weights.params)
            .map(|(&b, p)| {
                let q = (b / (p.scale * input.scale)).round();
                if q.abs() > i32::MAX as f64 {
                    Err(Error::invalid(format!(
                        "bias {b} does not fit at scale {}",
                        p.scale * input.scale
                    )))
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<_>>()?;
        QLinear::new(kind, weights, bias, relu, input, output)
    }

    /// Worst-case accumulator magnitude over all channels.
    pub fn accumulator_bound(&self) -> i64 {
        let (lo, hi) = self.input.range();
        let z = self.input.zero_point as i64;
        let x_max = (hi as i64 - z).max(z - lo as i64);
        let per = self.weights.per_channel();
        self.centered
            .chunks(per)
            .zip(&self.bias)
            .map(|(w, &b)| w.iter().map(|&v| (v as i64).abs()).sum::<i64>() * x_max + (b as i64).abs())
            .max()
            .unwrap_or(0)
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            LinearKind::Dense { .. } => "dense",
            LinearKind::Conv(_) => "conv",
        }
    }

    fn finish(&self, acc: i32, c: usize) -> Value {
        match self.output {
            Some(out) => {
                let (lo, hi) = out.range();
                let mut v = out.zero_point as i64 + self.multipliers[c].apply(acc as i64);
                if self.relu {
                    v = v.max(out.zero_point as i64);
                }
                Value::Int(v.clamp(lo as i64, hi as i64) as i32)
            }
            None => {
                let v = acc as f64 * self.weights.params[c].scale * self.input.scale;
                Value::Real(if self.relu { v.max(0.0) } else { v })
            }
        }
    }

    fn forward(&self, x: &IntAct) -> Result<Act> {
        let z = self.input.zero_point;
        let xc: Vec<i32> = x.data.iter().map(|&q| q - z).collect();
        let b = x.shape[0];
        let mut out = Out::new(self.output.is_some());
        let shape = match self.kind {
            LinearKind::Dense {
                in_features,
                out_features,
            } => {
                if x.shape != [b, in_features] {
                    return Err(Error::shape("quantised dense", format!("{:?}", x.shape)));
                }
                for row in xc.chunks(in_features) {
                    for (c, w) in self.centered.chunks(in_features).enumerate() {
                        out.push(self.finish(self.bias[c] + dot(w, row), c));
                    }
                }
                vec![b, out_features]
            }
            LinearKind::Conv(s) => {
                if x.shape != [b, s.d, s.h_in, s.w_in] {
                    return Err(Error::shape("quantised conv", format!("{:?} for {s:?}", x.shape)));
                }
                let (ho, wo) = (s.h_out(), s.w_out());
                let (cin, cout) = (s.in_per_group(), s.out_per_group());
                let kdim = cin * s.k * s.k;
                let plane = s.h_in * s.w_in;
                let mut patches = vec![0i32; ho * wo * kdim];
                let mut planes = vec![Value::Int(0); s.n_filters * ho * wo];
                for img in xc.chunks(s.d * plane) {
                    for g in 0..s.groups {
                        im2col_int(&img[g * cin * plane..(g + 1) * cin * plane], cin, &s, &mut patches);
                        for c in g * cout..(g + 1) * cout {
                            let w = &self.centered[c * kdim..(c + 1) * kdim];
                            let dst = &mut planes[c * ho * wo..(c + 1) * ho * wo];
                            for (slot, patch) in dst.iter_mut().zip(patches.chunks(kdim)) {
                                *slot = self.finish(self.bias[c] + dot(w, patch), c);
                            }
                        }
                    }
                    planes.iter().for_each(|&v| out.push(v));
                }
                vec![b, s.n_filters, ho, wo]
            }
        };
        Ok(out.into_act(shape))
    }
}

fn dot(a: &[i32], b: &[i32]) -> i32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Patch-major im2col of zero-centred values: `[h_out·w_out, cin·k·k]`.
fn im2col_int(x: &[i32], cin: usize, s: &ConvSpec, out: &mut [i32]) {
    let (ho, wo, k) = (s.h_out(), s.w_out(), s.k);
    let kdim = cin * k * k;
    for oy in 0..ho {
        for ox in 0..wo {
            let patch = &mut out[(oy * wo + ox) * kdim..(oy * wo + ox + 1) * kdim];
            let mut t = 0;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * s.stride + ky) as isize - s.padding as isize;
                    for kx in 0..k {
                        let ix = (ox * s.stride + kx) as isize - s.padding as isize;
                        patch[t] = if iy < 0 || ix < 0 || iy >= s.h_in as isize || ix >= s.w_in as isize {
                            0
                        } else {
                            x[c * s.h_in * s.w_in + iy as usize * s.w_in + ix as usize]
                        };
                        t += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Value {
    Int(i32),
    Real(f64),
}

struct Out {
    ints: Vec<i32>,
    reals: Vec<f64>,
    int: bool,
}

impl Out {
    fn new(int: bool) -> Self {
        Out {
            ints: Vec::new(),
            reals: Vec::new(),
            int,
        }
    }

    fn push(&mut self, v: Value) {
        match v {
            Value::Int(q) => self.ints.push(q),
            Value::Real(r) => self.reals.push(r),
        }
    }

    fn into_act(self, shape: Vec<usize>) -> Act {
        if self.int {
            Act::Int(IntAct { shape, data: self.ints })
        } else {
            Act::Real(Tensor::new(&shape, self.reals).expect("layer output shape"))
        }
    }
}

/// Residual block `x + body(x)` with both branches rescaled to `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct QResidual {
    pub body: Vec<QLayer>,
    pub input: QuantParams,
    pub body_output: QuantParams,
    pub output: QuantParams,
    skip_mult: Multiplier,
    body_mult: Multiplier,
}

impl QResidual {
    pub fn new(body: Vec<QLayer>, input: QuantParams, body_output: QuantParams, output: QuantParams) -> Result<Self> {
        let scale = (1u64 << ADD_BITS) as f64;
        Ok(QResidual {
            skip_mult: Multiplier::from_real(input.scale / output.scale * scale)?,
            body_mult: Multiplier::from_real(body_output.scale / output.scale * scale)?,
            body,
            input,
            body_output,
            output,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QLayer {
    Linear(QLinear),
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Flatten,
    ChannelShuffle { groups: usize },
    Residual(QResidual),
}

struct IntAct {
    shape: Vec<usize>,
    data: Vec<i32>,
}

enum Act {
    Int(IntAct),
    Real(Tensor),
}

fn div_round(a: i64, d: i64) -> i64 {
    let q = (2 * a.abs() + d) / (2 * d);
    if a < 0 {
        -q
    } else {
        q
    }
}

/// Runs `layers` on integer activations quantised with `p`.
fn run(layers: &[QLayer], mut x: IntAct, mut p: QuantParams) -> Result<(Act, QuantParams)> {
    for (i, layer) in layers.iter().enumerate() {
        let y = match layer {
            QLayer::Linear(l) => {
                let y = l.forward(&x)?;
                if let Some(out) = l.output {
                    p = out;
                }
                y
            }
            QLayer::Relu => {
                let z = p.zero_point;
                Act::Int(IntAct {
                    data: x.data.iter().map(|&q| q.max(z)).collect(),
                    shape: x.shape,
                })
            }
            QLayer::MaxPool { size } => Act::Int(max_pool_int(&x, *size)?),
            QLayer::GlobalAvgPool => {
                if x.shape.len() != 4 {
                    return Err(Error::shape("quantised global_avg_pool", format!("{:?}", x.shape)));
                }
                let plane = x.shape[2] * x.shape[3];
                let z = p.zero_point as i64;
                let data = x
                    .data
                    .chunks(plane)
                    .map(|c| (z + div_round(c.iter().map(|&q| q as i64 - z).sum(), plane as i64)) as i32)
                    .collect();
                Act::Int(IntAct {
                    shape: vec![x.shape[0], x.shape[1]],
                    data,
                })
            }
            QLayer::Flatten => {
                let b = x.shape[0];
                let rest = x.data.len() / b.max(1);
                Act::Int(IntAct {
                    shape: vec![b, rest],
                    data: x.data,
                })
            }
            QLayer::ChannelShuffle { groups } => {
                let (b, d) = (x.shape[0], x.shape[1]);
                if x.shape.len() != 4 || *groups == 0 || d % groups != 0 {
                    return Err(Error::shape("quantised channel_shuffle", format!("{:?}", x.shape)));
                }
                let plane = x.shape[2] * x.shape[3];
                let perm = shuffle_permutation(d, *groups);
                let mut data = vec![0; x.data.len()];
                for n in 0..b {
                    for (c, &to) in perm.iter().enumerate() {
                        let src = (n * d + c) * plane;
                        let dst = (n * d + to) * plane;
                        data[dst..dst + plane].copy_from_slice(&x.data[src..src + plane]);
                    }
                }
                Act::Int(IntAct { shape: x.shape, data })
            }
            QLayer::Residual(r) => {
                let skip = IntAct {
                    shape: x.shape.clone(),
                    data: x.data.clone(),
                };
                let Act::Int(body) = run(&r.body, x, r.input)?.0 else {
                    return Err(Error::invalid("residual body must stay in the integer domain"));
                };
                if body.shape != skip.shape {
                    return Err(Error::shape(
                        "quantised residual",
                        format!("{:?} + {:?}", skip.shape, body.shape),
                    ));
                }
                let (lo, hi) = r.output.range();
                let (zi, zb) = (r.input.zero_point as i64, r.body_output.zero_point as i64);
                let data = skip
                    .data
                    .iter()
                    .zip(&body.data)
                    .map(|(&a, &b)| {
                        let t = r.skip_mult.apply(a as i64 - zi) + r.body_mult.apply(b as i64 - zb);
                        (r.output.zero_point as i64 + rounding_shift(t, ADD_BITS)).clamp(lo as i64, hi as i64) as i32
                    })
                    .collect();
                p = r.output;
                Act::Int(IntAct {
                    shape: skip.shape,
                    data,
                })
            }
        };
        match y {
            Act::Int(a) => x = a,
            Act::Real(t) if i + 1 == layers.len() => return Ok((Act::Real(t), p)),
            Act::Real(_) => return Err(Error::invalid("only the final layer may leave the integer domain")),
        }
    }
    Ok((Act::Int(x), p))
}

fn max_pool_int(x: &IntAct, size: usize) -> Result<IntAct> {
    if x.shape.len() != 4 || size == 0 || x.shape[2] < size || x.shape[3] < size {
        return Err(Error::shape(
            "quantised max_pool",
            format!("{:?} with window {size}", x.shape),
        ));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / size, w / size);
    let mut data = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = i32::MIN;
                for dy in 0..size {
                    let row = (oy * size + dy) * w + ox * size;
                    m = plane[row..row + size].iter().fold(m, |a, &v| a.max(v));
                }
                data.push(m);
            }
        }
    }
    Ok(IntAct {
        shape: vec![b, c, ho, wo],
        data,
    })
}

/// Integer-domain copy of a float network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantNetwork {
    pub arch: ArchTag,
    pub input_shape: Vec<usize>,
    pub bit_width: u8,
    pub input: QuantParams,
    pub layers: Vec<QLayer>,
}

impl QuantNetwork {
    /// Checks activation-parameter chaining, shapes and accumulator bounds.
    pub fn new(arch: ArchTag, input_shape: &[usize], input: QuantParams, layers: Vec<QLayer>) -> Result<Self> {
        let net = QuantNetwork {
            arch,
            input_shape: input_shape.to_vec(),
            bit_width: input.bit_width,
            input,
            layers,
        };
        let mut index = 0;
        check_chain(&net.layers, input_shape.to_vec(), input, true, &mut index)?;
        Ok(net)
    }

    /// Dequantised logits; the input batch is quantised with `self.input`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "quantized_forward",
                format!("batch {:?} for input [B, {:?}]", batch.shape(), self.input_shape),
            ));
        }
        let x = IntAct {
            shape: batch.shape().to_vec(),
            data: batch.data().iter().map(|&v| quantize(v, &self.input)).collect(),
        };
        match run(&self.layers, x, self.input)? {
            (Act::Real(t), _) => Ok(t),
            (Act::Int(a), p) => Tensor::new(&a.shape, a.data.iter().map(|&q| super::dequantize(q, &p)).collect()),
        }
    }

    /// Fraction of `dataset` classified correctly.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let mut correct = 0;
        for chunk in idx.chunks(500) {
            let (x, y) = dataset.batch(chunk);
            correct += argmax_rows(&self.forward(&x)?)
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    pub fn linear_layers(&self) -> Vec<&QLinear> {
        fn walk<'a>(layers: &'a [QLayer], out: &mut Vec<&'a QLinear>) {
            for l in layers {
                match l {
                    QLayer::Linear(q) => out.push(q),
                    QLayer::Residual(r) => walk(&r.body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }
}

fn bad<T>(index: usize, what: String) -> Result<T> {
    Err(Error::invalid(format!("quantised layer {index}: {what}")))
}

fn check_chain(
    layers: &[QLayer],
    mut shape: Vec<usize>,
    mut p: QuantParams,
    top: bool,
    index: &mut usize,
) -> Result<(Vec<usize>, QuantParams)> {
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            QLayer::Linear(l) => {
                if l.input != p {
                    return bad(*index, "input parameters differ from the previous output".into());
                }
                let bound = l.accumulator_bound();
                if bound > i32::MAX as i64 {
                    return Err(Error::AccumulatorOverflow {
                        layer: *index,
                        kind: l.kind_name(),
                        bound,
                    });
                }
                shape = match l.kind {
                    LinearKind::Dense {
                        in_features,
                        out_features,
                    } => {
                        if shape != [in_features] {
                            return bad(*index, format!("dense expects [{in_features}], got {shape:?}"));
                        }
                        vec![out_features]
                    }
                    LinearKind::Conv(s) => {
                        if shape != [s.d, s.h_in, s.w_in] {
                            return bad(
                                *index,
                                format!("conv expects {:?}, got {shape:?}", [s.d, s.h_in, s.w_in]),
                            );
                        }
                        vec![s.n_filters, s.h_out(), s.w_out()]
                    }
                };
                match l.output {
                    Some(out) => p = out,
                    None if top && i + 1 == layers.len() => {}
                    None => return bad(*index, "only the final layer may dequantise its output".into()),
                }
            }
            QLayer::Relu => {}
            QLayer::MaxPool { size } => {
                if shape.len() != 3 || *size == 0 || shape[1] < *size || shape[2] < *size {
                    return bad(*index, format!("max pool {size} on {shape:?}"));
                }
                shape = vec![shape[0], shape[1] / size, shape[2] / size];
            }
            QLayer::GlobalAvgPool => {
                if shape.len() != 3 {
                    return bad(*index, format!("global average pool on {shape:?}"));
                }
                shape = vec![shape[0]];
            }
            QLayer::Flatten => shape = vec![shape.iter().product()],
            QLayer::ChannelShuffle { groups } => {
                if shape.len() != 3 || *groups == 0 || !shape[0].is_multiple_of(*groups) {
                    return bad(*index, format!("shuffle {groups} on {shape:?}"));
                }
            }
            QLayer::Residual(r) => {
                if r.input != p {
                    return bad(
                        *index,
                        "residual input parameters differ from the previous output".into(),
                    );
                }
                *index += 1;
                let (body_shape, body_p) = check_chain(&r.body, shape.clone(), p, false, index)?;
                if body_shape != shape || body_p != r.body_output {
                    return bad(*index, "residual body changes shape or parameters".into());
                }
                p = r.output;
                continue;
            }
        }
        *index += 1;
    }
    Ok((shape, p))
}

fn act_params(t: &Tensor, bit_width: u8) -> Result<QuantParams> {
    Ok(calibrate(t, bit_width, Granularity::PerTensor)?[0].to_f32_scale())
}

/// Separable convolutions become their two convolutions.
fn expand(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .flat_map(|l| match l {
            Layer::SeparableConv(s) => vec![Layer::Conv(s.depthwise.clone()), Layer::Conv(s.pointwise.clone())],
            Layer::Residual(body) => vec![Layer::Residual(expand(body))],
            other => vec![other.clone()],
        })
        .collect()
}

fn lower(
    layers: &[Layer],
    mut x: Tensor,
    mut p: QuantParams,
    top: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<QLayer>, Tensor, QuantParams)> {
    let bits = p.bit_width;
    let mut out = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let layer = &layers[i];
        let mut y = layer.forward(&x, Mode::Eval, rng)?.0;
        match layer {
            Layer::Dense(_) | Layer::Conv(_) => {
                let relu = matches!(layers.get(i + 1), Some(Layer::Relu));
                if relu {
                    y = y.map(|v| v.max(0.0));
                    i += 1;
                }
                let last = top && i + 1 == layers.len();
                let output = if last { None } else { Some(act_params(&y, bits)?) };
                let (kind, w, b) = match layer {
                    Layer::Dense(d) => (
                        LinearKind::Dense {
                            in_features: d.in_features,
                            out_features: d.out_features,
                        },
                        &d.weight,
                        &d.bias,
                    ),
                    Layer::Conv(c) => (LinearKind::Conv(c.spec), &c.weight, &c.bias),
                    _ => unreachable!(),
                };
                out.push(QLayer::Linear(QLinear::from_float(
                    kind,
                    &w.value,
                    b.value.data(),
                    relu,
                    p,
                    output,
                )?));
                if let Some(o) = output {
                    p = o;
                }
            }
            Layer::Relu => out.push(QLayer::Relu),
            Layer::MaxPool { size } => out.push(QLayer::MaxPool { size: *size }),
            Layer::GlobalAvgPool => out.push(QLayer::GlobalAvgPool),
            Layer::Flatten => out.push(QLayer::Flatten),
            Layer::ChannelShuffle { groups } => out.push(QLayer::ChannelShuffle { groups: *groups }),
            Layer::Residual(body) => {
                let (qbody, _, body_p) = lower(body, x.clone(), p, false, rng)?;
                let output = act_params(&y, bits)?;
                out.push(QLayer::Residual(QResidual::new(qbody, p, body_p, output)?));
                p = output;
            }
            Layer::BatchNorm(_) | Layer::Dropout { .. } | Layer::SeparableConv(_) => {
                return Err(Error::invalid(format!(
                    "{} cannot be quantised directly",
                    layer.kind_name()
                )));
            }
        }
        x = y;
        i += 1;
    }
    Ok((out, x, p))
}

/// Folds batch norms, drops dropout, quantises weights per output channel
/// and calibrates every activation per tensor on `calib`.
pub fn quantize_network(net: &Network, calib: &Tensor, bit_width: u8) -> Result<QuantNetwork> {
    if calib.rank() != net.input_shape.len() + 1 || calib.shape()[1..] != net.input_shape[..] {
        return Err(Error::shape(
            "quantize_network",
            format!("calibration batch {:?} for input {:?}", calib.shape(), net.input_shape),
        ));
    }
    let stripped = net.strip_regularisation()?;
    let layers = expand(&stripped.layers);
    let input = act_params(calib, bit_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (qlayers, _, _) = lower(&layers, calib.clone(), input, true, &mut rng)?;
    QuantNetwork::new(net.arch, &net.input_shape, input, qlayers)
}
