//! Networks: ordered layer stacks, desk-scale architectures, forward and
//! backward passes, and removal of regularisation layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{BatchNorm, Cache, Conv, Dense, Layer, Mode, Param, SeparableConv};
use super::loss::softmax_cross_entropy;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchTag {
    MiniAlexnet,
    MiniMobilenet,
    MiniShufflenet,
    Custom,
}

impl ArchTag {
    pub const ALL: [ArchTag; 4] = [
        ArchTag::MiniAlexnet,
        ArchTag::MiniMobilenet,
        ArchTag::MiniShufflenet,
        ArchTag::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchTag::MiniAlexnet => "mini_alexnet",
            ArchTag::MiniMobilenet => "mini_mobilenet",
            ArchTag::MiniShufflenet => "mini_shufflenet",
            ArchTag::Custom => "custom",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ArchTag::MiniAlexnet => 0,
            ArchTag::MiniMobilenet => 1,
            ArchTag::MiniShufflenet => 2,
            ArchTag::Custom => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ArchTag::ALL.into_iter().find(|a| a.code() == code)
    }
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchTag::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchTag,
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Result of a forward pass: logits plus the per-layer caches.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub caches: Vec<Cache>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// One tensor per entry of [`Network::params`], in the same order.
    pub grads: Vec<Tensor>,
    pub pass: ForwardPass,
}

impl Network {
    pub fn new(arch: ArchTag, input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let net = Network {
            arch,
            input_shape: input_shape.to_vec(),
            layers,
        };
        net.output_shape()?;
        Ok(net)
    }

    /// Per-sample output shape, checking that adjacent layers agree.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::shape(
                "network",
                format!("final layer must produce [classes], got {shape:?}"),
            ));
        }
        Ok(shape)
    }

    pub fn classes(&self) -> usize {
        self.output_shape().map(|s| s[0]).unwrap_or(0)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Unmasked weights plus every non-prunable parameter.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.active_count()).sum()
    }

    /// Every stored parameter entry, masked or not.
    pub fn dense_param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn apply_masks(&mut self) {
        for p in self.params_mut() {
            p.apply_mask();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} does not match input shape [B, {:?}]",
                    batch.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let mut h = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h, mode, rng)?;
            caches.push(cache);
            h = out;
        }
        Ok(ForwardPass { logits: h, caches })
    }

    /// Eval-mode logits.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = batch.clone();
        for layer in &self.layers {
            h = layer.forward(&h, Mode::Eval, &mut rng)?.0;
        }
        Ok(h)
    }

    /// Mean cross-entropy and its gradient for every parameter. Masked
    /// weight entries receive exactly zero gradient.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        batch: &Tensor,
        labels: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Gradients> {
        let pass = self.forward(batch, mode, rng)?;
        let (loss, mut g) = softmax_cross_entropy(&pass.logits, labels)?;
        let params = self.params();
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut offset = grads.len();
        for (layer, cache) in self.layers.iter().zip(&pass.caches).rev() {
            let n = layer.param_tensor_count();
            offset -= n;
            g = layer.backward(cache, &g, &mut grads[offset..offset + n]);
        }
        for (grad, p) in grads.iter_mut().zip(&params) {
            if let Some(mask) = &p.mask {
                for (v, &k) in grad.data_mut().iter_mut().zip(mask.as_slice()) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(Gradients { loss, grads, pass })
    }

    pub fn update_running_stats(&mut self, caches: &[Cache]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            layer.update_running_stats(cache);
        }
    }

    /// He-style uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases,
    /// unit batch-norm scale. Masks are kept and re-applied.
    pub fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            init_layer(layer, rng);
        }
        self.apply_masks();
    }

    /// Copy with every dropout and batch-norm layer removed. Batch norms are
    /// folded into the preceding convolution or dense layer so eval-mode
    /// outputs are unchanged.
    pub fn strip_regularisation(&self) -> Result<Network> {
        let layers = strip_layers(&self.layers)?;
        Network::new(self.arch, &self.input_shape, layers)
    }

    /// Desk-scale analogue of one of the reference architectures.
    pub fn build(arch: ArchTag, input_shape: &[usize], classes: usize, width: usize, seed: u64) -> Result<Network> {
        if input_shape.len() != 3 || width == 0 || classes == 0 {
            return Err(Error::invalid(format!(
                "need [c, h, w] input, positive width and classes (got {input_shape:?}, {width}, {classes})"
            )));
        }
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let layers = match arch {
            ArchTag::MiniAlexnet => mini_alexnet(c, h, w, classes, width)?,
            ArchTag::MiniMobilenet => mini_mobilenet(c, h, w, classes, width)?,
            ArchTag::MiniShufflenet => mini_shufflenet(c, h, w, classes, width)?,
            ArchTag::Custom => return Err(Error::invalid("custom networks are assembled with Network::new")),
        };
        let mut net = Network::new(arch, input_shape, layers)?;
        net.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(net)
    }
}

fn uniform_fill<R: Rng + ?Sized>(t: &mut Tensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

fn init_conv<R: Rng + ?Sized>(c: &mut Conv, rng: &mut R) {
    let fan_in = (c.spec.in_per_group() * c.spec.k * c.spec.k) as f64;
    uniform_fill(&mut c.weight.value, (6.0 / fan_in).sqrt(), rng);
    c.bias.value.data_mut().fill(0.0);
}

fn init_layer<R: Rng + ?Sized>(layer: &mut Layer, rng: &mut R) {
    match layer {
        Layer::Dense(d) => {
            uniform_fill(&mut d.weight.value, (6.0 / d.in_features as f64).sqrt(), rng);
            d.bias.value.data_mut().fill(0.0);
        }
        Layer::Conv(c) => init_conv(c, rng),
        Layer::SeparableConv(s) => {
            init_conv(&mut s.depthwise, rng);
            init_conv(&mut s.pointwise, rng);
        }
        Layer::BatchNorm(bn) => {
            bn.gamma.value.data_mut().fill(1.0);
            bn.beta.value.data_mut().fill(0.0);
        }
        Layer::Residual(body) => body.iter_mut().for_each(|l| init_layer(l, rng)),
        _ => {}
    }
}

fn fold_into(target: &mut Layer, bn: &BatchNorm) -> bool {
    let (scale, shift) = bn.eval_affine();
    let (weight, bias) = match target {
        Layer::Dense(d) if d.out_features == bn.channels => (&mut d.weight, &mut d.bias),
        Layer::Conv(c) if c.spec.n_filters == bn.channels => (&mut c.weight, &mut c.bias),
        Layer::SeparableConv(s) if s.pointwise.spec.n_filters == bn.channels => {
            (&mut s.pointwise.weight, &mut s.pointwise.bias)
        }
        _ => return false,
    };
    let per_out = weight.value.len() / bn.channels;
    for (c, row) in weight.value.data_mut().chunks_mut(per_out).enumerate() {
        row.iter_mut().for_each(|v| *v *= scale[c]);
    }
    for (c, b) in bias.value.data_mut().iter_mut().enumerate() {
        *b = *b * scale[c] + shift[c];
    }
    weight.apply_mask();
    true
}

fn strip_layers(layers: &[Layer]) -> Result<Vec<Layer>> {
    let mut out: Vec<Layer> = Vec::with_capacity(layers.len());
    for layer in layers {
        match layer {
            Layer::Dropout { .. } => {}
            Layer::BatchNorm(bn) => {
                let folded = out.last_mut().is_some_and(|prev| fold_into(prev, bn));
                if !folded {
                    return Err(Error::invalid(
                        "batch_norm is not preceded by a convolution or dense layer to fold into",
                    ));
                }
            }
            Layer::Residual(body) => out.push(Layer::Residual(strip_layers(body)?)),
            other => out.push(other.clone()),
        }
    }
    Ok(out)
}

fn conv_layer(spec: ConvSpec) -> Result<Layer> {
    Ok(Layer::Conv(Conv::new(spec)?))
}

fn mini_alexnet(c: usize, h: usize, w: usize, classes: usize, m: usize) -> Result<Vec<Layer>> {
    let (c1, c2, c3, hidden) = (16 * m, 32 * m, 32 * m, 64 * m);
    if h < 4 || w < 4 {
        return Err(Error::invalid("mini_alexnet needs inputs of at least 4x4"));
    }
    let (h2, w2) = (h / 2, w / 2);
    let (h4, w4) = (h2 / 2, w2 / 2);
    Ok(vec![
        conv_layer(ConvSpec::new(c, c1, 3, h, w).with_padding(1))?,
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        conv_layer(ConvSpec::new(c1, c2, 3, h2, w2).with_padding(1))?,
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        conv_layer(ConvSpec::new(c2, c3, 3, h4, w4).with_padding(1))?,
        Layer::Relu,
        Layer::Flatten,
        Layer::Dropout { rate: 0.5 },
        Layer::Dense(Dense::new(c3 * h4 * w4, hidden)),
        Layer::Relu,
        Layer::Dropout { rate: 0.5 },
        Layer::Dense(Dense::new(hidden, classes)),
    ])
}

/// Expansion → depthwise-separable projection, with a skip connection when
/// the block keeps its shape.
fn inverted_residual(
    cin: usize,
    cout: usize,
    stride: usize,
    expand: usize,
    (h, w): (usize, usize),
) -> Result<(Vec<Layer>, (usize, usize))> {
    let hidden = cin * expand;
    let dw = ConvSpec::depthwise(hidden, 3, h, w).with_stride(stride).with_padding(1);
    let (ho, wo) = (dw.h_out(), dw.w_out());
    let body = vec![
        conv_layer(ConvSpec::new(cin, hidden, 1, h, w))?,
        Layer::BatchNorm(BatchNorm::new(hidden)),
        Layer::Relu,
        Layer::SeparableConv(SeparableConv {
            depthwise: Conv::new(dw)?,
            pointwise: Conv::new(ConvSpec::new(hidden, cout, 1, ho, wo))?,
        }),
        Layer::BatchNorm(BatchNorm::new(cout)),
    ];
    let layers = if stride == 1 && cin == cout {
        vec![Layer::Residual(body)]
    } else {
        body
    };
    Ok((layers, (ho, wo)))
}

fn mini_mobilenet(c: usize, h: usize, w: usize, classes: usize, m: usize) -> Result<Vec<Layer>> {
    let stem = 16 * m;
    let mut layers = vec![
        conv_layer(ConvSpec::new(c, stem, 3, h, w).with_padding(1))?,
        Layer::BatchNorm(BatchNorm::new(stem)),
        Layer::Relu,
    ];
    let blocks = [
        (stem, 16 * m, 1),
        (16 * m, 24 * m, 2),
        (24 * m, 24 * m, 1),
        (24 * m, 32 * m, 2),
    ];
    let mut hw = (h, w);
    for (cin, cout, stride) in blocks {
        let (block, next) = inverted_residual(cin, cout, stride, 2, hw)?;
        layers.extend(block);
        hw = next;
    }
    layers.extend([
        Layer::GlobalAvgPool,
        Layer::Dropout { rate: 0.2 },
        Layer::Dense(Dense::new(32 * m, classes)),
    ]);
    Ok(layers)
}

const SHUFFLE_GROUPS: usize = 2;

/// Grouped pointwise → channel shuffle → depthwise → pointwise.
fn shuffle_block(
    cin: usize,
    cout: usize,
    stride: usize,
    (h, w): (usize, usize),
) -> Result<(Vec<Layer>, (usize, usize))> {
    let g = SHUFFLE_GROUPS;
    let dw = ConvSpec::depthwise(cout, 3, h, w).with_stride(stride).with_padding(1);
    let (ho, wo) = (dw.h_out(), dw.w_out());
    let body = vec![
        conv_layer(ConvSpec::new(cin, cout, 1, h, w).with_groups(g))?,
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
        Layer::ChannelShuffle { groups: g },
        conv_layer(dw)?,
        Layer::BatchNorm(BatchNorm::new(cout)),
        conv_layer(ConvSpec::new(cout, cout, 1, ho, wo))?,
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
    ];
    let layers = if stride == 1 && cin == cout {
        vec![Layer::Residual(body)]
    } else {
        body
    };
    Ok((layers, (ho, wo)))
}

fn mini_shufflenet(c: usize, h: usize, w: usize, classes: usize, m: usize) -> Result<Vec<Layer>> {
    let stem = 16 * m;
    let mut layers = vec![
        conv_layer(ConvSpec::new(c, stem, 3, h, w).with_padding(1))?,
        Layer::BatchNorm(BatchNorm::new(stem)),
        Layer::Relu,
    ];
    let stages = [(stem, 16 * m, 1), (16 * m, 32 * m, 2), (32 * m, 64 * m, 2)];
    let mut hw = (h, w);
    for (cin, cout, stride) in stages {
        let (block, next) = shuffle_block(cin, cout, stride, hw)?;
        layers.extend(block);
        hw = next;
    }
    layers.extend([
        Layer::GlobalAvgPool,
        Layer::Dropout { rate: 0.2 },
        Layer::Dense(Dense::new(64 * m, classes)),
    ]);
    Ok(layers)
}
