use super::{QLayer, QuantNetwork};
use crate::nn::{Layer, Network};

/// Parameter payload of a model, split by how each part is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SizeProfile {
    /// Weight entries, masked ones included (storage is dense).
    pub weights: u64,
    /// One bias per output channel.
    pub biases: u64,
    /// Output channels carrying a per-channel `(Δ, z)` pair when quantised.
    pub channels: u64,
    /// Other float parameters, folded away by quantisation (batch norm).
    pub other: u64,
}

/// Shape of one weight layer, for describing networks analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv {
        in_channels: u64,
        out_channels: u64,
        k: u64,
        groups: u64,
    },
    Dense {
        in_features: u64,
        out_features: u64,
    },
}

impl SizeProfile {
    pub fn from_layers(layers: &[LayerShape]) -> Self {
        let mut p = SizeProfile::default();
        for l in layers {
            let (w, c) = match *l {
                LayerShape::Conv {
                    in_channels,
                    out_channels,
                    k,
                    groups,
                } => (out_channels * (in_channels / groups) * k * k, out_channels),
                LayerShape::Dense {
                    in_features,
                    out_features,
                } => (in_features * out_features, out_features),
            };
            p.weights += w;
            p.biases += c;
            p.channels += c;
        }
        p
    }

    pub fn of_network(net: &Network) -> Self {
        fn walk(layers: &[Layer], p: &mut SizeProfile) {
            for l in layers {
                match l {
                    Layer::Dense(d) => {
                        p.weights += d.weight.value.len() as u64;
                        p.biases += d.out_features as u64;
                        p.channels += d.out_features as u64;
                    }
                    Layer::Conv(c) => add_conv(c, p),
                    Layer::SeparableConv(s) => {
                        add_conv(&s.depthwise, p);
                        add_conv(&s.pointwise, p);
                    }
                    Layer::BatchNorm(bn) => p.other += 2 * bn.channels as u64,
                    Layer::Residual(body) => walk(body, p),
                    _ => {}
                }
            }
        }
        fn add_conv(c: &crate::nn::Conv, p: &mut SizeProfile) {
            p.weights += c.weight.value.len() as u64;
            p.biases += c.spec.n_filters as u64;
            p.channels += c.spec.n_filters as u64;
        }
        let mut p = SizeProfile::default();
        walk(&net.layers, &mut p);
        p
    }

    pub fn parameters(&self) -> u64 {
        self.weights + self.biases + self.other
    }

    /// Every parameter as a 32-bit float.
    pub fn float_bytes(&self) -> u64 {
        4 * self.parameters()
    }

    /// Weights at `bit_width` rounded up to whole bytes each, 32-bit biases,
    /// and an `f32` scale plus `i32` zero point per channel.
    pub fn quantized_bytes(&self, bit_width: u8) -> u64 {
        self.weights * weight_bytes(bit_width) as u64 + 4 * self.biases + 8 * self.channels
    }
}

pub(crate) fn weight_bytes(bit_width: u8) -> usize {
    if bit_width <= 8 {
        1
    } else {
        2
    }
}

/// Serialized parameter payload in bytes.
pub trait ModelSize {
    fn model_size_bytes(&self) -> u64;

    /// Size in MB of `2^20` bytes.
    fn model_size_mb(&self) -> f64 {
        self.model_size_bytes() as f64 / (1u64 << 20) as f64
    }
}

impl ModelSize for Network {
    fn model_size_bytes(&self) -> u64 {
        SizeProfile::of_network(self).float_bytes()
    }
}

impl ModelSize for QuantNetwork {
    fn model_size_bytes(&self) -> u64 {
        fn walk(layers: &[QLayer], bytes: &mut u64) {
            for l in layers {
                match l {
                    QLayer::Linear(q) => {
                        let c = q.weights.channels() as u64;
                        *bytes += q.weights.values.len() as u64 * weight_bytes(q.weights.values.bit_width()) as u64;
                        *bytes += 8 * c + 4 * q.bias.len() as u64;
                    }
                    QLayer::Residual(r) => walk(&r.body, bytes),
                    _ => {}
                }
            }
        }
        let mut bytes = 0;
        walk(&self.layers, &mut bytes);
        bytes
    }
}
