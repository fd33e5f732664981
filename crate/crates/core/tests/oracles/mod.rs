//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the kernels it is used to check.
#![allow(dead_code)]

use std::collections::BTreeSet;

use compresskit::conv::ConvSpec;
use compresskit::nn::{BatchNorm, Conv, Dense, Layer, Mode, SeparableConv};
use compresskit::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Distinct values in `(-1, 1)`, at least `1/(n+1)` from zero and from
/// each other, in random order. Keeps finite differences away from relu and
/// max-pool kinks.
pub fn spaced(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    // an even count of midpoints never contains zero
    let m = n + n % 2;
    let step = 2.0 / m as f64;
    let mut v: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * step - 1.0).collect();
    v.shuffle(rng);
    v.truncate(n);
    Tensor::new(shape, v).unwrap()
}

/// Grouped cross-correlation of one `[d, h, w]` image by a seven-deep loop
/// nest, with the number of multiplies performed (padding taps included).
pub fn direct_conv(x: &Tensor, filters: &Tensor, s: &ConvSpec) -> (Tensor, u64) {
    let (ipg, opg) = (s.d / s.groups, s.n_filters / s.groups);
    let (ho, wo) = (s.h_out(), s.w_out());
    let mut out = Tensor::zeros(&[s.n_filters, ho, wo]);
    let mut mults = 0u64;
    for n in 0..s.n_filters {
        let g = n / opg;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..ipg {
                    for p in 0..s.k {
                        for q in 0..s.k {
                            let r = (i * s.stride + p) as isize - s.padding as isize;
                            let t = (j * s.stride + q) as isize - s.padding as isize;
                            let v = if r < 0 || t < 0 || r >= s.h_in as isize || t >= s.w_in as isize {
                                0.0
                            } else {
                                x.get(&[g * ipg + c, r as usize, t as usize])
                            };
                            acc += v * filters.get(&[n, c, p, q]);
                            mults += 1;
                        }
                    }
                }
                out.set(&[n, i, j], acc);
            }
        }
    }
    (out, mults)
}

/// Grouped filters `[N, d/g, k, k]` written into a dense `[N, d, k, k]`
/// tensor that is zero outside each filter's group.
pub fn embed_grouped(filters: &Tensor, d: usize, groups: usize) -> Tensor {
    let [n, ipg, k, _] = [
        filters.shape()[0],
        filters.shape()[1],
        filters.shape()[2],
        filters.shape()[3],
    ];
    let opg = n / groups;
    let mut full = Tensor::zeros(&[n, d, k, k]);
    for o in 0..n {
        let g = o / opg;
        for c in 0..ipg {
            for p in 0..k {
                for q in 0..k {
                    full.set(&[o, g * ipg + c, p, q], filters.get(&[o, c, p, q]));
                }
            }
        }
    }
    full
}

/// Depthwise kernels `[d, k, k]` on the diagonal of a `[d, d, k, k]` filter.
pub fn embed_depthwise(kernels: &Tensor) -> Tensor {
    let [d, k] = [kernels.shape()[0], kernels.shape()[1]];
    let mut full = Tensor::zeros(&[d, d, k, k]);
    for c in 0..d {
        for p in 0..k {
            for q in 0..k {
                full.set(&[c, c, p, q], kernels.get(&[c, p, q]));
            }
        }
    }
    full
}

/// Multiplies of a depthwise pass followed by a pointwise pass, counted by
/// running both as direct loops.
pub fn separable_mults(s: &ConvSpec, rng: &mut impl Rng) -> u64 {
    let dw = ConvSpec {
        groups: s.d,
        n_filters: s.d,
        ..*s
    };
    let x = uniform(&[s.d, s.h_in, s.w_in], -1.0, 1.0, rng);
    let (mid, a) = direct_conv(&x, &uniform(&[s.d, 1, s.k, s.k], -1.0, 1.0, rng), &dw);
    let pw = ConvSpec::new(s.d, s.n_filters, 1, dw.h_out(), dw.w_out());
    let (_, b) = direct_conv(&mid, &uniform(&[s.n_filters, s.d, 1, 1], -1.0, 1.0, rng), &pw);
    a + b
}

/// Indices of the `k` smallest `|v|` among eligible entries by a full sort
/// on `(|v|, index)`.
pub fn smallest_by_sort(values: &[f64], eligible: &[bool], k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible[i]).collect();
    idx.sort_by(|&a, &b| values[a].abs().partial_cmp(&values[b].abs()).unwrap().then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

/// `|a − n| / max(|a|, |n|)`, with the denominator floored at `1e-7` so that
/// two vanishing gradients compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Layer kinds covered by the gradient checks.
pub const LAYER_KINDS: [&str; 13] = [
    "dense",
    "conv",
    "group_conv",
    "depthwise_conv",
    "separable_conv",
    "channel_shuffle",
    "batch_norm",
    "dropout",
    "relu",
    "max_pool",
    "global_avg_pool",
    "flatten",
    "residual",
];

fn fill(t: &mut Tensor, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
}

fn random_conv(spec: ConvSpec, rng: &mut impl Rng) -> Conv {
    let mut c = Conv::new(spec).unwrap();
    fill(&mut c.weight.value, rng);
    fill(&mut c.bias.value, rng);
    c
}

/// A randomly sized layer of `kind` with random parameters, the batch shape
/// it consumes, and the mode to differentiate it in.
pub fn random_layer(kind: &str, rng: &mut impl Rng) -> (Layer, Vec<usize>, Mode) {
    let b = rng.random_range(2..=3);
    let hw = rng.random_range(3..=5);
    let d = rng.random_range(1..=3);
    let k = rng.random_range(1..=3.min(hw));
    let pad = rng.random_range(0..=1);
    let stride = rng.random_range(1..=2);
    let image = vec![b, d, hw, hw];
    match kind {
        "dense" => {
            let (i, o) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let mut l = Dense::new(i, o);
            fill(&mut l.weight.value, rng);
            fill(&mut l.bias.value, rng);
            (Layer::Dense(l), vec![b, i], Mode::Train)
        }
        "conv" => {
            let n = rng.random_range(1..=3);
            let s = ConvSpec::new(d, n, k, hw, hw).with_padding(pad).with_stride(stride);
            (Layer::Conv(random_conv(s, rng)), image, Mode::Train)
        }
        "group_conv" => {
            let g = rng.random_range(2..=3);
            let (d, n) = (g * rng.random_range(1..=2), g * rng.random_range(1..=2));
            let s = ConvSpec::new(d, n, k, hw, hw)
                .with_groups(g)
                .with_padding(pad)
                .with_stride(stride);
            (Layer::Conv(random_conv(s, rng)), vec![b, d, hw, hw], Mode::Train)
        }
        "depthwise_conv" => {
            let s = ConvSpec::depthwise(d, k, hw, hw).with_padding(pad).with_stride(stride);
            (Layer::Conv(random_conv(s, rng)), image, Mode::Train)
        }
        "separable_conv" => {
            let dw = ConvSpec::depthwise(d, k, hw, hw).with_padding(pad).with_stride(stride);
            let n = rng.random_range(1..=3);
            let pw = ConvSpec::new(d, n, 1, dw.h_out(), dw.w_out());
            let layer = Layer::SeparableConv(SeparableConv {
                depthwise: random_conv(dw, rng),
                pointwise: random_conv(pw, rng),
            });
            (layer, image, Mode::Train)
        }
        "channel_shuffle" => {
            let g = rng.random_range(2..=3);
            let d = g * rng.random_range(1..=3);
            (Layer::ChannelShuffle { groups: g }, vec![b, d, hw, hw], Mode::Train)
        }
        "batch_norm" => {
            let mut bn = BatchNorm::new(d);
            for v in bn.gamma.value.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
            fill(&mut bn.beta.value, rng);
            (Layer::BatchNorm(bn), image, Mode::Train)
        }
        "dropout" => (
            Layer::Dropout {
                rate: rng.random_range(0.1..0.6),
            },
            image,
            Mode::Train,
        ),
        "relu" => (Layer::Relu, image, Mode::Train),
        "max_pool" => {
            let size = rng.random_range(2..=3);
            let side = size * rng.random_range(1..=3);
            (Layer::MaxPool { size }, vec![b, d, side, side], Mode::Train)
        }
        "global_avg_pool" => (Layer::GlobalAvgPool, image, Mode::Train),
        "flatten" => (Layer::Flatten, image, Mode::Train),
        "residual" => {
            let s = ConvSpec::new(d, d, 3.min(hw), hw, hw).with_padding(1);
            let body = vec![Layer::Conv(random_conv(s, rng)), Layer::Relu];
            (Layer::Residual(body), image, Mode::Train)
        }
        other => panic!("no generator for layer kind {other}"),
    }
}

fn run(layer: &Layer, x: &Tensor, mode: Mode, seed: u64) -> Tensor {
    layer.forward(x, mode, &mut rng(seed)).unwrap().0
}

/// Worst relative error between `backward` and central differences of
/// `L = Σ r ⊙ layer(x)` over every input entry and every parameter entry.
pub fn layer_gradcheck(layer: &Layer, x: &Tensor, mode: Mode, seed: u64, eps: f64) -> f64 {
    let y = run(layer, x, mode, seed);
    let r = uniform(y.shape(), -1.0, 1.0, &mut rng(seed ^ 0xABCD));
    let loss = |l: &Layer, x: &Tensor| -> f64 {
        run(l, x, mode, seed)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let (_, cache) = layer.forward(x, mode, &mut rng(seed)).unwrap();
    let mut grads: Vec<Tensor> = layer.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let gx = layer.backward(&cache, &r, &mut grads);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += eps;
        xm.data_mut()[i] -= eps;
        let numeric = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * eps);
        worst = worst.max(rel_err(gx.data()[i], numeric));
    }
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.params_mut()[pi].value.data_mut()[j] += eps;
            lm.params_mut()[pi].value.data_mut()[j] -= eps;
            let numeric = (loss(&lp, x) - loss(&lm, x)) / (2.0 * eps);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

/// Torchvision AlexNet with a 10-class head as `(in, out, k)` convolutions
/// and `(in, out)` dense layers.
pub const ALEXNET_CONVS: [(u64, u64, u64); 5] =
    [(3, 64, 11), (64, 192, 5), (192, 384, 3), (384, 256, 3), (256, 256, 3)];
pub const ALEXNET_DENSE: [(u64, u64); 3] = [(256 * 6 * 6, 4096), (4096, 4096), (4096, 10)];

/// Weights plus biases of the layers above, by hand arithmetic.
pub fn alexnet_parameters() -> u64 {
    let conv: u64 = ALEXNET_CONVS.iter().map(|&(i, o, k)| i * o * k * k + o).sum();
    let dense: u64 = ALEXNET_DENSE.iter().map(|&(i, o)| i * o + o).sum();
    conv + dense
}
