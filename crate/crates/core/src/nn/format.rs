//! `CKNN` binary model files. The byte layout is described in
//! `docs/formats.md`.

use std::path::Path;

use super::layer::{BatchNorm, Conv, Dense, Layer, Mask, Param, SeparableConv};
use super::network::{ArchTag, Network};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::conv::ConvSpec;
use crate::error::Result;

pub const MAGIC: &[u8; 4] = b"CKNN";
pub const VERSION: u16 = 1;

mod kind {
    pub const DENSE: u8 = 1;
    pub const CONV: u8 = 2;
    pub const SEPARABLE: u8 = 3;
    pub const SHUFFLE: u8 = 4;
    pub const BATCH_NORM: u8 = 5;
    pub const DROPOUT: u8 = 6;
    pub const RELU: u8 = 7;
    pub const MAX_POOL: u8 = 8;
    pub const GLOBAL_AVG_POOL: u8 = 9;
    pub const FLATTEN: u8 = 10;
    pub const RESIDUAL: u8 = 11;
}

pub(crate) fn write_spec(w: &mut Writer, s: &ConvSpec) {
    for v in [s.d, s.n_filters, s.k, s.groups, s.stride, s.padding, s.h_in, s.w_in] {
        w.usize(v);
    }
}

/// Reads a geometry block and rejects weights that could not fit in the file.
pub(crate) fn read_spec(r: &mut Reader) -> Result<ConvSpec> {
    let at = r.pos();
    let mut v = [0usize; 8];
    for x in &mut v {
        *x = r.usize("conv geometry")?;
    }
    let spec = ConvSpec {
        d: v[0],
        n_filters: v[1],
        k: v[2],
        groups: v[3],
        stride: v[4],
        padding: v[5],
        h_in: v[6],
        w_in: v[7],
    };
    spec.validate().map_err(|e| r.error(at, e.to_string()))?;
    let weights = spec.weight_shape().iter().fold(1usize, |a, &d| a.saturating_mul(d));
    if weights > r.remaining() || spec.h_in.saturating_mul(spec.w_in) > 1 << 24 {
        return Err(r.error(at, "convolution larger than the file"));
    }
    Ok(spec)
}

fn write_table(w: &mut Writer, layers: &[Layer]) {
    w.usize(layers.len());
    for layer in layers {
        match layer {
            Layer::Dense(d) => {
                w.u8(kind::DENSE);
                w.usize(d.in_features);
                w.usize(d.out_features);
            }
            Layer::Conv(c) => {
                w.u8(kind::CONV);
                write_spec(w, &c.spec);
            }
            Layer::SeparableConv(s) => {
                w.u8(kind::SEPARABLE);
                write_spec(w, &s.depthwise.spec);
                write_spec(w, &s.pointwise.spec);
            }
            Layer::ChannelShuffle { groups } => {
                w.u8(kind::SHUFFLE);
                w.usize(*groups);
            }
            Layer::BatchNorm(bn) => {
                w.u8(kind::BATCH_NORM);
                w.usize(bn.channels);
                w.f64(bn.momentum);
                w.f64(bn.eps);
            }
            Layer::Dropout { rate } => {
                w.u8(kind::DROPOUT);
                w.f64(*rate);
            }
            Layer::Relu => w.u8(kind::RELU),
            Layer::MaxPool { size } => {
                w.u8(kind::MAX_POOL);
                w.usize(*size);
            }
            Layer::GlobalAvgPool => w.u8(kind::GLOBAL_AVG_POOL),
            Layer::Flatten => w.u8(kind::FLATTEN),
            Layer::Residual(body) => {
                w.u8(kind::RESIDUAL);
                write_table(w, body);
            }
        }
    }
}

fn read_table(r: &mut Reader, depth: usize) -> Result<Vec<Layer>> {
    if depth > 8 {
        return Err(r.error(r.pos(), "residual nesting too deep"));
    }
    let count = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos();
        let layer = match r.u8("layer kind")? {
            kind::DENSE => {
                let inf = r.usize("dense in")?;
                let outf = r.usize("dense out")?;
                if inf == 0 || outf == 0 {
                    return Err(r.error(at, "dense layer with zero features"));
                }
                if inf.saturating_mul(outf) > r.remaining() / 8 {
                    return Err(r.error(at, "dense layer larger than the file"));
                }
                Layer::Dense(Dense::new(inf, outf))
            }
            kind::CONV => Layer::Conv(Conv::new(read_spec(r)?)?),
            kind::SEPARABLE => Layer::SeparableConv(SeparableConv {
                depthwise: Conv::new(read_spec(r)?)?,
                pointwise: Conv::new(read_spec(r)?)?,
            }),
            kind::SHUFFLE => Layer::ChannelShuffle {
                groups: r.usize("shuffle groups")?,
            },
            kind::BATCH_NORM => {
                let mut bn = BatchNorm::new(r.usize("bn channels")?);
                bn.momentum = r.f64("bn momentum")?;
                bn.eps = r.f64("bn eps")?;
                Layer::BatchNorm(bn)
            }
            kind::DROPOUT => Layer::Dropout {
                rate: r.f64("dropout rate")?,
            },
            kind::RELU => Layer::Relu,
            kind::MAX_POOL => Layer::MaxPool {
                size: r.usize("pool size")?,
            },
            kind::GLOBAL_AVG_POOL => Layer::GlobalAvgPool,
            kind::FLATTEN => Layer::Flatten,
            kind::RESIDUAL => Layer::Residual(read_table(r, depth + 1)?),
            other => return Err(r.error(at, format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    Ok(layers)
}

fn write_param(w: &mut Writer, p: &Param) {
    w.usize(p.value.len());
    for &v in p.value.data() {
        w.f64(v);
    }
    match &p.mask {
        None => w.u8(0),
        Some(mask) => {
            w.u8(1);
            for chunk in mask.as_slice().chunks(8) {
                let byte = chunk
                    .iter()
                    .enumerate()
                    .fold(0u8, |b, (i, &k)| if k { b | (1 << i) } else { b });
                w.u8(byte);
            }
        }
    }
}

fn read_param(r: &mut Reader, p: &mut Param) -> Result<()> {
    let at = r.pos();
    let n = r.usize("blob length")?;
    if n != p.value.len() {
        return Err(r.error(at, format!("blob of {n} values, layer expects {}", p.value.len())));
    }
    for v in p.value.data_mut() {
        *v = r.f64("weight blob")?;
    }
    let at = r.pos();
    match r.u8("mask flag")? {
        0 => p.mask = None,
        1 => {
            let bytes = r.take(n.div_ceil(8), "mask bitmap")?;
            let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
            p.mask = Some(Mask::from_bools(keep));
        }
        f => return Err(r.error(at, format!("mask flag {f} is not 0 or 1"))),
    }
    Ok(())
}

fn write_blobs(w: &mut Writer, layers: &[Layer]) {
    for layer in layers {
        if let Layer::Residual(body) = layer {
            write_blobs(w, body);
            continue;
        }
        for p in layer.params() {
            write_param(w, p);
        }
        if let Layer::BatchNorm(bn) = layer {
            bn.running_mean.iter().chain(&bn.running_var).for_each(|&v| w.f64(v));
        }
    }
}

fn read_blobs(r: &mut Reader, layers: &mut [Layer]) -> Result<()> {
    for layer in layers {
        if let Layer::Residual(body) = layer {
            read_blobs(r, body)?;
            continue;
        }
        for p in layer.params_mut() {
            read_param(r, p)?;
        }
        if let Layer::BatchNorm(bn) = layer {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = r.f64("running statistics")?;
            }
        }
    }
    Ok(())
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(net.arch.code());
    w.u8(net.input_shape.len() as u8);
    for &d in &net.input_shape {
        w.usize(d);
    }
    write_table(&mut w, &net.layers);
    write_blobs(&mut w, &net.layers);
    w.buf
}

pub fn decode(bytes: &[u8], source: &Path) -> Result<Network> {
    let mut r = Reader::new(bytes, source);
    r.magic(MAGIC)?;
    let at = r.pos();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.error(at, format!("unsupported version {version}, expected {VERSION}")));
    }
    let at = r.pos();
    let code = r.u8("arch tag")?;
    let arch = ArchTag::from_code(code).ok_or_else(|| r.error(at, format!("unknown arch tag {code}")))?;
    let rank = r.u8("input rank")? as usize;
    let input_shape = (0..rank).map(|_| r.usize("input dim")).collect::<Result<Vec<_>>>()?;
    let table_at = r.pos();
    let mut layers = read_table(&mut r, 0)?;
    read_blobs(&mut r, &mut layers)?;
    r.finish()?;
    Network::new(arch, &input_shape, layers).map_err(|e| r.error(table_at, e.to_string()))
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    write_file(path, &encode(net))
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&read_file(path)?, path)
}
