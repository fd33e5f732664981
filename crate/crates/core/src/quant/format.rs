//! `CKQ8` quantised model files. The byte layout is described in
//! `docs/formats.md`.

use std::path::Path;

use super::network::{LinearKind, QLinear, QResidual};
use super::size::weight_bytes;
use super::{QLayer, QWeights, QuantNetwork, QuantParams};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::nn::format::{read_spec, write_spec};
use crate::nn::ArchTag;
use crate::tensor::QTensor;

pub const MAGIC: &[u8; 4] = b"CKQ8";
pub const VERSION: u16 = 1;

mod kind {
    pub const DENSE: u8 = 1;
    pub const CONV: u8 = 2;
    pub const SHUFFLE: u8 = 4;
    pub const RELU: u8 = 7;
    pub const MAX_POOL: u8 = 8;
    pub const GLOBAL_AVG_POOL: u8 = 9;
    pub const FLATTEN: u8 = 10;
    pub const RESIDUAL: u8 = 11;
}

const FLAG_RELU: u8 = 1;
const FLAG_DEQUANT: u8 = 2;

fn write_params(w: &mut Writer, p: &QuantParams) {
    w.f32(p.scale as f32);
    w.i32(p.zero_point);
    w.u8(p.bit_width);
}

fn read_params(r: &mut Reader) -> Result<QuantParams> {
    let at = r.pos();
    let scale = r.f32("activation scale")? as f64;
    let z = r.i32("activation zero point")?;
    let b = r.u8("activation bit width")?;
    QuantParams::new(scale, z, b).map_err(|e| r.error(at, e.to_string()))
}

fn write_linear(w: &mut Writer, l: &QLinear) {
    match l.kind {
        LinearKind::Dense {
            in_features,
            out_features,
        } => {
            w.u8(kind::DENSE);
            w.usize(in_features);
            w.usize(out_features);
        }
        LinearKind::Conv(spec) => {
            w.u8(kind::CONV);
            write_spec(w, &spec);
        }
    }
    let mut flags = 0;
    if l.relu {
        flags |= FLAG_RELU;
    }
    if l.output.is_none() {
        flags |= FLAG_DEQUANT;
    }
    w.u8(flags);
    write_params(w, &l.input);
    if let Some(out) = &l.output {
        write_params(w, out);
    }
    let bits = l.weights.values.bit_width();
    w.u8(bits);
    w.usize(l.weights.channels());
    l.weights.params.iter().for_each(|p| w.f32(p.scale as f32));
    l.weights.params.iter().for_each(|p| w.i32(p.zero_point));
    for &q in l.weights.values.data() {
        if weight_bytes(bits) == 1 {
            w.u8(q as i8 as u8);
        } else {
            w.bytes(&(q as i16).to_le_bytes());
        }
    }
    l.bias.iter().for_each(|&b| w.i32(b));
}

fn read_linear(r: &mut Reader, code: u8) -> Result<QLinear> {
    let at = r.pos();
    let kind = if code == kind::DENSE {
        let in_features = r.usize("dense in")?;
        let out_features = r.usize("dense out")?;
        if in_features == 0 || out_features == 0 || in_features.saturating_mul(out_features) > r.remaining() {
            return Err(r.error(at, "dense layer larger than the file"));
        }
        LinearKind::Dense {
            in_features,
            out_features,
        }
    } else {
        LinearKind::Conv(read_spec(r)?)
    };
    let at = r.pos();
    let flags = r.u8("layer flags")?;
    if flags & !(FLAG_RELU | FLAG_DEQUANT) != 0 {
        return Err(r.error(at, format!("unknown layer flags {flags:#04x}")));
    }
    let input = read_params(r)?;
    let output = if flags & FLAG_DEQUANT == 0 {
        Some(read_params(r)?)
    } else {
        None
    };
    let at = r.pos();
    let bits = r.u8("weight bit width")?;
    let channels = r.usize("channel count")?;
    let (shape, expected) = match kind {
        LinearKind::Dense {
            in_features,
            out_features,
        } => (vec![out_features, in_features], out_features),
        LinearKind::Conv(s) => (s.weight_shape().to_vec(), s.n_filters),
    };
    if channels != expected || !(2..=16).contains(&bits) {
        return Err(r.error(
            at,
            format!("{channels} channels at {bits} bits, layer expects {expected}"),
        ));
    }
    let scales = (0..channels)
        .map(|_| r.f32("channel scale").map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    let at = r.pos();
    let params = scales
        .into_iter()
        .map(|s| {
            let z = r.i32("channel zero point")?;
            QuantParams::new(s, z, bits).map_err(|e| r.error(at, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let at = r.pos();
    let raw = r.take(n * weight_bytes(bits), "packed weights")?;
    let data: Vec<i32> = if weight_bytes(bits) == 1 {
        raw.iter().map(|&b| b as i8 as i32).collect()
    } else {
        raw.chunks(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect()
    };
    let values = QTensor::new(&shape, data, bits).map_err(|e| r.error(at, e.to_string()))?;
    let bias = (0..channels).map(|_| r.i32("bias")).collect::<Result<Vec<_>>>()?;
    QLinear::new(
        kind,
        QWeights { values, params },
        bias,
        flags & FLAG_RELU != 0,
        input,
        output,
    )
    .map_err(|e| r.error(at, e.to_string()))
}

fn write_table(w: &mut Writer, layers: &[QLayer]) {
    w.usize(layers.len());
    for layer in layers {
        match layer {
            QLayer::Linear(l) => write_linear(w, l),
            QLayer::Relu => w.u8(kind::RELU),
            QLayer::MaxPool { size } => {
                w.u8(kind::MAX_POOL);
                w.usize(*size);
            }
            QLayer::GlobalAvgPool => w.u8(kind::GLOBAL_AVG_POOL),
            QLayer::Flatten => w.u8(kind::FLATTEN),
            QLayer::ChannelShuffle { groups } => {
                w.u8(kind::SHUFFLE);
                w.usize(*groups);
            }
            QLayer::Residual(res) => {
                w.u8(kind::RESIDUAL);
                write_params(w, &res.input);
                write_params(w, &res.body_output);
                write_params(w, &res.output);
                write_table(w, &res.body);
            }
        }
    }
}

fn read_table(r: &mut Reader, depth: usize) -> Result<Vec<QLayer>> {
    if depth > 8 {
        return Err(r.error(r.pos(), "residual nesting too deep"));
    }
    let count = r.usize("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos();
        let layer = match r.u8("layer kind")? {
            code @ (kind::DENSE | kind::CONV) => QLayer::Linear(read_linear(r, code)?),
            kind::RELU => QLayer::Relu,
            kind::MAX_POOL => QLayer::MaxPool {
                size: r.usize("pool size")?,
            },
            kind::GLOBAL_AVG_POOL => QLayer::GlobalAvgPool,
            kind::FLATTEN => QLayer::Flatten,
            kind::SHUFFLE => QLayer::ChannelShuffle {
                groups: r.usize("shuffle groups")?,
            },
            kind::RESIDUAL => {
                let input = read_params(r)?;
                let body_output = read_params(r)?;
                let output = read_params(r)?;
                let body = read_table(r, depth + 1)?;
                QLayer::Residual(
                    QResidual::new(body, input, body_output, output).map_err(|e| r.error(at, e.to_string()))?,
                )
            }
            other => return Err(r.error(at, format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    Ok(layers)
}

pub fn encode(net: &QuantNetwork) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(net.arch.code());
    w.u8(net.input_shape.len() as u8);
    for &d in &net.input_shape {
        w.usize(d);
    }
    write_params(&mut w, &net.input);
    write_table(&mut w, &net.layers);
    w.buf
}

pub fn decode(bytes: &[u8], source: &Path) -> Result<QuantNetwork> {
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
    let input = read_params(&mut r)?;
    let table_at = r.pos();
    let layers = read_table(&mut r, 0)?;
    r.finish()?;
    QuantNetwork::new(arch, &input_shape, input, layers).map_err(|e| match e {
        e @ crate::Error::AccumulatorOverflow { .. } => e,
        e => r.error(table_at, e.to_string()),
    })
}

pub fn save(net: &QuantNetwork, path: &Path) -> Result<()> {
    write_file(path, &encode(net))
}

pub fn load(path: &Path) -> Result<QuantNetwork> {
    decode(&read_file(path)?, path)
}
