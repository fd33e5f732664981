//! Post-training affine quantisation `q = round(x/Δ + z)` with per-tensor
//! or per-channel parameters, integer-only inference and the `CKQ8` file
//! format.

pub mod format;
mod network;
mod size;

pub use network::{quantize_network, LinearKind, QLayer, QLinear, QResidual, QWeights, QuantNetwork};
pub use size::{LayerShape, ModelSize, SizeProfile};

use crate::error::{Error, Result};
use crate::tensor::{int_range, Tensor};

/// Scale, zero-point and bit width of one affine quantiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bit_width: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bit_width: u8) -> Result<Self> {
        if !(2..=16).contains(&bit_width) {
            return Err(Error::invalid(format!("bit width {bit_width} outside 2..=16")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale {scale} must be positive and finite")));
        }
        let (lo, hi) = int_range(bit_width);
        if !(lo..=hi).contains(&zero_point) {
            return Err(Error::invalid(format!(
                "zero point {zero_point} outside the {bit_width}-bit range [{lo}, {hi}]"
            )));
        }
        Ok(QuantParams {
            scale,
            zero_point,
            bit_width,
        })
    }

    pub fn range(&self) -> (i32, i32) {
        int_range(self.bit_width)
    }

    /// Same parameters with the scale rounded to `f32`, as stored on disk.
    pub fn to_f32_scale(self) -> Self {
        QuantParams {
            scale: self.scale as f32 as f64,
            ..self
        }
    }

    /// Real interval that quantises without clamping.
    pub fn representable(&self) -> (f64, f64) {
        let (lo, hi) = self.range();
        (dequantize(lo, self), dequantize(hi, self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One parameter pair per index along `axis`.
    PerChannel {
        axis: usize,
    },
}

/// `round(x/Δ + z)` with halves away from zero, clamped to the signed
/// `b`-bit range.
pub fn quantize(x: f64, p: &QuantParams) -> i32 {
    let (lo, hi) = p.range();
    let v = (x / p.scale + p.zero_point as f64).round();
    v.clamp(lo as f64, hi as f64) as i32
}

/// `Δ·(q − z)`.
pub fn dequantize(q: i32, p: &QuantParams) -> f64 {
    p.scale * (q as i64 - p.zero_point as i64) as f64
}

/// Asymmetric min-max parameters for values in `[min, max]`. The range is
/// widened to contain zero so that zero is exactly representable; an
/// all-zero range gets `Δ = 1, z = 0`.
pub fn calibrate_range(min: f64, max: f64, bit_width: u8) -> Result<QuantParams> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite(format!("calibration range [{min}, {max}]")));
    }
    if min > max {
        return Err(Error::invalid(format!("calibration range [{min}, {max}] is reversed")));
    }
    let (lo, hi) = (min.min(0.0), max.max(0.0));
    if hi == lo {
        return QuantParams::new(1.0, 0, bit_width);
    }
    let (qmin, qmax) = int_range(bit_width.clamp(2, 16));
    let scale = (hi - lo) / (qmax as f64 - qmin as f64);
    let z = (-lo / scale).round() as i64 + qmin as i64;
    QuantParams::new(scale, z.clamp(qmin as i64, qmax as i64) as i32, bit_width)
}

/// Min-max calibration of a tensor, one pair per tensor or per slice along
/// the channel axis. A channel keeps the whole-tensor pair instead of its
/// own when that reconstructs the channel with strictly smaller squared
/// error, so per-channel error never exceeds per-tensor error.
pub fn calibrate(t: &Tensor, bit_width: u8, granularity: Granularity) -> Result<Vec<QuantParams>> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("calibration tensor at flat index {i}")));
    }
    let whole = min_max(t.data(), bit_width)?;
    match granularity {
        Granularity::PerTensor => Ok(vec![whole]),
        Granularity::PerChannel { axis } => channel_slices(t, axis)?
            .iter()
            .map(|s| {
                let own = min_max(s, bit_width)?;
                Ok(if squared_error(s, &whole) < squared_error(s, &own) {
                    whole
                } else {
                    own
                })
            })
            .collect(),
    }
}

fn min_max(values: &[f64], bit_width: u8) -> Result<QuantParams> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    calibrate_range(min, max, bit_width)
}

/// Sum of squared reconstruction errors of `values` under `p`.
pub fn squared_error(values: &[f64], p: &QuantParams) -> f64 {
    values
        .iter()
        .map(|&x| (x - dequantize(quantize(x, p), p)).powi(2))
        .sum()
}

/// Elements of `t` grouped by their index along `axis`.
pub fn channel_slices(t: &Tensor, axis: usize) -> Result<Vec<Vec<f64>>> {
    if axis >= t.rank() {
        return Err(Error::invalid(format!("axis {axis} of a rank-{} tensor", t.rank())));
    }
    let channels = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = vec![Vec::with_capacity(t.len() / channels); channels];
    for (i, &v) in t.data().iter().enumerate() {
        out[(i / inner) % channels].push(v);
    }
    Ok(out)
}

/// A positive real multiplier `m0 · 2^(−shift)` with `m0` a Q31 value in
/// `[2^30, 2^31)`, applied with rounding half away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Multiplier {
    pub m0: i32,
    pub shift: u32,
}

impl Multiplier {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::invalid(format!("requantisation multiplier {m}")));
        }
        let (frac, exp) = frexp(m);
        let mut m0 = (frac * (1u64 << 31) as f64).round() as i64;
        let mut shift = 31 - exp;
        if m0 == 1 << 31 {
            m0 /= 2;
            shift -= 1;
        }
        if shift < 1 {
            return Err(Error::invalid(format!("requantisation multiplier {m} too large")));
        }
        if shift > 62 {
            // far below one output step for any 32-bit input
            return Ok(Multiplier { m0: 0, shift: 31 });
        }
        Ok(Multiplier {
            m0: m0 as i32,
            shift: shift as u32,
        })
    }

    /// `round(x · m0 / 2^shift)`.
    pub fn apply(&self, x: i64) -> i64 {
        rounding_shift(x * self.m0 as i64, self.shift)
    }

    pub fn to_real(&self) -> f64 {
        self.m0 as f64 / 2f64.powi(self.shift as i32)
    }
}

/// `m = frac · 2^exp` with `frac` in `[0.5, 1)`.
fn frexp(m: f64) -> (f64, i32) {
    let mut exp = m.log2().floor() as i32 + 1;
    let mut frac = m / 2f64.powi(exp);
    while frac >= 1.0 {
        frac /= 2.0;
        exp += 1;
    }
    while frac < 0.5 {
        frac *= 2.0;
        exp -= 1;
    }
    (frac, exp)
}

/// `x / 2^s` rounded half away from zero.
pub(crate) fn rounding_shift(x: i64, s: u32) -> i64 {
    if s == 0 {
        return x;
    }
    let half = 1i64 << (s - 1);
    if x >= 0 {
        (x + half) >> s
    } else {
        -((-x + half) >> s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(scale: f64, z: i32) -> QuantParams {
        QuantParams::new(scale, z, 8).unwrap()
    }

    #[test]
    fn zero_maps_to_zero_point() {
        for z in [-128, -3, 0, 17, 127] {
            let q = p(0.037, z);
            assert_eq!(quantize(0.0, &q), z);
            assert_eq!(dequantize(z, &q), 0.0);
        }
    }

    #[test]
    fn exact_multiples() {
        assert_eq!(quantize(2.5, &p(0.5, 0)), 5);
        assert_eq!(dequantize(5, &p(0.5, 0)), 2.5);
    }

    #[test]
    fn halves_round_away_from_zero() {
        let q = p(1.0, 0);
        assert_eq!(quantize(2.5, &q), 3);
        assert_eq!(quantize(-2.5, &q), -3);
        assert_eq!(quantize(0.5, &q), 1);
        assert_eq!(quantize(-0.5, &q), -1);
    }

    #[test]
    fn saturates_at_range_ends() {
        let q = p(0.1, 0);
        assert_eq!(quantize(1e6, &q), 127);
        assert_eq!(quantize(-1e6, &q), -128);
    }

    #[test]
    fn symmetric_range_scale() {
        let q = calibrate_range(-1.0, 1.0, 8).unwrap();
        assert_eq!(q.scale, 2.0 / 255.0);
        assert_eq!(dequantize(quantize(0.0, &q), &q), 0.0);
    }

    #[test]
    fn all_zero_slice_is_degenerate() {
        let t = Tensor::zeros(&[2, 3]);
        let ps = calibrate(&t, 8, Granularity::PerChannel { axis: 0 }).unwrap();
        assert_eq!(ps, vec![p(1.0, 0); 2]);
        assert!(t.data().iter().all(|&x| quantize(x, &ps[0]) == 0));
    }

    #[test]
    fn positive_range_still_holds_zero() {
        let q = calibrate_range(2.0, 4.0, 8).unwrap();
        assert_eq!(q.zero_point, -128);
        assert_eq!(quantize(0.0, &q), -128);
    }

    #[test]
    fn non_finite_calibration_rejected() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(calibrate(&t, 8, Granularity::PerTensor).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::new(0.0, 0, 8).is_err());
        assert!(QuantParams::new(1.0, 128, 8).is_err());
        assert!(QuantParams::new(1.0, 0, 1).is_err());
    }

    #[test]
    fn channel_slices_follow_axis() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(
            channel_slices(&t, 1).unwrap(),
            vec![vec![0.0, 3.0], vec![1.0, 4.0], vec![2.0, 5.0]]
        );
    }

    #[test]
    fn multiplier_reproduces_real_value() {
        for m in [1e-6, 0.000_123, 0.25, 0.5, 0.999_999_9, 1.0, 3.7] {
            let q = Multiplier::from_real(m).unwrap();
            assert!((1 << 30..1i64 << 31).contains(&(q.m0 as i64)), "{m}: {q:?}");
            assert!((q.to_real() - m).abs() <= m * 2f64.powi(-30));
        }
    }

    #[test]
    fn multiplier_rounds_half_away() {
        let half = Multiplier::from_real(0.5).unwrap();
        assert_eq!(half.apply(3), 2);
        assert_eq!(half.apply(-3), -2);
        assert_eq!(half.apply(4), 2);
    }
}
