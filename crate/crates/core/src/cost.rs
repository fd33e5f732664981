//! Closed-form multiply-accumulate counts for the convolution variants.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    DepthwiseSeparable,
    Grouped,
}

/// Multiply-accumulate count using the input plane size `w_in·h_in`, i.e.
/// assuming stride 1 and same-size output:
///
/// - standard: `w·h·d·N·k²`
/// - depthwise separable: `w·h·d·k² + w·h·d·N`
/// - grouped: `g·(w·h·k²·(d/g)·(N/g))`
///
/// The grouped count keeps the `k²` factor of the standard cost.
pub fn flop_count(spec: &ConvSpec, kind: ConvKind) -> Result<u64> {
    spec.validate()?;
    Ok(count(spec, kind, spec.w_in as u64 * spec.h_in as u64))
}

/// Same formulas evaluated on the true output plane `w_out·h_out`, which
/// matches an instrumented loop for any stride and padding.
pub fn flop_count_exact(spec: &ConvSpec, kind: ConvKind) -> Result<u64> {
    spec.validate()?;
    Ok(count(spec, kind, spec.w_out() as u64 * spec.h_out() as u64))
}

fn count(spec: &ConvSpec, kind: ConvKind, plane: u64) -> u64 {
    let (d, n, kk, g) = (
        spec.d as u64,
        spec.n_filters as u64,
        (spec.k * spec.k) as u64,
        spec.groups as u64,
    );
    match kind {
        ConvKind::Standard => plane * d * n * kk,
        ConvKind::DepthwiseSeparable => plane * d * kk + plane * d * n,
        ConvKind::Grouped => g * (plane * kk * (d / g) * (n / g)),
    }
}

/// `separable / standard` as a reduced fraction `(num, den)`; equals
/// `1/N + 1/k²`.
pub fn separable_ratio(spec: &ConvSpec) -> Result<(u64, u64)> {
    let num = flop_count(spec, ConvKind::DepthwiseSeparable)?;
    let den = flop_count(spec, ConvKind::Standard)?;
    if den == 0 {
        return Err(Error::invalid("zero standard cost"));
    }
    let g = gcd(num, den);
    Ok((num / g, den / g))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_spec() -> ConvSpec {
        ConvSpec::new(3, 16, 3, 32, 32).with_padding(1)
    }

    #[test]
    fn standard_cost() {
        assert_eq!(flop_count(&cifar_spec(), ConvKind::Standard).unwrap(), 442_368);
    }

    #[test]
    fn separable_cost() {
        assert_eq!(
            flop_count(&cifar_spec(), ConvKind::DepthwiseSeparable).unwrap(),
            27_648 + 49_152
        );
    }

    #[test]
    fn grouped_g1_is_standard() {
        let s = cifar_spec();
        assert_eq!(
            flop_count(&s, ConvKind::Grouped).unwrap(),
            flop_count(&s, ConvKind::Standard).unwrap()
        );
    }

    #[test]
    fn ratio_is_reduced() {
        // 1/16 + 1/9 = 25/144
        assert_eq!(separable_ratio(&cifar_spec()).unwrap(), (25, 144));
    }

    #[test]
    fn exact_variant_uses_output_plane() {
        let s = ConvSpec::new(2, 4, 3, 9, 9).with_stride(2);
        assert_eq!(s.h_out(), 4);
        assert_eq!(flop_count_exact(&s, ConvKind::Standard).unwrap(), 16 * 2 * 4 * 9);
    }
}
