//! Convolution kernels: standard, grouped, depthwise, pointwise, channel
//! shuffle and the textbook flipped-kernel convolution.
//!
//! All layer kernels use the cross-correlation convention (no kernel flip).
//! Images are `[channels, height, width]`, filters `[out, in / groups, k, k]`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub w_in: usize,
    pub h_in: usize,
    /// Input channels.
    pub d: usize,
    /// Output channels.
    pub n_filters: usize,
    /// Square kernel side.
    pub k: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1, no padding, one group.
    pub fn new(d: usize, n_filters: usize, k: usize, h_in: usize, w_in: usize) -> Self {
        ConvSpec {
            w_in,
            h_in,
            d,
            n_filters,
            k,
            groups: 1,
            stride: 1,
            padding: 0,
        }
    }

    /// One `k×k` kernel per channel: `groups == d == n_filters`.
    pub fn depthwise(d: usize, k: usize, h_in: usize, w_in: usize) -> Self {
        ConvSpec::new(d, d, k, h_in, w_in).with_groups(d)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("conv spec {self:?}: {msg}")));
        if self.d == 0 || self.n_filters == 0 || self.k == 0 || self.w_in == 0 || self.h_in == 0 {
            return bad("sizes must be positive".into());
        }
        if self.stride == 0 || self.groups == 0 {
            return bad("stride and groups must be positive".into());
        }
        if !self.d.is_multiple_of(self.groups) || !self.n_filters.is_multiple_of(self.groups) {
            return bad(format!(
                "groups {} must divide input {} and output {} channels",
                self.groups, self.d, self.n_filters
            ));
        }
        if self.k > self.h_in + 2 * self.padding || self.k > self.w_in + 2 * self.padding {
            return bad("kernel larger than padded input".into());
        }
        Ok(())
    }

    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.d / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.n_filters / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.n_filters, self.in_per_group(), self.k, self.k]
    }

    fn is_depthwise(&self) -> bool {
        self.in_per_group() == 1 && self.out_per_group() == 1
    }
}

fn expect_shape(op: &'static str, what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

/// Unfolds `channels` planes of an image into a `[channels·k·k, h_out·w_out]` matrix.
fn im2col(image: &[f64], channels: usize, spec: &ConvSpec, col: &mut [f64]) {
    let (h, w, k, s, p) = (spec.h_in, spec.w_in, spec.k, spec.stride, spec.padding);
    let (ho, wo) = (spec.h_out(), spec.w_out());
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into image planes.
fn col2im(col: &[f64], channels: usize, spec: &ConvSpec, image: &mut [f64]) {
    let (h, w, k, s, p) = (spec.h_in, spec.w_in, spec.k, spec.stride, spec.padding);
    let (ho, wo) = (spec.h_out(), spec.w_out());
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched grouped convolution forward: `input [B, d, h, w]`, `weight [N, d/g, k, k]`.
pub(crate) fn conv_forward(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let batch = input.shape().first().copied().unwrap_or(0);
    expect_shape("conv", "input", input.shape(), &[batch, spec.d, spec.h_in, spec.w_in])?;
    expect_shape("conv", "filters", weight.shape(), &spec.weight_shape())?;
    if let Some(b) = bias {
        if b.len() != spec.n_filters {
            return Err(Error::shape(
                "conv",
                format!("bias length {} != {}", b.len(), spec.n_filters),
            ));
        }
    }
    let (ho, wo) = (spec.h_out(), spec.w_out());
    let hw_out = ho * wo;
    let in_img = spec.d * spec.h_in * spec.w_in;
    let out_img = spec.n_filters * hw_out;
    let mut out = vec![0.0; batch * out_img];
    let (dg, ng, kk) = (spec.in_per_group(), spec.out_per_group(), spec.k * spec.k);

    if spec.is_depthwise() {
        for b in 0..batch {
            let img = &input.data()[b * in_img..(b + 1) * in_img];
            let dst = &mut out[b * out_img..(b + 1) * out_img];
            depthwise_forward(img, weight.data(), spec, dst);
        }
    } else {
        let mut col = vec![0.0; dg * kk * hw_out];
        for b in 0..batch {
            let img = &input.data()[b * in_img..(b + 1) * in_img];
            for g in 0..spec.groups {
                let plane = &img[g * dg * spec.h_in * spec.w_in..];
                im2col(plane, dg, spec, &mut col);
                let w = &weight.data()[g * ng * dg * kk..(g + 1) * ng * dg * kk];
                let dst = &mut out[b * out_img + g * ng * hw_out..][..ng * hw_out];
                gemm(
                    ng,
                    dg * kk,
                    hw_out,
                    1.0,
                    w,
                    (dg * kk, 1),
                    &col,
                    (hw_out, 1),
                    0.0,
                    dst,
                    (hw_out, 1),
                );
            }
        }
    }
    if let Some(bias) = bias {
        for img in out.chunks_mut(out_img) {
            for (plane, &bv) in img.chunks_mut(hw_out).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[batch, spec.n_filters, ho, wo], out)
}

fn depthwise_forward(img: &[f64], weight: &[f64], spec: &ConvSpec, dst: &mut [f64]) {
    let (h, w, k, s, p) = (spec.h_in, spec.w_in, spec.k, spec.stride, spec.padding);
    let (ho, wo) = (spec.h_out(), spec.w_out());
    for c in 0..spec.d {
        let plane = &img[c * h * w..(c + 1) * h * w];
        let ker = &weight[c * k * k..(c + 1) * k * k];
        let o = &mut dst[c * ho * wo..(c + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ki in 0..k {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * w..];
                    for kj in 0..k {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += row[ix as usize] * ker[ki * k + kj];
                        }
                    }
                }
                o[oy * wo + ox] = acc;
            }
        }
    }
}

/// Gradients of a batched grouped convolution.
pub(crate) struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> ConvGrads {
    let batch = input.shape()[0];
    let (ho, wo) = (spec.h_out(), spec.w_out());
    let hw_out = ho * wo;
    let hw_in = spec.h_in * spec.w_in;
    let in_img = spec.d * hw_in;
    let out_img = spec.n_filters * hw_out;
    let (dg, ng, kk) = (spec.in_per_group(), spec.out_per_group(), spec.k * spec.k);
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; spec.n_filters];

    for b in 0..batch {
        let gy = &grad_out.data()[b * out_img..(b + 1) * out_img];
        for (c, plane) in gy.chunks(hw_out).enumerate() {
            d_b[c] += plane.iter().sum::<f64>();
        }
    }

    if spec.is_depthwise() {
        let (h, w, k, s, p) = (spec.h_in, spec.w_in, spec.k, spec.stride, spec.padding);
        for b in 0..batch {
            let img = &input.data()[b * in_img..(b + 1) * in_img];
            let gy = &grad_out.data()[b * out_img..(b + 1) * out_img];
            let dx = &mut d_in[b * in_img..(b + 1) * in_img];
            for c in 0..spec.d {
                let plane = &img[c * hw_in..(c + 1) * hw_in];
                let dplane = &mut dx[c * hw_in..(c + 1) * hw_in];
                let ker = &weight.data()[c * kk..(c + 1) * kk];
                let dker = &mut d_w[c * kk..(c + 1) * kk];
                let g = &gy[c * hw_out..(c + 1) * hw_out];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = g[oy * wo + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ki in 0..k {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    let at = iy as usize * w + ix as usize;
                                    dker[ki * k + kj] += go * plane[at];
                                    dplane[at] += go * ker[ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let mut col = vec![0.0; dg * kk * hw_out];
        let mut dcol = vec![0.0; dg * kk * hw_out];
        for b in 0..batch {
            let img = &input.data()[b * in_img..(b + 1) * in_img];
            let gy = &grad_out.data()[b * out_img..(b + 1) * out_img];
            for g in 0..spec.groups {
                im2col(&img[g * dg * hw_in..], dg, spec, &mut col);
                let gyg = &gy[g * ng * hw_out..(g + 1) * ng * hw_out];
                let wg = &weight.data()[g * ng * dg * kk..(g + 1) * ng * dg * kk];
                let dwg = &mut d_w[g * ng * dg * kk..(g + 1) * ng * dg * kk];
                // dW[ng, dg·kk] += gy[ng, hw] · colᵀ[hw, dg·kk]
                gemm(
                    ng,
                    hw_out,
                    dg * kk,
                    1.0,
                    gyg,
                    (hw_out, 1),
                    &col,
                    (1, hw_out),
                    1.0,
                    dwg,
                    (dg * kk, 1),
                );
                // dcol[dg·kk, hw] = Wᵀ[dg·kk, ng] · gy[ng, hw]
                gemm(
                    dg * kk,
                    ng,
                    hw_out,
                    1.0,
                    wg,
                    (1, dg * kk),
                    gyg,
                    (hw_out, 1),
                    0.0,
                    &mut dcol,
                    (hw_out, 1),
                );
                col2im(&dcol, dg, spec, &mut d_in[b * in_img + g * dg * hw_in..]);
            }
        }
    }
    ConvGrads {
        input: Tensor::new(input.shape(), d_in).expect("input grad shape"),
        weight: Tensor::new(weight.shape(), d_w).expect("weight grad shape"),
        bias: d_b,
    }
}

fn single_image(op: &'static str, input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    expect_shape(op, "input", input.shape(), &[spec.d, spec.h_in, spec.w_in])?;
    input.clone().reshape(&[1, spec.d, spec.h_in, spec.w_in])
}

fn drop_batch(out: Tensor) -> Tensor {
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape).expect("drop batch axis")
}

/// Standard convolution of one image `[d, h, w]` with filters `[N, d, k, k]`.
pub fn conv2d(input: &Tensor, filters: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.groups != 1 {
        return Err(Error::invalid(format!(
            "conv2d expects groups = 1, got {}; use group_conv2d",
            spec.groups
        )));
    }
    let x = single_image("conv2d", input, spec)?;
    conv_forward(&x, filters, None, spec).map(drop_batch)
}

/// Grouped convolution: output channels `[j·N/g, (j+1)·N/g)` read only input
/// channels `[j·d/g, (j+1)·d/g)`. Filters are `[N, d/g, k, k]`.
pub fn group_conv2d(input: &Tensor, filters: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let x = single_image("group_conv2d", input, spec)?;
    conv_forward(&x, filters, None, spec).map(drop_batch)
}

/// Per-channel spatial convolution with kernels `[d, k, k]`.
///
/// `spec` supplies the spatial geometry; its channel fields must describe a
/// depthwise layer (`groups == d == n_filters`), see [`ConvSpec::depthwise`].
pub fn depthwise_conv2d(input: &Tensor, kernels: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if kernels.rank() != 3 || kernels.shape()[0] != spec.d {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!(
                "expected {} kernels of {}x{}, got {:?}",
                spec.d,
                spec.k,
                spec.k,
                kernels.shape()
            ),
        ));
    }
    if spec.groups != spec.d || spec.n_filters != spec.d {
        return Err(Error::invalid("depthwise spec needs groups == d == n_filters"));
    }
    let filters = kernels.clone().reshape(&[spec.d, 1, spec.k, spec.k])?;
    let x = single_image("depthwise_conv2d", input, spec)?;
    conv_forward(&x, &filters, None, spec).map(drop_batch)
}

/// Per-pixel linear map across channels; filters `[N, d, 1, 1]`.
pub fn pointwise_conv2d(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 || filters.rank() != 4 {
        return Err(Error::shape(
            "pointwise_conv2d",
            format!("input {:?}, filters {:?}", input.shape(), filters.shape()),
        ));
    }
    let [d, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let spec = ConvSpec::new(d, filters.shape()[0], 1, h, w);
    conv2d(input, filters, &spec)
}

/// Channel permutation `j·(d/g) + i → i·g + j`. `input` is `[d, h, w]` or
/// `[B, d, h, w]`.
pub fn channel_shuffle(input: &Tensor, groups: usize) -> Result<Tensor> {
    let axis = match input.rank() {
        3 => 0,
        4 => 1,
        r => return Err(Error::shape("channel_shuffle", format!("rank {r} input"))),
    };
    let d = input.shape()[axis];
    if groups == 0 || !d.is_multiple_of(groups) {
        return Err(Error::invalid(format!("groups {groups} must divide {d} channels")));
    }
    let perm = shuffle_permutation(d, groups);
    let plane: usize = input.shape()[axis + 1..].iter().product();
    let outer: usize = input.shape()[..axis].iter().product();
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        let src = &input.data()[o * d * plane..(o + 1) * d * plane];
        let dst = &mut out[o * d * plane..(o + 1) * d * plane];
        for (c, &to) in perm.iter().enumerate() {
            dst[to * plane..(to + 1) * plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
        }
    }
    Tensor::new(input.shape(), out)
}

/// `perm[c]` is the destination of source channel `c`.
pub fn shuffle_permutation(d: usize, groups: usize) -> Vec<usize> {
    let per = d / groups;
    (0..d).map(|c| (c % per) * groups + c / per).collect()
}

/// Rotates every trailing `k×k` plane by 180 degrees.
pub fn flip_180(kernel: &Tensor) -> Tensor {
    let r = kernel.rank();
    let (m, n) = (kernel.shape()[r - 2], kernel.shape()[r - 1]);
    let mut out = kernel.clone();
    for (src, dst) in kernel.data().chunks(m * n).zip(out.data_mut().chunks_mut(m * n)) {
        for p in 0..m {
            for q in 0..n {
                dst[(m - 1 - p) * n + (n - 1 - q)] = src[p * n + q];
            }
        }
    }
    out
}

/// True convolution `(I*K)[i,j] = Σ_p Σ_q I[i−p, j−q]·K[p,q]` over the region
/// where every index is valid. Output `[M−m+1, N−n+1]`, element `[i, j]`
/// holding `(I*K)[i+m−1, j+n−1]`.
pub fn conv2d_reference(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if image.rank() != 2 || kernel.rank() != 2 {
        return Err(Error::shape(
            "conv2d_reference",
            format!("image {:?} and kernel {:?} must be 2-D", image.shape(), kernel.shape()),
        ));
    }
    let (rows, cols) = (image.shape()[0], image.shape()[1]);
    let (m, n) = (kernel.shape()[0], kernel.shape()[1]);
    if m > rows || n > cols {
        return Err(Error::invalid(format!(
            "kernel {m}x{n} larger than image {rows}x{cols}"
        )));
    }
    let (ho, wo) = (rows - m + 1, cols - n + 1);
    let mut out = Tensor::zeros(&[ho, wo]);
    for i in 0..ho {
        for j in 0..wo {
            let (ci, cj) = (i + m - 1, j + n - 1);
            let mut acc = 0.0;
            for p in 0..m {
                for q in 0..n {
                    acc += image.get(&[ci - p, cj - q]) * kernel.get(&[p, q]);
                }
            }
            out.set(&[i, j], acc);
        }
    }
    Ok(out)
}
