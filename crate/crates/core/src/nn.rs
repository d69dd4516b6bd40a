//! Minimal layer toolkit on top of candle.
//!
//! Convolutional activations use a channel-major `(C, B, H, W)` layout so that
//! every input plane of a 3x3 convolution is one contiguous `H x W` block.
//! Stride-1 convolutions run a direct kernel over zero-padded planes; strided
//! ones go through a patch matrix and a matrix product. For
//! single-channel images this layout shares memory with `(B, 1, H, W)`.

use std::ops::AddAssign;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::Rng as _;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::Rng;

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

type Dims4 = (usize, usize, usize, usize);

/// Wraps a per-plane kernel so it runs with AVX2 enabled when the CPU has it.
macro_rules! wide_dispatch {
    ($name:ident => $imp:ident($($arg:ident: $ty:ty),*)) => {
        fn $name<T: WithDType>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") {
                    #[target_feature(enable = "avx2")]
                    unsafe fn wide<T: WithDType>($($arg: $ty),*) {
                        $imp($($arg),*)
                    }
                    // SAFETY: the feature was detected at runtime just above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $imp($($arg),*)
        }
    };
}

/// Stride-1 kernel on planes padded to width `w2 = W + 2`:
/// `acc[q] += sum_k w[k] * x[q + (k / 3) * w2 + k % 3]`.
#[inline(always)]
fn padded_axpy9<T: WithDType>(acc: &mut [T], x: &[T], w: &[T; 9], w2: usize) {
    let n = acc.len();
    let taps: [&[T]; 9] = std::array::from_fn(|k| &x[(k / 3) * w2 + k % 3..][..n]);
    for q in 0..n {
        acc[q] += w[0] * taps[0][q]
            + w[1] * taps[1][q]
            + w[2] * taps[2][q]
            + w[3] * taps[3][q]
            + w[4] * taps[4][q]
            + w[5] * taps[5][q]
            + w[6] * taps[6][q]
            + w[7] * taps[7][q]
            + w[8] * taps[8][q];
    }
}

/// `out[k] += sum_q g[q] * x[q + (k / 3) * w2 + k % 3]`, lane-blocked so the
/// reduction vectorizes.
#[inline(always)]
fn padded_dot9<T: WithDType>(out: &mut [T; 9], g: &[T], x: &[T], w2: usize) {
    const LANES: usize = 8;
    let n = g.len();
    let taps: [&[T]; 9] = std::array::from_fn(|k| &x[(k / 3) * w2 + k % 3..][..n]);
    let mut lanes = [[T::zero(); LANES]; 9];
    let full = n / LANES * LANES;
    for base in (0..full).step_by(LANES) {
        let gq = &g[base..base + LANES];
        for (k, lane) in lanes.iter_mut().enumerate() {
            let xq = &taps[k][base..base + LANES];
            for l in 0..LANES {
                lane[l] += gq[l] * xq[l];
            }
        }
    }
    for (k, lane) in lanes.iter().enumerate() {
        let mut total = lane.iter().fold(T::zero(), |s, v| s + *v);
        for q in full..n {
            total += g[q] * taps[k][q];
        }
        out[k] += total;
    }
}

wide_dispatch!(padded_axpy9_any => padded_axpy9(acc: &mut [T], x: &[T], w: &[T; 9], w2: usize));
wide_dispatch!(padded_dot9_any => padded_dot9(out: &mut [T; 9], g: &[T], x: &[T], w2: usize));

/// Copies `(P, H, W)` planes into zero-bordered `(P, H+2, W+2)` planes.
fn pad_planes<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let w2 = w + 2;
    let mut out = vec![T::zero(); planes * (h + 2) * w2];
    for p in 0..planes {
        for y in 0..h {
            out[(p * (h + 2) + y + 1) * w2 + 1..][..w].copy_from_slice(&x[(p * h + y) * w..][..w]);
        }
    }
    out
}

/// Stride-1 convolution of already padded `(C, B, H+2, W+2)` input, plus an
/// optional per-channel bias and ReLU.
fn conv_forward_padded<T: WithDType>(
    xpad: &[T],
    (c, b, h, w): Dims4,
    wt: &[T],
    o: usize,
    bias: Option<&[T]>,
    relu: bool,
) -> Vec<T> {
    let w2 = w + 2;
    let span = h * w2 - 2;
    let mut out = vec![T::zero(); o * b * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(i, plane)| {
        let (oc, bi) = (i / b, i % b);
        let mut acc = vec![bias.map_or(T::zero(), |bv| bv[oc]); h * w2];
        for ci in 0..c {
            let xp = &xpad[(ci * b + bi) * (h + 2) * w2..][..(h + 2) * w2];
            let taps: &[T; 9] = wt[(oc * c + ci) * 9..][..9].try_into().expect("nine taps");
            padded_axpy9_any(&mut acc[..span], xp, taps, w2);
        }
        for y in 0..h {
            let dst = &mut plane[y * w..][..w];
            dst.copy_from_slice(&acc[y * w2..][..w]);
            if relu {
                dst.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                });
            }
        }
    });
    out
}

/// Stride-1 3x3 convolution, padding 1: `x (C, B, H, W)`, `wt (O, C*9)` with
/// column `c*9 + ky*3 + kx`; returns `(O, B, H, W)`.
#[cfg(test)]
fn conv_forward<T: WithDType>(x: &[T], dims: Dims4, wt: &[T], o: usize) -> Vec<T> {
    let (c, b, h, w) = dims;
    conv_forward_padded(&pad_planes(x, c * b, h, w), dims, wt, o, None, false)
}

/// Gradient of [`conv_forward`] with respect to its input: a full correlation
/// with the channel-transposed, spatially flipped kernel.
fn conv_input_grad<T: WithDType>(g: &[T], (c, b, h, w): Dims4, wt: &[T], o: usize) -> Vec<T> {
    let mut flipped = vec![T::zero(); c * o * 9];
    for oc in 0..o {
        for ci in 0..c {
            for k in 0..9 {
                flipped[(ci * o + oc) * 9 + k] = wt[(oc * c + ci) * 9 + 8 - k];
            }
        }
    }
    conv_forward_padded(&pad_planes(g, o * b, h, w), (o, b, h, w), &flipped, c, None, false)
}

/// Gradient of [`conv_forward`] with respect to its weight, `(O, C*9)`.
fn conv_weight_grad<T: WithDType>(g: &[T], x: &[T], (c, b, h, w): Dims4, o: usize) -> Vec<T> {
    let w2 = w + 2;
    let span = h * w2 - 2;
    let xpad = pad_planes(x, c * b, h, w);
    // Gradient planes laid out at the padded width, zeros in the two spare columns.
    let mut gw = vec![T::zero(); o * b * h * w2];
    for p in 0..o * b {
        for y in 0..h {
            gw[(p * h + y) * w2..][..w].copy_from_slice(&g[(p * h + y) * w..][..w]);
        }
    }
    let mut out = vec![T::zero(); o * c * 9];
    out.par_chunks_mut(c * 9).enumerate().for_each(|(oc, row)| {
        for ci in 0..c {
            let mut taps = [T::zero(); 9];
            for bi in 0..b {
                let gp = &gw[(oc * b + bi) * h * w2..][..span];
                let xp = &xpad[(ci * b + bi) * (h + 2) * w2..][..(h + 2) * w2];
                padded_dot9_any(&mut taps, gp, xp, w2);
            }
            row[ci * 9..][..9].copy_from_slice(&taps);
        }
    });
    out
}

/// `(C, B, H, W)` to 3x3 patches `(9C, B*Ho*Wo)`, zero padding 1; row `c*9 + ky*3 + kx`.
/// Used for strided convolutions, whose patch matrix is small.
fn im2col<T: WithDType>(x: &[T], (c, b, h, w): Dims4, stride: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = b * ho * wo;
    let mut out = vec![T::zero(); c * 9 * n];
    for ci in 0..c {
        for k in 0..9 {
            let (ky, kx) = (k / 3, k % 3);
            let row = &mut out[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
            for bi in 0..b {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[((ci * b + bi) * h + iy as usize) * w..][..w];
                    let dst = &mut row[(bi * ho + oy) * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im<T: WithDType>(g: &[T], (c, b, h, w): Dims4, stride: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = b * ho * wo;
    let mut out = vec![T::zero(); c * b * h * w];
    for ci in 0..c {
        for k in 0..9 {
            let (ky, kx) = (k / 3, k % 3);
            let row = &g[(ci * 9 + k) * n..(ci * 9 + k + 1) * n];
            for bi in 0..b {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut out[((ci * b + bi) * h + iy as usize) * w..][..w];
                    let src = &row[(bi * ho + oy) * wo..][..wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col {
    stride: usize,
}

struct Col2Im {
    dims: Dims4,
    stride: usize,
}

/// Stride-1 `conv(x, weight) + bias` on `(C, B, H, W)` input, `(O, C*9)`
/// weight and `(O,)` bias, optionally followed by ReLU.
struct Conv3x3Op {
    relu: bool,
}

/// `(grad, output) -> grad * (output > 0)`.
struct ReluMask;

/// `(grad_out, weight) -> grad_input`.
struct ConvInputGrad {
    dims: Dims4,
}

/// `(grad_out, input) -> grad_weight`.
struct ConvWeightGrad {
    dims: Dims4,
}

fn contiguous_slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

macro_rules! dispatch_float {
    ($storage:expr, $layout:expr, |$s:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $s = contiguous_slice(v, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $s = contiguous_slice(v, $layout)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("custom op supports f32 and f64 only"),
        }
    };
}

macro_rules! dispatch_float2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(u), CpuStorage::F32(v)) => {
                let ($a, $b) = (contiguous_slice(u, $l1)?, contiguous_slice(v, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v)) => {
                let ($a, $b) = (contiguous_slice(u, $l1)?, contiguous_slice(v, $l2)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("custom op supports matching f32 or f64 inputs only"),
        }
    };
}

macro_rules! dispatch_float3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, |$a:ident, $b:ident, $c:ident| $body:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(u), CpuStorage::F32(v), CpuStorage::F32(z)) => {
                let ($a, $b, $c) = (contiguous_slice(u, $l1)?, contiguous_slice(v, $l2)?, contiguous_slice(z, $l3)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v), CpuStorage::F64(z)) => {
                let ($a, $b, $c) = (contiguous_slice(u, $l1)?, contiguous_slice(v, $l2)?, contiguous_slice(z, $l3)?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("custom op supports matching f32 or f64 inputs only"),
        }
    };
}

impl CustomOp3 for Conv3x3Op {
    fn name(&self) -> &'static str {
        "conv3x3"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = xl.shape().dims4()?;
        let (c, b, h, w) = dims;
        let (o, k) = wl.shape().dims2()?;
        if k != c * 9 || bl.shape().dims1()? != o {
            candle_core::bail!("conv parameters {:?}/{:?} do not fit {c} input channels", wl.dims(), bl.dims());
        }
        let out = dispatch_float3!(xs, xl, ws, wl, bs, bl, |x, wt, bias| {
            conv_forward_padded(&pad_planes(x, c * b, h, w), dims, wt, o, Some(bias), self.relu)
        });
        Ok((out, Shape::from((o, b, h, w))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _bias: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let mut grad = grad.contiguous()?;
        if self.relu {
            grad = grad.apply_op2_no_bwd(res, &ReluMask)?;
        }
        let dims = x.dims4()?;
        let dx = grad.apply_op2_no_bwd(&wt.contiguous()?, &ConvInputGrad { dims })?;
        let dw = grad.apply_op2_no_bwd(&x.contiguous()?, &ConvWeightGrad { dims })?;
        let db = grad.reshape((grad.dim(0)?, ()))?.sum(1)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

fn relu_mask<T: WithDType>(g: &[T], r: &[T]) -> Vec<T> {
    g.iter()
        .zip(r)
        .map(|(g, r)| if *r > T::zero() { *g } else { T::zero() })
        .collect()
}

impl CustomOp2 for ReluMask {
    fn name(&self) -> &'static str {
        "relu_mask"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, rs: &CpuStorage, rl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch_float2!(gs, gl, rs, rl, |g, r| relu_mask(g, r));
        Ok((out, gl.shape().clone()))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv3x3_input_grad"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, ws: &CpuStorage, wl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o, _) = wl.shape().dims2()?;
        let out = dispatch_float2!(gs, gl, ws, wl, |g, wt| conv_input_grad(g, self.dims, wt, o));
        Ok((out, Shape::from(self.dims)))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv3x3_weight_grad"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, xs: &CpuStorage, xl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let o = gl.shape().dims4()?.0;
        let out = dispatch_float2!(gs, gl, xs, xl, |g, x| conv_weight_grad(g, x, self.dims, o));
        Ok((out, Shape::from((o, self.dims.0 * 9))))
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (c, b, h, w) = dims;
        let n = b * conv_out(h, self.stride) * conv_out(w, self.stride);
        let out = dispatch_float!(storage, layout, |s| im2col(s, dims, self.stride));
        Ok((out, Shape::from((c * 9, n))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im {
            dims: arg.dims4()?,
            stride: self.stride,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch_float!(storage, layout, |s| col2im(s, self.dims, self.stride));
        Ok((out, Shape::from(self.dims)))
    }
}

/// Nearest-neighbour 2x upsampling of the last two dims of a 4D tensor.
struct Upsample2x;
/// Adjoint of [`Upsample2x`]: sums each 2x2 block.
struct SumPool2x;

fn upsample2x<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..][..w];
            for dy in 0..2 {
                let dst = &mut out[(p * 2 * h + 2 * y + dy) * 2 * w..][..2 * w];
                for (x, v) in src.iter().enumerate() {
                    dst[2 * x] = *v;
                    dst[2 * x + 1] = *v;
                }
            }
        }
    }
    out
}

fn sum_pool2x<T: WithDType + AddAssign>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..h {
            let src = &g[(p * h + y) * w..][..w];
            let dst = &mut out[(p * ho + y / 2) * wo..][..wo];
            for (x, v) in src.iter().enumerate() {
                dst[x / 2] += *v;
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = layout.shape().dims4()?;
        let out = dispatch_float!(storage, layout, |s| upsample2x(s, c * b, h, w));
        Ok((out, Shape::from((c, b, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sumpool2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (c, b, h, w) = layout.shape().dims4()?;
        let out = dispatch_float!(storage, layout, |s| sum_pool2x(s, c * b, h, w));
        Ok((out, Shape::from((c, b, h / 2, w / 2))))
    }
}

pub fn upsample2x_cbhw(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// A trainable tensor with a stable name inside its component.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
}

/// 3x3 convolution, padding 1, on `(C, B, H, W)` activations.
#[derive(Clone)]
pub struct Conv3x3 {
    weight: Var,
    bias: Var,
    stride: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv3x3 {
    /// He-uniform weights, zero bias.
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = in_channels * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f32> = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        let weight = Var::from_tensor(&Tensor::from_vec(w, (out_channels, fan_in), &Device::Cpu)?)?;
        let bias = Var::zeros(out_channels, DType::F32, &Device::Cpu)?;
        Ok(Self {
            weight,
            bias,
            stride,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `relu(conv(x))`, fused for stride 1.
    pub fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }

    fn apply(&self, x: &Tensor, relu: bool) -> Result<Tensor> {
        let (c, b, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let x = x.contiguous()?;
        if self.stride == 1 {
            return Ok(x.apply_op3(self.weight.as_tensor(), self.bias.as_tensor(), Conv3x3Op { relu })?);
        }
        let cols = x.apply_op1(Im2Col { stride: self.stride })?;
        let y = self
            .weight
            .as_tensor()
            .matmul(&cols)?
            .broadcast_add(&self.bias.as_tensor().unsqueeze(1)?)?
            .reshape((self.out_channels, b, conv_out(h, self.stride), conv_out(w, self.stride)))?;
        Ok(if relu { y.relu()? } else { y })
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        vec![
            Param {
                name: format!("{prefix}.weight"),
                var: self.weight.clone(),
            },
            Param {
                name: format!("{prefix}.bias"),
                var: self.bias.clone(),
            },
        ]
    }
}

/// Fully connected layer on `(B, in)` rows.
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    pub fn new(inputs: usize, outputs: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = Tensor::from_vec(draw(inputs * outputs), (inputs, outputs), &Device::Cpu)?.to_dtype(dtype)?;
        let b = Tensor::from_vec(draw(outputs), outputs, &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            weight: Var::from_tensor(&w)?,
            bias: Var::from_tensor(&b)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        vec![
            Param {
                name: format!("{prefix}.weight"),
                var: self.weight.clone(),
            },
            Param {
                name: format!("{prefix}.bias"),
                var: self.bias.clone(),
            },
        ]
    }
}

/// Hex SHA-256 over parameter names and raw values.
pub fn hash_params(params: &[Param]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.name.as_bytes());
        let values: Vec<f64> = p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Adam with one moment state per parameter tensor and optional global-norm
/// gradient clipping. Parameters without a gradient in a given store are
/// left untouched.
pub struct Adam {
    params: Vec<Var>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(params: Vec<Var>, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros = |v: &Var| vec![0.0; v.elem_count()];
        Self {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            params,
            steps: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step_scaled(grads, 1.0)
    }

    /// Steps on `factor * grad`, e.g. `-1` to ascend the objective that produced `grads`.
    pub fn step_scaled(&mut self, grads: &GradStore, factor: f64) -> Result<()> {
        let mut gathered: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.params.len());
        for p in &self.params {
            gathered.push(match grads.get(p.as_tensor()) {
                Some(g) => Some(g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?),
                None => None,
            });
        }
        let mut scale = factor;
        if let Some(max_norm) = self.clip_norm {
            let norm = factor.abs()
                * gathered
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
            if norm > max_norm {
                scale *= max_norm / norm;
            }
        }

        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (i, g) in gathered.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let var = &self.params[i];
            let mut theta: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..theta.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let updated = Tensor::from_vec(theta, var.shape(), &Device::Cpu)?.to_dtype(var.dtype())?;
            var.set(&updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    /// Direct 3x3 convolution on `(C, B, H, W)`, the oracle for the fused kernels.
    fn direct_conv(x: &[f64], (c, b, h, w): (usize, usize, usize, usize), wt: &[f64], o: usize, stride: usize) -> Vec<f64> {
        let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
        let mut out = vec![0.0; o * b * ho * wo];
        for oc in 0..o {
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[oc * c * 9 + ci * 9 + ky * 3 + kx]
                                            * x[((ci * b + bi) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((oc * b + bi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng(1);
        for stride in [1, 2] {
            let dims = (3, 2, 6, 6);
            let conv = Conv3x3::new(3, 4, stride, &mut r).unwrap();
            let x: Vec<f32> = (0..3 * 2 * 36).map(|_| r.random_range(-1.0..1.0)).collect();
            let xt = Tensor::from_vec(x.clone(), dims, &Device::Cpu).unwrap();
            let y: Vec<f32> = conv.forward(&xt).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let wt: Vec<f32> = conv.weight.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let w64: Vec<f64> = wt.iter().map(|&v| v as f64).collect();
            let expected = direct_conv(&x64, dims, &w64, 4, stride);
            for (a, b) in y.iter().zip(expected) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_gradients_are_adjoints() {
        // <conv(x, w), g> == <x, input_grad(g, w)> == <w, weight_grad(g, x)>
        let mut r = rng(2);
        for dims in [(2, 3, 5, 4), (1, 2, 1, 1), (3, 1, 2, 7)] {
            let (c, b, h, w) = dims;
            let o = 3;
            let x: Vec<f64> = (0..c * b * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..o * c * 9).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = conv_forward(&x, dims, &wt, o);
            for (a, e) in y.iter().zip(direct_conv(&x, dims, &wt, o, 1)) {
                assert!((a - e).abs() < 1e-12);
            }
            let g: Vec<f64> = (0..y.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let dx = conv_input_grad(&g, dims, &wt, o);
            let dw = conv_weight_grad(&g, &x, dims, o);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "{dims:?}: {lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-10, "{dims:?}: {lhs} vs {via_w}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut r = rng(6);
        for stride in [1, 2] {
            let dims = (2, 3, 5, 4);
            let x: Vec<f64> = (0..2 * 3 * 20).map(|_| r.random_range(-1.0..1.0)).collect();
            let cols = im2col(&x, dims, stride);
            let g: Vec<f64> = (0..cols.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let back = col2im(&g, dims, stride);
            let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn upsample_adjoint_and_values() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|v| v as f64).collect();
        let up = upsample2x(&x, 2, 3, 2);
        assert_eq!(&up[..4], &[0.0, 0.0, 1.0, 1.0]);
        let g: Vec<f64> = (0..up.len()).map(|v| (v as f64).sin()).collect();
        let back = sum_pool2x(&g, 2, 6, 4);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let mut r = rng(3);
        for (stride, relu) in [(1, false), (1, true), (2, false), (2, true)] {
            let conv = Conv3x3::new(2, 3, stride, &mut r).unwrap();
            conv.bias
                .set(&Tensor::new(&[0.1f32, -0.2, 0.05], &Device::Cpu).unwrap())
                .unwrap();
            let dims = (2, 2, 5, 4);
            let x = Var::from_tensor(&Tensor::randn(0f32, 1.0, dims, &Device::Cpu).unwrap()).unwrap();
            let loss = || {
                let y = if relu { conv.forward_relu(x.as_tensor()) } else { conv.forward(x.as_tensor()) };
                y.unwrap().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap()
            };
            let grads = loss().backward().unwrap();
            for var in [&x, &conv.weight, &conv.bias] {
                let g: Vec<f32> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let base: Vec<f32> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
                for i in (0..base.len()).step_by(5) {
                    let eps = 1e-2f32;
                    let f = |delta: f32| {
                        let mut v = base.clone();
                        v[i] += delta;
                        var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                        loss().to_scalar::<f64>().unwrap()
                    };
                    let fd = ((f(eps) - f(-eps)) / (2.0 * eps as f64)) as f32;
                    f(0.0);
                    assert!(
                        (fd - g[i]).abs() < 2e-2 * (1.0 + fd.abs()),
                        "stride {stride} relu {relu} [{i}]: {fd} vs {}",
                        g[i]
                    );
                }
            }
        }
    }

    #[test]
    fn adam_skips_params_without_gradient() {
        let mut r = rng(4);
        let a = Linear::new(2, 1, DType::F32, &mut r).unwrap();
        let b = Linear::new(2, 1, DType::F32, &mut r).unwrap();
        let vars: Vec<Var> = a.params("a").into_iter().chain(b.params("b")).map(|p| p.var).collect();
        let before_b = hash_params(&b.params("b")).unwrap();
        let before_a = hash_params(&a.params("a")).unwrap();
        let x = Tensor::ones((3, 2), DType::F32, &Device::Cpu).unwrap();
        let grads = a.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(vars, 1e-2, None);
        opt.step(&grads).unwrap();
        assert_eq!(hash_params(&b.params("b")).unwrap(), before_b);
        assert_ne!(hash_params(&a.params("a")).unwrap(), before_a);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let grads = (v.as_tensor() * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(vec![v.clone()], 0.1, None);
        opt.step(&grads).unwrap();
        let after: Vec<f32> = v.as_tensor().to_vec1().unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6 && (after[1] + 2.1).abs() < 1e-6, "{after:?}");
    }
}
