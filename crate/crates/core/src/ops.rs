//! Static layer primitives over [`Tensor`].
//!
//! Convolution accumulates each output element in the fixed order
//! (in-channel, kernel-row, kernel-col) of its group, skipping taps that land
//! in the zero padding, and adds the bias last. The dynamic patch-wise kernels
//! follow the same order, which is what makes their single-patch and
//! uniform-weight reductions bit-exact.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(C_out, C_in / groups, K_h, K_w)`.
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            groups,
            stride,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.stride == 0 {
            return Err(Error::shape(
                "conv2d",
                "groups >= 1 and stride >= 1",
                format!("groups {} stride {}", self.groups, self.stride),
            ));
        }
        if self.c_out() % self.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("C_out divisible by groups {}", self.groups),
                format!("C_out {}", self.c_out()),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out() {
                return Err(Error::shape(
                    "conv2d bias",
                    format!("length {}", self.c_out()),
                    format!("length {}", b.len()),
                ));
            }
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// Identity statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, eps: T) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("all vectors of length {c}"),
                format!(
                    "beta {} mean {} var {}",
                    self.beta.len(),
                    self.mean.len(),
                    self.var.len()
                ),
            ));
        }
        if self.var.iter().any(|v| *v < T::zero()) || !(self.eps >= T::zero()) {
            return Err(Error::config(
                "batchnorm",
                "variance and epsilon must be non-negative",
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` of the equivalent affine map.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - s * m)
            .collect();
        (scale, shift)
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64_lossless())).collect();
        BatchNormParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            mean: c(&self.mean),
            var: c(&self.var),
            eps: U::of(self.eps.to_f64_lossless()),
        }
    }
}

/// Static layer: convolution, optional batch norm, then ReLU6.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = batchnorm(&y, bn)?;
        }
        Ok(relu6(&y))
    }

    /// Folds the batch norm into the convolution. Already-fused layers are returned unchanged.
    pub fn fused(&self) -> Result<Self> {
        match &self.bn {
            Some(bn) => Ok(ConvBn {
                conv: crate::hyper::fuse_bn_into_conv(&self.conv, bn)?,
                bn: None,
            }),
            None => Ok(self.clone()),
        }
    }
}

/// Grouped, strided 2-D convolution with zero padding.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.c != p.c_in() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input with {} channels (weight {ws}, groups {})",
                p.c_in(),
                p.groups
            ),
            format!("input {xs}"),
        ));
    }
    let (h_out, w_out) = p.output_hw(xs.h, xs.w).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("padded input at least {}x{}", ws.h, ws.w),
            format!("input {xs} with padding {}", p.padding),
        )
    })?;
    let c_out = p.c_out();
    let cin_g = ws.c;
    let cout_g = c_out / p.groups;
    let (kh, kw) = (ws.h, ws.w);
    let (stride, pad) = (p.stride, p.padding);
    let out_shape = Shape::new(xs.n, c_out, h_out, w_out);
    let mut out = vec![T::zero(); out_shape.numel()];
    let wdata = p.weight.data();

    par::for_each_chunk(&mut out, h_out * w_out, |plane_idx, dst| {
        let (b, o) = (plane_idx / c_out, plane_idx % c_out);
        let g = o / cout_g;
        let mut acc = vec![T::zero(); w_out];
        for oi in 0..h_out {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for ci in 0..cin_g {
                let src = x.plane(b, g * cin_g + ci);
                for ki in 0..kh {
                    let r = (oi * stride + ki) as isize - pad as isize;
                    if r < 0 || r >= xs.h as isize {
                        continue;
                    }
                    let row = &src[r as usize * xs.w..(r as usize + 1) * xs.w];
                    for kj in 0..kw {
                        let wv = wdata[((o * cin_g + ci) * kh + ki) * kw + kj];
                        let (lo, hi) = valid_cols(xs.w, w_out, stride, kj, pad);
                        for oj in lo..hi {
                            acc[oj] = acc[oj] + wv * row[oj * stride + kj - pad];
                        }
                    }
                }
            }
            let dst_row = &mut dst[oi * w_out..(oi + 1) * w_out];
            match &p.bias {
                Some(bias) => dst_row
                    .iter_mut()
                    .zip(&acc)
                    .for_each(|(d, &a)| *d = a + bias[o]),
                None => dst_row.copy_from_slice(&acc),
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Output columns `[lo, hi)` whose tap `kj` reads inside an unpadded row of width `w`.
#[inline]
pub(crate) fn valid_cols(
    w: usize,
    w_out: usize,
    stride: usize,
    kj: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    if w - 1 + pad < kj {
        return (0, 0);
    }
    let hi = ((w - 1 + pad - kj) / stride + 1).min(w_out);
    (lo.min(hi), hi)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("{} channels", p.channels()),
            s,
        ));
    }
    let denom: Vec<T> = p.var.iter().map(|&v| (v + p.eps).sqrt()).collect();
    let mut out = x.clone();
    par::for_each_chunk(out.data_mut(), s.plane(), |idx, plane| {
        let c = idx % s.c;
        let (g, m, d, b) = (p.gamma[c], p.mean[c], denom[c], p.beta[c]);
        plane.iter_mut().for_each(|v| *v = g * (*v - m) / d + b);
    });
    Ok(out)
}

/// Source coordinate and blend weight for output index `o` of a ×2 half-pixel upsample.
#[inline]
pub(crate) fn bilinear_source(o: usize, size: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear ×2 upsampling, half-pixel centers, edge clamped.
pub fn upsample_bilinear_x2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = s.with_hw(2 * s.h, 2 * s.w);
    let rows: Vec<_> = (0..out_shape.h).map(|o| bilinear_source(o, s.h)).collect();
    let cols: Vec<_> = (0..out_shape.w).map(|o| bilinear_source(o, s.w)).collect();
    let mut out = vec![T::zero(); out_shape.numel()];
    par::for_each_chunk(&mut out, out_shape.plane(), |idx, dst| {
        let src = x.plane(idx / s.c, idx % s.c);
        for (oi, &(i0, i1, ty)) in rows.iter().enumerate() {
            let ty = T::of(ty);
            for (oj, &(j0, j1, tx)) in cols.iter().enumerate() {
                let tx = T::of(tx);
                let top = src[i0 * s.w + j0] * (T::one() - tx) + src[i0 * s.w + j1] * tx;
                let bot = src[i1 * s.w + j0] * (T::one() - tx) + src[i1 * s.w + j1] * tx;
                dst[oi * out_shape.w + oj] = top * (T::one() - ty) + bot * ty;
            }
        }
    });
    Tensor::new(out_shape, out).expect("shape by construction")
}

/// Nearest-neighbour upsampling by an integer factor on both axes.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    upsample_nearest2(x, factor, factor)
}

/// Nearest-neighbour upsampling with separate row/column factors.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>, fh: usize, fw: usize) -> Result<Tensor<T>> {
    if fh == 0 || fw == 0 {
        return Err(Error::shape(
            "upsample_nearest",
            "factor >= 1",
            format!("{fh}x{fw}"),
        ));
    }
    let s = x.shape();
    Ok(Tensor::from_fn(
        s.with_hw(s.h * fh, s.w * fw),
        |n, c, i, j| x.at(n, c, i / fh, j / fw),
    ))
}

/// Average pooling without padding. When `stride` equals the window the window must tile the input.
pub fn avg_pool<T: Scalar>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: usize,
) -> Result<Tensor<T>> {
    avg_pool2(x, window, (stride, stride))
}

/// [`avg_pool`] with separate row and column strides.
pub fn avg_pool2<T: Scalar>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (kh, kw) = window;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > s.h || kw > s.w {
        return Err(Error::shape(
            "avg_pool",
            format!("window within {}x{}", s.h, s.w),
            format!("{kh}x{kw} stride {sh}x{sw}"),
        ));
    }
    if (sh, sw) == (kh, kw) && (s.h % kh != 0 || s.w % kw != 0) {
        return Err(Error::shape(
            "avg_pool",
            format!("{kh}x{kw} window tiling the input"),
            format!("input {}x{}", s.h, s.w),
        ));
    }
    let (h_out, w_out) = ((s.h - kh) / sh + 1, (s.w - kw) / sw + 1);
    let count = T::of((kh * kw) as f64);
    let out_shape = s.with_hw(h_out, w_out);
    let mut out = vec![T::zero(); out_shape.numel()];
    par::for_each_chunk(&mut out, out_shape.plane(), |idx, dst| {
        let src = x.plane(idx / s.c, idx % s.c);
        for oi in 0..h_out {
            for oj in 0..w_out {
                let mut sum = T::zero();
                for i in oi * sh..oi * sh + kh {
                    for j in oj * sw..oj * sw + kw {
                        sum = sum + src[i * s.w + j];
                    }
                }
                dst[oi * w_out + oj] = sum / count;
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Global average pool to `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    avg_pool2(x, (s.h, s.w), (s.h, s.w)).expect("global window always fits")
}

/// Concatenates along the channel axis, preserving argument order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "at least one tensor", "none"))?
        .shape();
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("n={} h={} w={}", first.n, first.h, first.w),
                s,
            ));
        }
    }
    let c: usize = xs.iter().map(|t| t.shape().c).sum();
    let out_shape = first.with_c(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in xs {
            let s = t.shape();
            let a = t.offset(n, 0, 0, 0);
            data.extend_from_slice(&t.data()[a..a + s.c * s.plane()]);
        }
    }
    Tensor::new(out_shape, data)
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}
