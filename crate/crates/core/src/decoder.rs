//! The primary network: meta blocks built from dynamic patch-wise
//! convolutions, joined by bilinear upsampling and skip concatenation.

use crate::dpwconv::{dpwconv, DpwKernel, PatchLayout, WeightGrid};
use crate::error::{Error, Result};
use crate::hyper::MetaBundle;
use crate::ops::{batchnorm, concat_channels, relu6, upsample_bilinear_x2, BatchNormParams};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Static description of one meta block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaBlockSpec {
    pub level: usize,
    /// Input channels, positional channels included.
    pub in_channels: usize,
    /// `None` for a pointwise-only block.
    pub hidden: Option<usize>,
    pub out_channels: usize,
    pub dw_kernel: usize,
    pub mapper_groups: usize,
    pub residual: bool,
}

/// One dynamic convolution inside a block's parameter bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundlePiece {
    pub name: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub groups: usize,
    /// First mapper channel of this piece's weights; its biases follow the weights.
    pub offset: usize,
    pub weight_len: usize,
}

impl MetaBlockSpec {
    pub fn new(
        level: usize,
        in_channels: usize,
        hidden: Option<usize>,
        out_channels: usize,
        mapper_groups: usize,
    ) -> Self {
        MetaBlockSpec {
            level,
            in_channels,
            hidden,
            out_channels,
            dw_kernel: 3,
            mapper_groups,
            residual: hidden.is_some() && in_channels == out_channels,
        }
    }

    pub fn pointwise_only(&self) -> bool {
        self.hidden.is_none()
    }

    /// The dynamic convolutions of the block in bundle order.
    pub fn pieces(&self) -> Vec<BundlePiece> {
        let mut raw = Vec::new();
        match self.hidden {
            None => raw.push(("pw1", self.in_channels, self.out_channels, 1, 1)),
            Some(h) => {
                raw.push(("pw1", self.in_channels, h, 1, 1));
                raw.push(("dw", h, h, self.dw_kernel, h));
                raw.push(("pw2", h, self.out_channels, 1, 1));
            }
        }
        let mut offset = 0;
        raw.into_iter()
            .map(|(name, c_in, c_out, kernel, groups)| {
                let weight_len = c_out * (c_in / groups) * kernel * kernel;
                let piece = BundlePiece {
                    name,
                    c_in,
                    c_out,
                    kernel,
                    groups,
                    offset,
                    weight_len,
                };
                offset += weight_len + c_out;
                piece
            })
            .collect()
    }

    /// `|θ^m|`: generated weights and biases per grid cell.
    pub fn param_count(&self) -> usize {
        self.pieces().iter().map(|p| p.weight_len + p.c_out).sum()
    }

    /// Mapper output channels: `|θ^m|` rounded up to a multiple of the group count.
    pub fn mapper_channels(&self) -> usize {
        self.param_count().div_ceil(self.mapper_groups) * self.mapper_groups
    }
}

/// Batch norms after each dynamic convolution; all `None` once fused.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNorms<T> {
    pub pw1: Option<BatchNormParams<T>>,
    pub dw: Option<BatchNormParams<T>>,
    pub pw2: Option<BatchNormParams<T>>,
}

impl<T: Scalar> BlockNorms<T> {
    pub fn none() -> Self {
        BlockNorms {
            pw1: None,
            dw: None,
            pw2: None,
        }
    }

    pub fn identity(spec: &MetaBlockSpec, eps: T) -> Self {
        let mut n = Self::none();
        for p in spec.pieces() {
            *n.slot_mut(p.name) = Some(BatchNormParams::identity(p.c_out, eps));
        }
        n
    }

    /// Norms in bundle order.
    pub fn as_slice(&self) -> [Option<&BatchNormParams<T>>; 3] {
        [self.pw1.as_ref(), self.dw.as_ref(), self.pw2.as_ref()]
    }

    pub fn slot_mut(&mut self, piece: &str) -> &mut Option<BatchNormParams<T>> {
        match piece {
            "pw1" => &mut self.pw1,
            "dw" => &mut self.dw,
            "pw2" => &mut self.pw2,
            other => panic!("no batch norm slot {other}"),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.as_slice().iter().all(Option::is_none)
    }
}

/// Fixed two-channel coordinate map of shape `(1, 2, h, w)` with values in `[-1, 1]`.
/// A size-1 axis yields an all-zero channel.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let coord = |i: usize, n: usize| -> T {
        if n < 2 {
            T::zero()
        } else {
            T::of((2.0 * i as f64 - n as f64 + 1.0) / (n as f64 - 1.0))
        }
    };
    Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, i, j| {
        if c == 0 {
            coord(i, h)
        } else {
            coord(j, w)
        }
    })
}

/// Strategy for evaluating a dynamic convolution.
pub trait DpwExec<T: Scalar> {
    fn run(
        &self,
        name: &str,
        x: &Tensor<T>,
        wg: &WeightGrid<T>,
        layout: &PatchLayout,
    ) -> Result<Tensor<T>>;
}

impl<T: Scalar> DpwExec<T> for DpwKernel {
    fn run(
        &self,
        _name: &str,
        x: &Tensor<T>,
        wg: &WeightGrid<T>,
        layout: &PatchLayout,
    ) -> Result<Tensor<T>> {
        dpwconv(x, wg, layout, *self)
    }
}

fn check_grid<T: Scalar>(
    spec: &MetaBlockSpec,
    piece: &BundlePiece,
    wg: &WeightGrid<T>,
) -> Result<()> {
    if wg.c_out != piece.c_out
        || wg.c_in() != piece.c_in
        || wg.groups != piece.groups
        || wg.kh != piece.kernel
        || wg.kw != piece.kernel
    {
        return Err(Error::config(
            format!("blocks[m{}].{}", spec.level, piece.name),
            format!(
                "bundle has {}->{} ({}x{}, {} groups), spec expects {}->{} ({k}x{k}, {} groups)",
                wg.c_in(),
                wg.c_out,
                wg.kh,
                wg.kw,
                wg.groups,
                piece.c_in,
                piece.c_out,
                piece.groups,
                k = piece.kernel
            ),
        ));
    }
    Ok(())
}

/// One meta block. Pointwise-only: `relu6(bn(pw1(x)))`. Full:
/// `relu6(bn(pw1))`, `relu6(bn(dw))`, `bn(pw2)`, plus `x` when residual.
pub fn meta_block_forward<T: Scalar>(
    x: &Tensor<T>,
    bundle: &MetaBundle<T>,
    spec: &MetaBlockSpec,
    norms: &BlockNorms<T>,
    layout: &PatchLayout,
    exec: &dyn DpwExec<T>,
) -> Result<Tensor<T>> {
    let pieces = spec.pieces();
    let grids: Vec<&WeightGrid<T>> = bundle.grids().collect();
    if grids.len() != pieces.len() {
        return Err(Error::config(
            format!("blocks[m{}]", spec.level),
            format!(
                "bundle has {} convolutions, spec expects {}",
                grids.len(),
                pieces.len()
            ),
        ));
    }
    if x.shape().c != spec.in_channels {
        return Err(Error::config(
            format!("blocks[m{}]", spec.level),
            format!(
                "input has {} channels, block expects {}",
                x.shape().c,
                spec.in_channels
            ),
        ));
    }
    let bns = norms.as_slice();
    let last = pieces.len() - 1;
    let mut t = x.clone();
    for (k, (piece, wg)) in pieces.iter().zip(grids).enumerate() {
        check_grid(spec, piece, wg)?;
        t = exec.run(piece.name, &t, wg, layout)?;
        if let Some(bn) = bns[k] {
            t = batchnorm(&t, bn)?;
        }
        if k < last || spec.pointwise_only() {
            t = relu6(&t);
        }
    }
    if spec.residual {
        t = t.add(x)?;
    }
    Ok(t)
}

/// Decoder inputs: the image and the reduced backbone features `F_1..F_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub image: Tensor<T>,
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// `I` for level 0, `F_level` otherwise.
    pub fn level(&self, level: usize) -> &Tensor<T> {
        if level == 0 {
            &self.image
        } else {
            &self.features[level - 1]
        }
    }
}

/// A decoder block: its static spec and batch norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T> {
    pub spec: MetaBlockSpec,
    pub norms: BlockNorms<T>,
}

/// Runs the blocks (given finest first) from the coarsest level down, asking
/// `bundle(k)` for block `k`'s generated parameters right before it runs.
/// Logits are upsampled back to the image size when the finest block is
/// above level 0.
pub fn decoder_forward<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    blocks: &[DecoderBlock<T>],
    grid: (usize, usize),
    exec: &dyn DpwExec<T>,
    mut bundle: impl FnMut(usize) -> Result<MetaBundle<T>>,
) -> Result<Tensor<T>> {
    let mut prev: Option<Tensor<T>> = None;
    for (k, block) in blocks.iter().enumerate().rev() {
        let level = block.spec.level;
        if level > pyramid.features.len() {
            return Err(Error::config(
                format!("blocks[m{level}]"),
                "no feature map at this level",
            ));
        }
        let src = pyramid.level(level);
        let s = src.shape();
        let pos = positional_encoding::<T>(s.h, s.w);
        let x = match prev.take() {
            None => concat_channels(&[src, &pos])?,
            Some(p) => {
                let up = upsample_bilinear_x2(&p);
                if (up.shape().h, up.shape().w) != (s.h, s.w) {
                    return Err(Error::config(
                        format!("blocks[m{level}]"),
                        format!(
                            "upsampled map is {}x{}, level is {}x{}",
                            up.shape().h,
                            up.shape().w,
                            s.h,
                            s.w
                        ),
                    ));
                }
                concat_channels(&[&up, src, &pos])?
            }
        };
        let layout = PatchLayout::new(s.h, s.w, grid.0, grid.1)?;
        let b = bundle(k)?;
        prev = Some(meta_block_forward(
            &x,
            &b,
            &block.spec,
            &block.norms,
            &layout,
            exec,
        )?);
    }
    let mut y = prev.ok_or_else(|| Error::config("blocks", "decoder has no blocks"))?;
    let (h, w) = (pyramid.image.shape().h, pyramid.image.shape().w);
    while y.shape().h < h {
        y = upsample_bilinear_x2(&y);
    }
    if (y.shape().h, y.shape().w) != (h, w) {
        return Err(Error::shape(
            "decoder_forward",
            format!("logits at {h}x{w}"),
            y.shape(),
        ));
    }
    Ok(y)
}

/// Per-pixel index of the largest logit, lowest class first on ties.
/// Returns `n·h·w` labels in batch-then-raster order.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = logits.plane(n, 0)[p];
            for c in 1..s.c {
                let v = logits.plane(n, c)[p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    out
}
