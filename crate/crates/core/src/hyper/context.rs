use crate::error::{Error, Result};
use crate::ops::{concat_channels, global_avg_pool, upsample_nearest, upsample_nearest2, ConvBn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Nested U-Net context head.
///
/// `down[l]` is a 2×2 stride-2 convolution halving the channels of level `l`
/// (minimum 1); `fuse[l]` is a 1×1 convolution over the concatenation of the
/// level-`l` skip feature and the upsampled coarser result, restoring the
/// level-`l` channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextHeadParams<T> {
    pub down: Vec<ConvBn<T>>,
    pub fuse: Vec<ConvBn<T>>,
}

impl<T: Scalar> ContextHeadParams<T> {
    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// Channel count at each level `0..=depth` for an input with `channels` channels.
    pub fn level_channels(channels: usize, depth: usize) -> Vec<usize> {
        let mut c = vec![channels];
        for _ in 0..depth {
            let last = *c.last().unwrap();
            c.push((last / 2).max(1));
        }
        c
    }
}

/// Largest depth `<= requested` whose levels all halve an `h × w` map exactly.
pub fn max_context_depth(h: usize, w: usize, requested: usize) -> usize {
    let mut d = 0;
    while d < requested && (h >> d) % 2 == 0 && (w >> d) % 2 == 0 {
        d += 1;
    }
    d
}

/// Maps the coarsest feature map to the signal of the same shape.
pub fn context_head<T: Scalar>(f: &Tensor<T>, p: &ContextHeadParams<T>) -> Result<Tensor<T>> {
    let d = p.depth();
    if p.fuse.len() != d {
        return Err(Error::config(
            "context_depth",
            format!("{d} down layers but {} fuse layers", p.fuse.len()),
        ));
    }
    if d == 0 {
        return Ok(f.clone());
    }
    let s = f.shape();
    let step = 1usize << d;
    if s.h % step != 0 || s.w % step != 0 {
        return Err(Error::config(
            "context_depth",
            format!("{}x{} signal map is not divisible by 2^{d}", s.h, s.w),
        ));
    }
    let mut skips = vec![f.clone()];
    for layer in &p.down {
        let next = layer.forward(skips.last().unwrap())?;
        skips.push(next);
    }
    let above = &skips[d - 1].shape();
    let pooled = global_avg_pool(&skips[d]);
    let up = upsample_nearest2(&pooled, above.h, above.w)?;
    let mut y = p.fuse[d - 1].forward(&concat_channels(&[&skips[d - 1], &up])?)?;
    for l in (0..d - 1).rev() {
        let up = upsample_nearest(&y, 2)?;
        y = p.fuse[l].forward(&concat_channels(&[&skips[l], &up])?)?;
    }
    if y.shape() != s {
        return Err(Error::shape("context_head", s, y.shape()));
    }
    Ok(y)
}
