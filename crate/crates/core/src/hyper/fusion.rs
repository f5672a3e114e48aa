//! Folding inference-time batch norm into the preceding linear map.
//!
//! A batch norm is the per-channel affine map `x ↦ s·x + t` with
//! `s = γ/√(σ²+ε)` and `t = β − s·μ`. After a convolution with weights `θ` and
//! bias `b` this gives weights `s·θ` and bias `s·b + t`. After a dynamic
//! convolution the same scaling is applied to the mapper rows that generate
//! `θ` and `b`, with `t` folded into the mapper bias of the bias rows.

use crate::decoder::{BlockNorms, MetaBlockSpec};
use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::WeightMapperParams;

pub fn fuse_bn_into_conv<T: Scalar>(
    p: &ConvParams<T>,
    bn: &BatchNormParams<T>,
) -> Result<ConvParams<T>> {
    bn.validate()?;
    if bn.channels() != p.c_out() {
        return Err(Error::shape(
            "fuse_bn_into_conv",
            format!("{} channels", p.c_out()),
            format!("{} channels", bn.channels()),
        ));
    }
    let (scale, shift) = bn.affine();
    let per_out = p.weight.data().len() / p.c_out();
    let weight: Vec<T> = p
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(k, &w)| scale[k / per_out] * w)
        .collect();
    let bias = (0..p.c_out())
        .map(|o| {
            let b = p.bias.as_ref().map_or(T::zero(), |b| b[o]);
            scale[o] * b + shift[o]
        })
        .collect();
    ConvParams::new(
        Tensor::new(p.weight.shape(), weight)?,
        Some(bias),
        p.groups,
        p.stride,
        p.padding,
    )
}

pub fn fuse_bn_into_mapper<T: Scalar>(
    p: &WeightMapperParams<T>,
    spec: &MetaBlockSpec,
    norms: &BlockNorms<T>,
) -> Result<WeightMapperParams<T>> {
    let pieces = spec.pieces();
    let bns = norms.as_slice();
    if bns[pieces.len()..].iter().any(Option::is_some) {
        return Err(Error::config(
            format!("blocks[m{}]", spec.level),
            format!(
                "batch norms given for convolutions beyond the block's {}",
                pieces.len()
            ),
        ));
    }
    let mut weight = p.conv.weight.data().to_vec();
    let mut bias = p.conv.bias.clone().ok_or_else(|| {
        Error::config(
            format!("blocks[m{}]", spec.level),
            "weight mapper requires a bias",
        )
    })?;
    let row = p.conv.weight.shape().c;
    for (piece, bn) in pieces.iter().zip(bns) {
        let Some(bn) = bn else { continue };
        bn.validate()?;
        if bn.channels() != piece.c_out {
            return Err(Error::config(
                format!("blocks[m{}].{}", spec.level, piece.name),
                format!(
                    "batch norm has {} channels, convolution emits {}",
                    bn.channels(),
                    piece.c_out
                ),
            ));
        }
        let (scale, shift) = bn.affine();
        let per_out = piece.weight_len / piece.c_out;
        let scale_row = |m: usize, s: T, weight: &mut Vec<T>| {
            weight[m * row..(m + 1) * row]
                .iter_mut()
                .for_each(|w| *w = s * *w);
        };
        for o in 0..piece.c_out {
            for m in piece.offset + o * per_out..piece.offset + (o + 1) * per_out {
                scale_row(m, scale[o], &mut weight);
                bias[m] = scale[o] * bias[m];
            }
            let m = piece.offset + piece.weight_len + o;
            scale_row(m, scale[o], &mut weight);
            bias[m] = scale[o] * bias[m] + shift[o];
        }
    }
    Ok(WeightMapperParams {
        conv: ConvParams::new(
            Tensor::new(p.conv.weight.shape(), weight)?,
            Some(bias),
            p.conv.groups,
            p.conv.stride,
            p.conv.padding,
        )?,
    })
}
