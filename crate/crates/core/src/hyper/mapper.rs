use crate::decoder::MetaBlockSpec;
use crate::dpwconv::WeightGrid;
use crate::error::{Error, Result};
use crate::ops::{conv2d, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grouped 1×1 convolution generating one block's parameters from its signal slice.
///
/// The output channel count is `|θ^m|` rounded up to a multiple of the group
/// count; trailing padding channels are computed and discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMapperParams<T> {
    pub conv: ConvParams<T>,
}

impl<T: Scalar> WeightMapperParams<T> {
    pub fn groups(&self) -> usize {
        self.conv.groups
    }

    pub fn check(&self, spec: &MetaBlockSpec, signal_channels: usize) -> Result<()> {
        let field = format!("blocks[m{}]", spec.level);
        let ks = self.conv.kernel();
        if ks != (1, 1) || self.conv.stride != 1 || self.conv.padding != 0 {
            return Err(Error::config(
                field,
                "weight mapper must be a 1x1 stride-1 convolution",
            ));
        }
        if self.conv.bias.is_none() {
            return Err(Error::config(field, "weight mapper requires a bias"));
        }
        if self.conv.groups != spec.mapper_groups {
            return Err(Error::config(
                field,
                format!(
                    "mapper has {} groups, spec says {}",
                    self.conv.groups, spec.mapper_groups
                ),
            ));
        }
        if self.conv.c_out() != spec.mapper_channels() {
            return Err(Error::config(
                field,
                format!(
                    "mapper emits {} channels, block needs {}",
                    self.conv.c_out(),
                    spec.mapper_channels()
                ),
            ));
        }
        if self.conv.c_in() != signal_channels {
            return Err(Error::config(
                field,
                format!(
                    "mapper reads {} signal channels, partition gives {signal_channels}",
                    self.conv.c_in()
                ),
            ));
        }
        Ok(())
    }
}

/// Generated parameters of one meta block; `dw` and `pw2` are absent for pointwise-only blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaBundle<T> {
    pub pw1: WeightGrid<T>,
    pub dw: Option<WeightGrid<T>>,
    pub pw2: Option<WeightGrid<T>>,
}

impl<T: Scalar> MetaBundle<T> {
    pub fn grids(&self) -> impl Iterator<Item = &WeightGrid<T>> {
        std::iter::once(&self.pw1)
            .chain(self.dw.as_ref())
            .chain(self.pw2.as_ref())
    }

    /// Concatenated `(weight, bias)` of every grid, i.e. the mapper's raw output
    /// channels (without padding) in channel-major order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in self.grids() {
            out.extend_from_slice(&g.weight);
            out.extend_from_slice(g.bias.as_deref().unwrap_or(&[]));
        }
        out
    }
}

/// Runs the mapper on a signal slice already at grid resolution `(nh, nw)` and
/// unflattens the per-cell channel vectors into the block's weight grids.
pub fn map_weights<T: Scalar>(
    phi_slice: &Tensor<T>,
    p: &WeightMapperParams<T>,
    spec: &MetaBlockSpec,
    grid: (usize, usize),
) -> Result<MetaBundle<T>> {
    let s = phi_slice.shape();
    p.check(spec, s.c)?;
    if s.n != 1 || (s.h, s.w) != grid {
        return Err(Error::shape(
            "map_weights",
            format!("signal slice of shape (1, {}, {}, {})", s.c, grid.0, grid.1),
            s,
        ));
    }
    let raw = conv2d(phi_slice, &p.conv)?;
    let cells = grid.0 * grid.1;
    let data = raw.data();
    let mut grids = Vec::new();
    for piece in spec.pieces() {
        let take =
            |offset: usize, len: usize| data[offset * cells..(offset + len) * cells].to_vec();
        let weight = take(piece.offset, piece.weight_len);
        let bias = take(piece.offset + piece.weight_len, piece.c_out);
        grids.push(WeightGrid::new(
            piece.c_out,
            piece.c_in / piece.groups,
            (piece.kernel, piece.kernel),
            grid,
            piece.groups,
            weight,
            Some(bias),
        )?);
    }
    let mut it = grids.into_iter();
    let pw1 = it.next().expect("every block has pw1");
    let dw = it.next();
    let pw2 = it.next();
    Ok(MetaBundle { pw1, dw, pw2 })
}

/// `(params, flops)` of a weight mapper: `|θ^m|·C_φ/g` and `|θ^m|·C_φ·cells/g`,
/// counting one multiply-accumulate as one FLOP.
pub fn mapper_cost(
    theta: usize,
    signal_channels: usize,
    groups: usize,
    cells: usize,
) -> Result<(u64, u64)> {
    if groups == 0 || signal_channels % groups != 0 {
        return Err(Error::config(
            "mapper_groups",
            format!("{signal_channels} signal channels are not divisible by {groups} groups"),
        ));
    }
    let params = theta as u64 * (signal_channels / groups) as u64;
    Ok((params, params * cells as u64))
}
