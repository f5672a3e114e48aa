//! Hypernetwork side of the model: the context head that turns the coarsest
//! backbone feature into the signal, the division of signal channels between
//! decoder blocks, the per-block weight mappers and batch-norm fusion.

mod context;
mod divide;
mod fusion;
mod mapper;

pub use context::{context_head, max_context_depth, ContextHeadParams};
pub use divide::divide_channels;
pub use fusion::{fuse_bn_into_conv, fuse_bn_into_mapper};
pub use mapper::{map_weights, mapper_cost, MetaBundle, WeightMapperParams};

use crate::tensor::Tensor;

/// The context signal and its channel partition across decoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<T> {
    pub phi: Tensor<T>,
    /// Channels assigned to each block, in block order.
    pub partition: Vec<usize>,
}

impl<T: crate::Scalar> Signal<T> {
    /// Channel offset of each block's slice.
    pub fn offsets(&self) -> Vec<usize> {
        partition_offsets(&self.partition)
    }

    pub fn slice(&self, block: usize) -> crate::Result<Tensor<T>> {
        let off = self.offsets()[block];
        self.phi.slice_channels(off, self.partition[block])
    }
}

pub fn partition_offsets(partition: &[usize]) -> Vec<usize> {
    partition
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect()
}
