//! Model assembly: backbone stub, reductions, context head, weight mappers
//! and decoder, with seeded initialization, fusion and serialization.

mod config;
mod weights;

pub use config::{ModelConfig, ModelPlan, Reduction};
pub use weights::{expected_tensors, load_weights, save_weights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::decoder::{decoder_forward, BlockNorms, DecoderBlock, DpwExec, FeaturePyramid};
use crate::dpwconv::DpwKernel;
use crate::error::{Error, Result};
use crate::hyper::{
    context_head, fuse_bn_into_mapper, map_weights, ContextHeadParams, Signal, WeightMapperParams,
};
use crate::io::{decode_weights, encode_weights, Array, WeightFile};
use crate::ops::{avg_pool2, ConvBn};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;
/// Batch-norm epsilon of freshly built models.
pub const BN_EPS: f64 = 1e-5;

/// Stand-in for the pretrained encoder: `n` stride-2 3×3 stages emitting
/// `F_1..F_n`, plus a 1×1 projection of `F_n` to the signal width.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub stages: Vec<ConvBn<T>>,
    pub signal: ConvBn<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub plan: ModelPlan,
    pub backbone: Backbone<T>,
    /// `None` where the reduction is `"-"`.
    pub reductions: Vec<Option<ConvBn<T>>>,
    /// `None` when the grid is 1×1 and the head is removed.
    pub context: Option<ContextHeadParams<T>>,
    /// Finest block first, parallel to `plan.blocks`.
    pub mappers: Vec<WeightMapperParams<T>>,
    pub blocks: Vec<DecoderBlock<T>>,
    pub fused: bool,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub pyramid: FeaturePyramid<T>,
    pub signal: Signal<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds with the seed recorded in the config.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_with_seed(config, config.seed)
    }

    /// Draws every learned tensor from `N(0, 0.02²)` in sorted-name order;
    /// batch norms start at identity statistics.
    pub fn build_with_seed(config: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut file = WeightFile {
            fused: false,
            tensors: Default::default(),
        };
        for (name, dims) in expected_tensors(&plan, false) {
            let n: usize = dims.iter().product();
            let data: Vec<T> = match name.rsplit('.').next().unwrap() {
                "gamma" | "var" => vec![T::one(); n],
                "beta" | "mean" => vec![T::zero(); n],
                "eps" => vec![T::of(BN_EPS); n],
                _ => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
            };
            file.tensors.insert(name, Array::new(dims, data));
        }
        Self::from_weight_file(config, &file)
    }

    /// Replaces every batch-norm statistic with seeded non-trivial values
    /// (gamma, var in `[0.5, 1.5)`, beta, mean in `[-0.2, 0.2)`).
    pub fn randomize_norm_stats(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wide = Uniform::new(0.5, 1.5);
        let narrow = Uniform::new(-0.2, 0.2);
        let mut file = self.to_weight_file();
        for (name, arr) in file.tensors.iter_mut() {
            let dist = match name.rsplit('.').next().unwrap() {
                "gamma" | "var" => wide,
                "beta" | "mean" => narrow,
                _ => continue,
            };
            arr.data
                .iter_mut()
                .for_each(|v| *v = T::of(dist.sample(&mut rng)));
        }
        *self = Self::from_weight_file(&self.config, &file)?;
        Ok(())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(image, &DpwKernel::Tiled)
    }

    pub fn forward_with(&self, image: &Tensor<T>, exec: &dyn DpwExec<T>) -> Result<Tensor<T>> {
        Ok(self.trace(image, exec)?.logits)
    }

    pub fn trace(&self, image: &Tensor<T>, exec: &dyn DpwExec<T>) -> Result<Trace<T>> {
        let p = &self.plan;
        let want = Shape::new(1, 3, p.height, p.width);
        if image.shape() != want {
            return Err(Error::shape("forward", want, image.shape()));
        }
        let mut raw = Vec::with_capacity(p.levels);
        let mut f = image.clone();
        for stage in &self.backbone.stages {
            f = stage.forward(&f)?;
            raw.push(f.clone());
        }
        let features = raw
            .iter()
            .zip(&self.reductions)
            .map(|(f, r)| match r {
                Some(r) => r.forward(f),
                None => Ok(f.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut phi = self.backbone.signal.forward(raw.last().unwrap())?;
        if let Some(ctx) = &self.context {
            phi = context_head(&phi, ctx)?;
        }
        let (sh, sw) = p.signal_hw;
        let (nh, nw) = p.grid;
        if (sh, sw) != (nh, nw) {
            phi = avg_pool2(&phi, (sh / nh, sw / nw), (sh / nh, sw / nw))?;
        }
        let signal = Signal {
            phi,
            partition: p.partition.clone(),
        };
        let pyramid = FeaturePyramid {
            image: image.clone(),
            features,
        };
        let logits = decoder_forward(&pyramid, &self.blocks, p.grid, exec, |k| {
            map_weights(
                &signal.slice(k)?,
                &self.mappers[k],
                &self.blocks[k].spec,
                p.grid,
            )
        })?;
        Ok(Trace {
            pyramid,
            signal,
            logits,
        })
    }

    /// Folds every batch norm into the preceding convolution or weight mapper.
    pub fn fuse(&self) -> Result<Self> {
        if self.fused {
            return Err(Error::FusionState("model is already fused".into()));
        }
        let fuse_all = |v: &[ConvBn<T>]| v.iter().map(ConvBn::fused).collect::<Result<Vec<_>>>();
        let backbone = Backbone {
            stages: fuse_all(&self.backbone.stages)?,
            signal: self.backbone.signal.fused()?,
        };
        let reductions = self
            .reductions
            .iter()
            .map(|r| r.as_ref().map(ConvBn::fused).transpose())
            .collect::<Result<Vec<_>>>()?;
        let context = match &self.context {
            Some(c) => Some(ContextHeadParams {
                down: fuse_all(&c.down)?,
                fuse: fuse_all(&c.fuse)?,
            }),
            None => None,
        };
        let mappers = self
            .mappers
            .iter()
            .zip(&self.blocks)
            .map(|(m, b)| fuse_bn_into_mapper(m, &b.spec, &b.norms))
            .collect::<Result<Vec<_>>>()?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| DecoderBlock {
                spec: b.spec.clone(),
                norms: BlockNorms::none(),
            })
            .collect();
        Ok(Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            backbone,
            reductions,
            context,
            mappers,
            blocks,
            fused: true,
        })
    }

    /// Number of stored tensors.
    pub fn tensor_count(&self) -> usize {
        expected_tensors(&self.plan, self.fused).len()
    }

    /// Total stored scalars.
    pub fn param_count(&self) -> usize {
        expected_tensors(&self.plan, self.fused)
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    /// Canonical HSEGW1 bytes.
    pub fn encode(&self) -> Vec<u8> {
        encode_weights(&self.to_weight_file())
    }

    pub fn decode(config: &ModelConfig, bytes: &[u8]) -> Result<Self> {
        let file = decode_weights::<T>(bytes)?;
        Self::from_weight_file(config, &file)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let f = self.to_weight_file();
        let g = WeightFile {
            fused: f.fused,
            tensors: f
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        };
        Model::from_weight_file(&self.config, &g).expect("cast preserves structure")
    }
}
