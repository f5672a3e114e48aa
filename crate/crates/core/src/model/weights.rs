use std::collections::BTreeMap;
use std::path::Path;

use crate::decoder::{BlockNorms, DecoderBlock};
use crate::error::{Error, Result};
use crate::hyper::{ContextHeadParams, WeightMapperParams};
use crate::io::{decode_weights, write_atomic, Array, WeightFile};
use crate::ops::{BatchNormParams, ConvBn, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::{Backbone, Model, ModelConfig, ModelPlan};

const BN_FIELDS: [&str; 5] = ["beta", "eps", "gamma", "mean", "var"];

struct StaticConv {
    prefix: String,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

fn static_convs(plan: &ModelPlan) -> Vec<StaticConv> {
    let conv = |prefix: String, c_out, c_in, kernel, stride, padding| StaticConv {
        prefix,
        c_out,
        c_in,
        kernel,
        stride,
        padding,
    };
    let mut out = Vec::new();
    let mut c_in = 3;
    for (i, &c) in plan.stage_channels.iter().enumerate() {
        out.push(conv(format!("backbone.stage{}", i + 1), c, c_in, 3, 2, 1));
        c_in = c;
    }
    out.push(conv(
        "backbone.signal".into(),
        plan.signal_channels,
        c_in,
        1,
        1,
        0,
    ));
    for (i, (&c, &r)) in plan
        .stage_channels
        .iter()
        .zip(&plan.reduced_channels)
        .enumerate()
    {
        if plan.reductions[i] != super::Reduction::Keep {
            out.push(conv(format!("reduce{}", i + 1), r, c, 1, 1, 0));
        }
    }
    if let Some(d) = plan.context_depth {
        let ch = ContextHeadParams::<f64>::level_channels(plan.signal_channels, d);
        for l in 0..d {
            out.push(conv(format!("context.down{l}"), ch[l + 1], ch[l], 2, 2, 0));
            out.push(conv(
                format!("context.fuse{l}"),
                ch[l],
                ch[l] + ch[l + 1],
                1,
                1,
                0,
            ));
        }
    }
    out
}

/// Every tensor name and dims the plan stores, sorted by name.
pub fn expected_tensors(plan: &ModelPlan, fused: bool) -> Vec<(String, Vec<usize>)> {
    let mut out = BTreeMap::new();
    let bn = |out: &mut BTreeMap<String, Vec<usize>>, prefix: &str, c: usize| {
        for f in BN_FIELDS {
            out.insert(
                format!("{prefix}.bn.{f}"),
                if f == "eps" { vec![1] } else { vec![c] },
            );
        }
    };
    for s in static_convs(plan) {
        out.insert(
            format!("{}.conv.weight", s.prefix),
            vec![s.c_out, s.c_in, s.kernel, s.kernel],
        );
        if fused {
            out.insert(format!("{}.conv.bias", s.prefix), vec![s.c_out]);
        } else {
            bn(&mut out, &s.prefix, s.c_out);
        }
    }
    for (spec, &c_phi) in plan.blocks.iter().zip(&plan.partition) {
        let prefix = format!("block{}", spec.level);
        let m = spec.mapper_channels();
        out.insert(
            format!("{prefix}.mapper.weight"),
            vec![m, c_phi / spec.mapper_groups, 1, 1],
        );
        out.insert(format!("{prefix}.mapper.bias"), vec![m]);
        if !fused {
            for piece in spec.pieces() {
                bn(&mut out, &format!("{prefix}.{}", piece.name), piece.c_out);
            }
        }
    }
    out.into_iter().collect()
}

struct Take<'a, T> {
    tensors: &'a BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Take<'_, T> {
    fn vec(&self, name: &str) -> Vec<T> {
        self.tensors[name].data.clone()
    }

    fn tensor(&self, name: &str) -> Result<Tensor<T>> {
        let a = &self.tensors[name];
        Tensor::new(
            Shape::new(a.dims[0], a.dims[1], a.dims[2], a.dims[3]),
            a.data.clone(),
        )
    }

    fn bn(&self, prefix: &str) -> BatchNormParams<T> {
        let f = |field: &str| self.vec(&format!("{prefix}.bn.{field}"));
        BatchNormParams {
            gamma: f("gamma"),
            beta: f("beta"),
            mean: f("mean"),
            var: f("var"),
            eps: f("eps")[0],
        }
    }
}

fn check_names<T>(plan: &ModelPlan, file: &WeightFile<T>) -> Result<()> {
    let expected = expected_tensors(plan, file.fused);
    for (name, dims) in &expected {
        match file.tensors.get(name) {
            None => return Err(Error::MissingTensor(name.clone())),
            Some(a) if &a.dims != dims => {
                return Err(Error::TensorDims {
                    name: name.clone(),
                    expected: dims.clone(),
                    actual: a.dims.clone(),
                })
            }
            Some(_) => {}
        }
    }
    let known: std::collections::BTreeSet<&str> =
        expected.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(extra) = file.tensors.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::UnexpectedTensor(extra.clone()));
    }
    Ok(())
}

impl<T: Scalar> Model<T> {
    pub fn to_weight_file(&self) -> WeightFile<T> {
        let mut tensors = BTreeMap::new();
        let put_bn =
            |tensors: &mut BTreeMap<String, Array<T>>, prefix: &str, bn: &BatchNormParams<T>| {
                for (f, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("mean", &bn.mean),
                    ("var", &bn.var),
                ] {
                    tensors.insert(format!("{prefix}.bn.{f}"), Array::vector(v.clone()));
                }
                tensors.insert(format!("{prefix}.bn.eps"), Array::vector(vec![bn.eps]));
            };
        let put = |tensors: &mut BTreeMap<String, Array<T>>, prefix: &str, cb: &ConvBn<T>| {
            tensors.insert(
                format!("{prefix}.conv.weight"),
                Array::from_tensor(&cb.conv.weight),
            );
            if let Some(b) = &cb.conv.bias {
                tensors.insert(format!("{prefix}.conv.bias"), Array::vector(b.clone()));
            }
            if let Some(bn) = &cb.bn {
                put_bn(tensors, prefix, bn);
            }
        };
        for (i, s) in self.backbone.stages.iter().enumerate() {
            put(&mut tensors, &format!("backbone.stage{}", i + 1), s);
        }
        put(&mut tensors, "backbone.signal", &self.backbone.signal);
        for (i, r) in self.reductions.iter().enumerate() {
            if let Some(r) = r {
                put(&mut tensors, &format!("reduce{}", i + 1), r);
            }
        }
        if let Some(c) = &self.context {
            for (l, (d, f)) in c.down.iter().zip(&c.fuse).enumerate() {
                put(&mut tensors, &format!("context.down{l}"), d);
                put(&mut tensors, &format!("context.fuse{l}"), f);
            }
        }
        for (m, b) in self.mappers.iter().zip(&self.blocks) {
            let prefix = format!("block{}", b.spec.level);
            tensors.insert(
                format!("{prefix}.mapper.weight"),
                Array::from_tensor(&m.conv.weight),
            );
            tensors.insert(
                format!("{prefix}.mapper.bias"),
                Array::vector(m.conv.bias.clone().unwrap_or_default()),
            );
            for (piece, bn) in b.spec.pieces().iter().zip(b.norms.as_slice()) {
                if let Some(bn) = bn {
                    put_bn(&mut tensors, &format!("{prefix}.{}", piece.name), bn);
                }
            }
        }
        WeightFile {
            fused: self.fused,
            tensors,
        }
    }

    /// Assembles a model after checking that the file holds exactly the
    /// tensors the config calls for.
    pub fn from_weight_file(config: &ModelConfig, file: &WeightFile<T>) -> Result<Self> {
        let plan = config.validate()?;
        check_names(&plan, file)?;
        let t = Take {
            tensors: &file.tensors,
        };
        let fused = file.fused;
        let conv_bn = |prefix: &str, stride: usize, padding: usize| -> Result<ConvBn<T>> {
            let bias = fused.then(|| t.vec(&format!("{prefix}.conv.bias")));
            let conv = ConvParams::new(
                t.tensor(&format!("{prefix}.conv.weight"))?,
                bias,
                1,
                stride,
                padding,
            )?;
            let bn = (!fused).then(|| t.bn(prefix));
            if let Some(bn) = &bn {
                bn.validate()?;
            }
            Ok(ConvBn { conv, bn })
        };
        let mut by_prefix: BTreeMap<String, ConvBn<T>> = BTreeMap::new();
        for s in static_convs(&plan) {
            let cb = conv_bn(&s.prefix, s.stride, s.padding)?;
            by_prefix.insert(s.prefix, cb);
        }
        let mut take = |p: &str| by_prefix.remove(p).expect("planned layer");
        let stages = (1..=plan.levels)
            .map(|i| take(&format!("backbone.stage{i}")))
            .collect();
        let signal = take("backbone.signal");
        let reductions = (1..=plan.levels)
            .map(|i| {
                (plan.reductions[i - 1] != super::Reduction::Keep)
                    .then(|| take(&format!("reduce{i}")))
            })
            .collect();
        let context = plan.context_depth.map(|d| ContextHeadParams {
            down: (0..d).map(|l| take(&format!("context.down{l}"))).collect(),
            fuse: (0..d).map(|l| take(&format!("context.fuse{l}"))).collect(),
        });
        let mut mappers = Vec::new();
        let mut blocks = Vec::new();
        for spec in &plan.blocks {
            let prefix = format!("block{}", spec.level);
            let conv = ConvParams::new(
                t.tensor(&format!("{prefix}.mapper.weight"))?,
                Some(t.vec(&format!("{prefix}.mapper.bias"))),
                spec.mapper_groups,
                1,
                0,
            )?;
            mappers.push(WeightMapperParams { conv });
            let mut norms = BlockNorms::none();
            if !fused {
                for piece in spec.pieces() {
                    let bn = t.bn(&format!("{prefix}.{}", piece.name));
                    bn.validate()?;
                    *norms.slot_mut(piece.name) = Some(bn);
                }
            }
            blocks.push(DecoderBlock {
                spec: spec.clone(),
                norms,
            });
        }
        Ok(Model {
            config: config.clone(),
            plan,
            backbone: Backbone { stages, signal },
            reductions,
            context,
            mappers,
            blocks,
            fused,
        })
    }
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model.encode())
}

/// Reads a weight file of either precision and converts it to `T`.
pub fn load_weights<T: Scalar>(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Model<T>> {
    let bytes = std::fs::read(path)?;
    let file = decode_weights::<T>(&bytes)?;
    Model::from_weight_file(config, &file)
}
