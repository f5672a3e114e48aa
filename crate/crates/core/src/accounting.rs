//! Analytic parameter and FLOP counts. One multiply-accumulate counts as one
//! FLOP; bias adds count once per output element.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::hyper::{mapper_cost, ContextHeadParams};
use crate::model::{ModelPlan, Reduction};

/// FLOPs charged per output element of a bilinear upsample.
pub const BILINEAR_FLOPS_PER_OUTPUT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDescriptor {
    Conv {
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: (usize, usize),
        out_hw: (usize, usize),
        bias: bool,
    },
    /// Same arithmetic as a convolution; its parameters are generated, so none are counted.
    DpwConv {
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: (usize, usize),
        out_hw: (usize, usize),
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        hw: (usize, usize),
    },
    Mapper {
        theta: usize,
        signal_channels: usize,
        groups: usize,
        cells: usize,
    },
    Bilinear {
        channels: usize,
        out_hw: (usize, usize),
    },
    AvgPool {
        channels: usize,
        in_hw: (usize, usize),
    },
}

impl LayerDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerDescriptor::Conv { .. } => "conv",
            LayerDescriptor::DpwConv { .. } => "dpwconv",
            LayerDescriptor::BatchNorm { .. } => "batchnorm",
            LayerDescriptor::Mapper { .. } => "mapper",
            LayerDescriptor::Bilinear { .. } => "bilinear",
            LayerDescriptor::AvgPool { .. } => "avgpool",
        }
    }
}

fn area((h, w): (usize, usize)) -> u64 {
    (h * w) as u64
}

/// `(params, flops)` of one layer.
pub fn count_layer(d: &LayerDescriptor) -> (u64, u64) {
    match *d {
        LayerDescriptor::Conv {
            c_in,
            c_out,
            groups,
            kernel,
            out_hw,
            bias,
        }
        | LayerDescriptor::DpwConv {
            c_in,
            c_out,
            groups,
            kernel,
            out_hw,
            bias,
        } => {
            let w = (c_out * (c_in / groups) * kernel.0 * kernel.1) as u64;
            let b = if bias { c_out as u64 } else { 0 };
            let flops = (w + b) * area(out_hw);
            let params = if matches!(d, LayerDescriptor::Conv { .. }) {
                w + b
            } else {
                0
            };
            (params, flops)
        }
        LayerDescriptor::BatchNorm { channels, hw } => {
            (2 * channels as u64, channels as u64 * area(hw))
        }
        LayerDescriptor::Mapper {
            theta,
            signal_channels,
            groups,
            cells,
        } => mapper_cost(theta, signal_channels, groups, cells)
            .expect("mapper groups divide the signal slice"),
        LayerDescriptor::Bilinear { channels, out_hw } => (
            0,
            BILINEAR_FLOPS_PER_OUTPUT * channels as u64 * area(out_hw),
        ),
        LayerDescriptor::AvgPool { channels, in_hw } => (0, channels as u64 * area(in_hw)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
    /// `|θ^w|`: parameters of all weight mappers.
    pub mapper_params: u64,
    pub mapper_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub fused: bool,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn from_rows(model: &str, fused: bool, rows: Vec<CostRow>) -> Self {
        let sum = |f: &dyn Fn(&CostRow) -> u64, only_mappers: bool| {
            rows.iter()
                .filter(|r| !only_mappers || r.kind == "mapper")
                .map(f)
                .sum()
        };
        let totals = CostTotals {
            params: sum(&|r| r.params, false),
            flops: sum(&|r| r.flops, false),
            mapper_params: sum(&|r| r.params, true),
            mapper_flops: sum(&|r| r.flops, true),
        };
        CostReport {
            model: model.to_string(),
            fused,
            rows,
            totals,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}{}",
            self.model,
            if self.fused { " (fused)" } else { "" }
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "layer", "kind", "params", "flops"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:<9}  {:>12}  {:>14}",
                r.name, r.kind, r.params, r.flops
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "total", "", t.params, t.flops
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "mappers", "", t.mapper_params, t.mapper_flops
        );
        s
    }
}

struct Rows(Vec<CostRow>);

impl Rows {
    fn push(&mut self, name: String, d: LayerDescriptor) {
        let (params, flops) = count_layer(&d);
        self.0.push(CostRow {
            name,
            kind: d.kind().to_string(),
            params,
            flops,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        out_hw: (usize, usize),
        fused: bool,
    ) {
        self.push(
            format!("{prefix}.conv"),
            LayerDescriptor::Conv {
                c_in,
                c_out,
                groups: 1,
                kernel: (kernel, kernel),
                out_hw,
                bias: fused,
            },
        );
        if !fused {
            self.push(
                format!("{prefix}.bn"),
                LayerDescriptor::BatchNorm {
                    channels: c_out,
                    hw: out_hw,
                },
            );
        }
    }
}

/// Costs of every layer of the plan, in execution order. `partition`
/// overrides the plan's signal partition (used to hold it fixed while
/// sweeping group counts).
pub fn count_model(
    plan: &ModelPlan,
    name: &str,
    fused: bool,
    partition: Option<&[usize]>,
) -> CostReport {
    let mut rows = Rows(Vec::new());
    let mut c_in = 3;
    for (i, &c) in plan.stage_channels.iter().enumerate() {
        rows.conv_bn(
            &format!("backbone.stage{}", i + 1),
            c_in,
            c,
            3,
            plan.level_hw(i + 1),
            fused,
        );
        c_in = c;
    }
    let sig = plan.signal_hw;
    rows.conv_bn("backbone.signal", c_in, plan.signal_channels, 1, sig, fused);
    for (i, (&c, &r)) in plan
        .stage_channels
        .iter()
        .zip(&plan.reduced_channels)
        .enumerate()
    {
        if plan.reductions[i] != Reduction::Keep {
            rows.conv_bn(
                &format!("reduce{}", i + 1),
                c,
                r,
                1,
                plan.level_hw(i + 1),
                fused,
            );
        }
    }
    if let Some(d) = plan.context_depth {
        let ch = ContextHeadParams::<f64>::level_channels(plan.signal_channels, d);
        for l in 0..d {
            let hw = (sig.0 >> (l + 1), sig.1 >> (l + 1));
            rows.conv_bn(&format!("context.down{l}"), ch[l], ch[l + 1], 2, hw, fused);
        }
        if d > 0 {
            let hw = (sig.0 >> d, sig.1 >> d);
            rows.push(
                "context.pool".into(),
                LayerDescriptor::AvgPool {
                    channels: ch[d],
                    in_hw: hw,
                },
            );
        }
        for l in (0..d).rev() {
            let hw = (sig.0 >> l, sig.1 >> l);
            rows.conv_bn(
                &format!("context.fuse{l}"),
                ch[l] + ch[l + 1],
                ch[l],
                1,
                hw,
                fused,
            );
        }
    }
    if sig != plan.grid {
        rows.push(
            "signal.pool".into(),
            LayerDescriptor::AvgPool {
                channels: plan.signal_channels,
                in_hw: sig,
            },
        );
    }
    let cells = plan.grid.0 * plan.grid.1;
    let partition = partition.unwrap_or(&plan.partition);
    for (spec, &c_phi) in plan.blocks.iter().zip(partition) {
        rows.push(
            format!("block{}.mapper", spec.level),
            LayerDescriptor::Mapper {
                theta: spec.param_count(),
                signal_channels: c_phi,
                groups: spec.mapper_groups,
                cells,
            },
        );
    }
    for (k, spec) in plan.blocks.iter().enumerate().rev() {
        let hw = plan.level_hw(spec.level);
        if k + 1 < plan.blocks.len() {
            let below = plan.blocks[k + 1].out_channels;
            rows.push(
                format!("block{}.upsample", spec.level),
                LayerDescriptor::Bilinear {
                    channels: below,
                    out_hw: hw,
                },
            );
        }
        for piece in spec.pieces() {
            let prefix = format!("block{}.{}", spec.level, piece.name);
            rows.push(
                prefix.clone(),
                LayerDescriptor::DpwConv {
                    c_in: piece.c_in,
                    c_out: piece.c_out,
                    groups: piece.groups,
                    kernel: (piece.kernel, piece.kernel),
                    out_hw: hw,
                    bias: true,
                },
            );
            if !fused {
                rows.push(
                    format!("{prefix}.bn"),
                    LayerDescriptor::BatchNorm {
                        channels: piece.c_out,
                        hw,
                    },
                );
            }
        }
    }
    let first = plan.blocks[0].level;
    for l in (0..first).rev() {
        rows.push(
            format!("logits.upsample{l}"),
            LayerDescriptor::Bilinear {
                channels: plan.classes,
                out_hw: plan.level_hw(l),
            },
        );
    }
    CostReport::from_rows(name, fused, rows.0)
}
