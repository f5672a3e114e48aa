use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::MetaBlockSpec;
use crate::error::{Error, Result};
use crate::hyper::{divide_channels, max_context_depth};

/// Channel reduction applied to a backbone feature before it joins the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Reduction {
    /// Written `"-"`: the feature passes through unchanged.
    Keep,
    Ratio(u32, u32),
}

impl Reduction {
    /// `⌈c·a/b⌉`, or `c` for [`Reduction::Keep`].
    pub fn apply(self, c: usize) -> usize {
        match self {
            Reduction::Keep => c,
            Reduction::Ratio(a, b) => (c * a as usize).div_ceil(b as usize),
        }
    }
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "-" {
            return Ok(Reduction::Keep);
        }
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| format!("expected \"a/b\" or \"-\", got {s:?}"))?;
        let a: u32 = a
            .trim()
            .parse()
            .map_err(|_| format!("bad numerator in {s:?}"))?;
        let b: u32 = b
            .trim()
            .parse()
            .map_err(|_| format!("bad denominator in {s:?}"))?;
        if a == 0 || b == 0 {
            return Err(format!("reduction {s:?} must be positive"));
        }
        Ok(Reduction::Ratio(a, b))
    }
}

impl TryFrom<String> for Reduction {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Reduction> for String {
    fn from(r: Reduction) -> String {
        r.to_string()
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reduction::Keep => f.write_str("-"),
            Reduction::Ratio(a, b) => write!(f, "{a}/{b}"),
        }
    }
}

fn default_context_depth() -> usize {
    3
}

/// Architecture description, loaded from JSON.
///
/// Per-block lists (`groups`, `blocks`) run from the finest decoder block to
/// the coarsest. A block schedule `[in, out]` is pointwise-only,
/// `[in, hidden, out]` is a full block; `in` counts the two positional channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub classes: usize,
    /// `[H, W]`.
    pub input: [usize; 2],
    pub levels: usize,
    pub backbone_channels: Vec<usize>,
    pub reductions: Vec<Reduction>,
    /// Width of the context signal.
    pub signal_channels: usize,
    pub groups: Vec<usize>,
    /// `[N_h, N_w]`.
    pub grid: [usize; 2],
    #[serde(default = "default_context_depth")]
    pub context_depth: usize,
    pub blocks: Vec<Vec<usize>>,
    pub include_m0: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Everything derived from a validated config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPlan {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub classes: usize,
    /// `C_1..C_n` as emitted by the backbone.
    pub stage_channels: Vec<usize>,
    /// Channels of `F_1..F_n` after reduction.
    pub reduced_channels: Vec<usize>,
    pub reductions: Vec<Reduction>,
    pub signal_channels: usize,
    /// `(H/2^n, W/2^n)`.
    pub signal_hw: (usize, usize),
    pub grid: (usize, usize),
    /// Context head depth after clamping; `None` when the head is removed (1×1 grid).
    pub context_depth: Option<usize>,
    /// Finest block first.
    pub blocks: Vec<MetaBlockSpec>,
    pub partition: Vec<usize>,
}

impl ModelPlan {
    /// Channel unit of the signal partition: the largest mapper group count.
    pub fn unit(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.mapper_groups)
            .max()
            .unwrap_or(1)
    }

    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn first_level(&self) -> usize {
        usize::from(!self.include_m0)
    }

    /// Same config with every mapper group count multiplied by `num/den`.
    pub fn scale_groups(&self, num: usize, den: usize) -> Result<Self> {
        let mut c = self.clone();
        for g in &mut c.groups {
            if (*g * num) % den != 0 {
                return Err(Error::config(
                    "groups",
                    format!("{g} cannot be scaled by {num}/{den}"),
                ));
            }
            *g = *g * num / den;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<ModelPlan> {
        let n = self.levels;
        let [h, w] = self.input;
        if self.classes == 0 {
            return Err(Error::config("classes", "must be at least 1"));
        }
        if n == 0 || n >= usize::BITS as usize {
            return Err(Error::config("levels", "must be at least 1"));
        }
        if h == 0 || w == 0 || h % (1 << n) != 0 || w % (1 << n) != 0 {
            return Err(Error::config(
                "input",
                format!("{h}x{w} is not divisible by 2^{n}"),
            ));
        }
        if self.backbone_channels.len() != n || self.backbone_channels.contains(&0) {
            return Err(Error::config(
                "backbone_channels",
                format!(
                    "expected {n} positive entries, got {:?}",
                    self.backbone_channels
                ),
            ));
        }
        if self.reductions.len() != n {
            return Err(Error::config(
                "reductions",
                format!("expected {n} entries, got {}", self.reductions.len()),
            ));
        }
        let reduced: Vec<usize> = self
            .backbone_channels
            .iter()
            .zip(&self.reductions)
            .map(|(&c, r)| r.apply(c))
            .collect();
        let signal_hw = (h >> n, w >> n);
        let [nh, nw] = self.grid;
        if nh == 0 || nw == 0 || signal_hw.0 % nh != 0 || signal_hw.1 % nw != 0 {
            return Err(Error::config(
                "grid",
                format!(
                    "{nh}x{nw} does not divide the {}x{} signal map",
                    signal_hw.0, signal_hw.1
                ),
            ));
        }
        let first = self.first_level();
        let count = n + 1 - first;
        if self.blocks.len() != count {
            return Err(Error::config(
                "blocks",
                format!(
                    "expected {count} block schedules, got {}",
                    self.blocks.len()
                ),
            ));
        }
        if self.groups.len() != count {
            return Err(Error::config(
                "groups",
                format!("expected {count} entries, got {}", self.groups.len()),
            ));
        }
        if let Some(g) = self.groups.iter().find(|g| !g.is_power_of_two()) {
            return Err(Error::config(
                "groups",
                format!("{g} is not a power of two"),
            ));
        }

        let mut blocks = Vec::with_capacity(count);
        for (k, (sched, &g)) in self.blocks.iter().zip(&self.groups).enumerate() {
            let level = first + k;
            let field = format!("blocks[{k}] (m{level})");
            let spec = match sched.as_slice() {
                &[i, o] => MetaBlockSpec::new(level, i, None, o, g),
                &[i, hd, o] => MetaBlockSpec::new(level, i, Some(hd), o, g),
                _ => {
                    return Err(Error::config(
                        field,
                        format!("schedule {sched:?} must have 2 or 3 entries"),
                    ))
                }
            };
            if sched.contains(&0) {
                return Err(Error::config(field, "channel counts must be positive"));
            }
            let skip = if level == 0 { 3 } else { reduced[level - 1] };
            let from_below = if level == n {
                0
            } else {
                self.blocks.get(k + 1).map_or(0, |b| *b.last().unwrap())
            };
            let expected = from_below + skip + 2;
            if spec.in_channels != expected {
                return Err(Error::config(
                    field,
                    format!(
                        "input has {} channels but upsampled {from_below} + skip {skip} + positional 2 = {expected}",
                        spec.in_channels
                    ),
                ));
            }
            blocks.push(spec);
        }
        if blocks[0].out_channels != self.classes {
            return Err(Error::config(
                format!("blocks[0] (m{first})"),
                format!(
                    "outputs {} channels but classes is {}",
                    blocks[0].out_channels, self.classes
                ),
            ));
        }

        let unit = *self.groups.iter().max().unwrap();
        let weights: Vec<usize> = blocks.iter().map(MetaBlockSpec::param_count).collect();
        let partition =
            divide_channels(self.signal_channels, unit, &weights).map_err(|e| match e {
                Error::Config { msg, .. } => Error::config("signal_channels", msg),
                other => other,
            })?;
        let context_depth = if (nh, nw) == (1, 1) {
            None
        } else {
            Some(max_context_depth(
                signal_hw.0,
                signal_hw.1,
                self.context_depth,
            ))
        };
        Ok(ModelPlan {
            height: h,
            width: w,
            levels: n,
            classes: self.classes,
            stage_channels: self.backbone_channels.clone(),
            reduced_channels: reduced,
            reductions: self.reductions.clone(),
            signal_channels: self.signal_channels,
            signal_hw,
            grid: (nh, nw),
            context_depth,
            blocks,
            partition,
        })
    }

    /// Advisory checks that do not block a build: blocks whose pointwise-only
    /// flag disagrees with the patch-extent rule at both the 4×4 and 8×8 thresholds,
    /// and context depths that had to be clamped.
    pub fn lint(&self) -> Result<Vec<String>> {
        let plan = self.validate()?;
        let mut notes = Vec::new();
        let fits = |t: usize| {
            plan.blocks.iter().all(|b| {
                let (h, w) = plan.level_hw(b.level);
                let small = h / plan.grid.0 < t || w / plan.grid.1 < t;
                small == b.pointwise_only()
            })
        };
        if !fits(4) && !fits(8) {
            for b in &plan.blocks {
                let (h, w) = plan.level_hw(b.level);
                notes.push(format!(
                    "m{}: patches {}x{}, {}",
                    b.level,
                    h / plan.grid.0,
                    w / plan.grid.1,
                    if b.pointwise_only() {
                        "pointwise-only"
                    } else {
                        "full"
                    }
                ));
            }
            notes.insert(
                0,
                "pointwise-only blocks do not follow a patch-size threshold of 4 or 8".into(),
            );
        }
        if let Some(d) = plan.context_depth {
            if d < self.context_depth {
                notes.push(format!(
                    "context_depth {} clamped to {d} for the {}x{} signal map",
                    self.context_depth, plan.signal_hw.0, plan.signal_hw.1
                ));
            }
        }
        Ok(notes)
    }
}
