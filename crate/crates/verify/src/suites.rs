//! Verification suites. Each random case draws from its own seed
//! `base + index`, so a failure can be replayed from the reported seed.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperseg::accounting::count_model;
use hyperseg::bench::run_bench;
use hyperseg::decoder::positional_encoding;
use hyperseg::dpwconv::{dpwconv, dpwconv_backward, DpwKernel, PatchLayout, WeightGrid};
use hyperseg::hyper::{divide_channels, fuse_bn_into_conv};
use hyperseg::ops::{conv2d, ConvBn, ConvParams};
use hyperseg::par::with_workers;
use hyperseg::{Model, ModelConfig, Scalar, Shape, Tensor};

use crate::configs;
use crate::oracle::{dpwconv_brute, finite_difference, rel_err};
use crate::straight;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub checks: Vec<Check>,
    pub first_failure_seed: Option<u64>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            cases: 0,
            checks: Vec::new(),
            first_failure_seed: None,
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn fail_seed(&mut self, seed: u64) {
        self.first_failure_seed.get_or_insert(seed);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn merge(name: &str, parts: Vec<SuiteReport>) -> SuiteReport {
        let mut r = SuiteReport::new(name);
        for p in parts {
            r.cases += p.cases;
            if r.first_failure_seed.is_none() {
                r.first_failure_seed = p.first_failure_seed;
            }
            r.checks.extend(p.checks.into_iter().map(|c| Check {
                name: format!("{}: {}", p.suite, c.name),
                ..c
            }));
        }
        r
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ok = self.checks.iter().filter(|c| c.passed).count();
        writeln!(
            f,
            "[{}] {}: {} cases, {}/{} checks passed",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.cases,
            ok,
            self.checks.len()
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "  {} {}: {}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        if let Some(s) = self.first_failure_seed {
            writeln!(f, "  first failing seed: {s}")?;
        }
        Ok(())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Scalar>(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<T> {
    (0..n).map(|_| T::of(r.gen_range(-scale..scale))).collect()
}

/// A random dynamic-convolution problem.
#[derive(Debug, Clone, Copy)]
pub struct DpwCase {
    pub n: usize,
    pub groups: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub k: usize,
    pub grid: (usize, usize),
    pub patch: (usize, usize),
    pub bias: bool,
}

impl DpwCase {
    pub fn random(r: &mut ChaCha8Rng, max_patch: usize) -> Self {
        DpwCase {
            n: r.gen_range(1..=2),
            groups: *[1, 2, 4].choose(r).unwrap(),
            cin_g: r.gen_range(1..=3),
            cout_g: r.gen_range(1..=3),
            k: *[1, 3, 3, 5].choose(r).unwrap(),
            grid: (r.gen_range(1..=4), r.gen_range(1..=4)),
            patch: (r.gen_range(1..=max_patch), r.gen_range(1..=max_patch)),
            bias: r.gen_bool(0.7),
        }
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout::new(
            self.grid.0 * self.patch.0,
            self.grid.1 * self.patch.1,
            self.grid.0,
            self.grid.1,
        )
        .unwrap()
    }

    /// Input in `[-1, 1)`, weights scaled by `1/sqrt(fan_in)`.
    pub fn draw<T: Scalar>(&self, r: &mut ChaCha8Rng) -> (Tensor<T>, WeightGrid<T>) {
        let l = self.layout();
        let shape = Shape::new(self.n, self.groups * self.cin_g, l.height(), l.width());
        let x = Tensor::new(shape, uniform(r, shape.numel(), 1.0)).unwrap();
        let c_out = self.groups * self.cout_g;
        let cells = self.grid.0 * self.grid.1;
        let scale = 1.0 / ((self.cin_g * self.k * self.k) as f64).sqrt();
        let weight = uniform(r, c_out * self.cin_g * self.k * self.k * cells, scale);
        let bias = self.bias.then(|| uniform(r, c_out * cells, 1.0));
        let wg = WeightGrid::new(
            c_out,
            self.cin_g,
            (self.k, self.k),
            self.grid,
            self.groups,
            weight,
            bias,
        )
        .unwrap();
        (x, wg)
    }
}

fn oracle_case<T: Scalar>(seed: u64, tol: f64) -> (bool, f64) {
    let mut r = rng(seed);
    let case = DpwCase::random(&mut r, 5);
    let (x, wg) = case.draw::<T>(&mut r);
    let l = case.layout();
    let naive = dpwconv(&x, &wg, &l, DpwKernel::Naive).unwrap();
    let tiled = dpwconv(&x, &wg, &l, DpwKernel::Tiled).unwrap();
    let brute = dpwconv_brute(&x, &wg, &l);
    let err = naive
        .data()
        .iter()
        .zip(&brute)
        .map(|(a, &b)| rel_err(a.to_f64_lossless(), b))
        .fold(0.0, f64::max);
    (tiled.bit_eq(&naive) && err <= tol, err)
}

/// Tiled ≡ naive bit-exactly; naive against the brute-force oracle.
pub fn dpwconv_oracle(base: u64, cases: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("dpwconv-oracle");
    let (mut worst64, mut worst32, mut bad) = (0.0f64, 0.0f64, 0);
    for k in 0..cases {
        let seed = base + k as u64;
        let (ok64, e64) = oracle_case::<f64>(seed, 1e-12);
        let (ok32, e32) = oracle_case::<f32>(seed, 1e-6);
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
        if !(ok64 && ok32) {
            bad += 1;
            rep.fail_seed(seed);
        }
    }
    rep.cases = cases;
    rep.check(
        "tiled bit-identical to naive, naive within tolerance of brute force",
        bad == 0,
        format!("{bad} failing configurations; worst relative error f64 {worst64:.2e} (tol 1e-12), f32 {worst32:.2e} (tol 1e-6)"),
    );
    rep
}

fn reduction_case<T: Scalar>(seed: u64) -> (bool, bool) {
    let mut r = rng(seed);
    let mut case = DpwCase::random(&mut r, 5);
    case.grid = (1, 1);
    let (x, single) = case.draw::<T>(&mut r);
    let l = case.layout();
    let as_conv = |wg: &WeightGrid<T>| {
        let w = Tensor::new(
            Shape::new(wg.c_out, wg.cin_g, wg.kh, wg.kw),
            wg.weight.clone(),
        )
        .unwrap();
        ConvParams::new(w, wg.bias.clone(), wg.groups, 1, wg.kh / 2).unwrap()
    };
    let conv = as_conv(&single);
    let reference = conv2d(&x, &conv).unwrap();
    let one = [DpwKernel::Naive, DpwKernel::Tiled]
        .iter()
        .all(|&k| dpwconv(&x, &single, &l, k).unwrap().bit_eq(&reference));

    case.grid = (r.gen_range(1..=4), r.gen_range(1..=4));
    let l = case.layout();
    let (x, _) = case.draw::<T>(&mut r);
    let uniform_grid = WeightGrid::uniform(&conv, case.grid.0, case.grid.1).unwrap();
    let reference = conv2d(&x, &conv).unwrap();
    let uni = [DpwKernel::Naive, DpwKernel::Tiled].iter().all(|&k| {
        dpwconv(&x, &uniform_grid, &l, k)
            .unwrap()
            .bit_eq(&reference)
    });
    (one, uni)
}

/// Single-patch and uniform-weight dynamic convolutions equal conv2d bit-exactly.
pub fn reductions(base: u64, cases: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("reductions");
    let (mut single_bad, mut uniform_bad) = (0, 0);
    for k in 0..cases {
        let seed = base + k as u64;
        let (a, b) = reduction_case::<f64>(seed);
        let (c, d) = reduction_case::<f32>(seed);
        if !(a && c) {
            single_bad += 1;
        }
        if !(b && d) {
            uniform_bad += 1;
        }
        if !(a && b && c && d) {
            rep.fail_seed(seed);
        }
    }
    rep.cases = cases;
    rep.check(
        "1x1 grid equals conv2d (f32 and f64, both kernels)",
        single_bad == 0,
        format!("{single_bad} mismatches"),
    );
    rep.check(
        "uniform weights over any grid equal conv2d including borders",
        uniform_bad == 0,
        format!("{uniform_bad} mismatches"),
    );
    rep
}

/// Dynamic convolution with zero padding around every patch instead of the whole map.
fn per_patch_padded(x: &Tensor<f64>, wg: &WeightGrid<f64>, l: &PatchLayout) -> Tensor<f64> {
    let s = x.shape();
    let per_group = wg.c_out / wg.groups;
    Tensor::from_fn(Shape::new(s.n, wg.c_out, s.h, s.w), |n, o, i, j| {
        let (pi, pj) = (i / l.ph, j / l.pw);
        let (top, left) = (pi * l.ph, pj * l.pw);
        let mut v = 0.0;
        for ci in 0..wg.cin_g {
            for a in 0..wg.kh {
                for b in 0..wg.kw {
                    let r = i as isize + a as isize - (wg.kh / 2) as isize;
                    let q = j as isize + b as isize - (wg.kw / 2) as isize;
                    let inside = r >= top as isize
                        && r < (top + l.ph) as isize
                        && q >= left as isize
                        && q < (left + l.pw) as isize;
                    if inside {
                        v += wg.weight[wg.w_index(o, ci, a, b, pi, pj)]
                            * x.at(n, (o / per_group) * wg.cin_g + ci, r as usize, q as usize);
                    }
                }
            }
        }
        v + wg.bias.as_ref().map_or(0.0, |bb| bb[wg.b_index(o, pi, pj)])
    })
}

/// Perturbing a pixel on a patch boundary changes outputs on both sides of it.
pub fn halo(base: u64, cases: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("halo");
    let (mut both_bad, mut distinct_bad) = (0, 0);
    for k in 0..cases {
        let seed = base + k as u64;
        let mut r = rng(seed);
        let mut case = DpwCase::random(&mut r, 4);
        case.k = 3;
        case.n = 1;
        let vertical = r.gen_bool(0.5);
        if vertical {
            case.grid.1 = r.gen_range(2..=4);
        } else {
            case.grid.0 = r.gen_range(2..=4);
        }
        let (x, wg) = case.draw::<f64>(&mut r);
        let l = case.layout();
        // pixel (i, j) is the last of its patch; (i2, j2) the first of the neighbour
        let (i, j, i2, j2) = if vertical {
            let b = r.gen_range(1..case.grid.1) * l.pw;
            let row = r.gen_range(0..l.height());
            (row, b - 1, row, b)
        } else {
            let b = r.gen_range(1..case.grid.0) * l.ph;
            let col = r.gen_range(0..l.width());
            (b - 1, col, b, col)
        };
        let c = r.gen_range(0..x.shape().c);
        let mut y = x.clone();
        y.set(0, c, i, j, x.at(0, c, i, j) + 1.0);
        let changed = |a: &Tensor<f64>, b: &Tensor<f64>, i: usize, j: usize| {
            (0..a.shape().c).any(|o| a.at(0, o, i, j) != b.at(0, o, i, j))
        };
        let (a, b) = (
            dpwconv(&x, &wg, &l, DpwKernel::Tiled).unwrap(),
            dpwconv(&y, &wg, &l, DpwKernel::Tiled).unwrap(),
        );
        let both = changed(&a, &b, i, j) && changed(&a, &b, i2, j2);
        let (pa, pb) = (per_patch_padded(&x, &wg, &l), per_patch_padded(&y, &wg, &l));
        let isolated = changed(&pa, &pb, i, j) && !changed(&pa, &pb, i2, j2);
        if !both {
            both_bad += 1;
            rep.fail_seed(seed);
        }
        if !isolated {
            distinct_bad += 1;
            rep.fail_seed(seed);
        }
    }
    rep.cases = cases;
    rep.check(
        "boundary perturbation reaches both adjacent patches",
        both_bad == 0,
        format!("{both_bad} cases failed"),
    );
    rep.check(
        "per-patch zero padding would not propagate it",
        distinct_bad == 0,
        format!("{distinct_bad} cases failed"),
    );
    rep
}

/// Backward pass against central finite differences of the forward pass.
pub fn gradcheck(base: u64, cases: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("gradcheck");
    let (mut worst, mut bad, mut coords) = (0.0f64, 0, 0);
    for k in 0..cases {
        let seed = base + k as u64;
        let mut r = rng(seed);
        let mut case = DpwCase::random(&mut r, 3);
        case.n = 1;
        case.grid = (r.gen_range(1..=3), r.gen_range(1..=3));
        case.k = *[1, 3].choose(&mut r).unwrap();
        let (x, wg) = case.draw::<f64>(&mut r);
        let l = case.layout();
        let out_shape = Shape::new(1, wg.c_out, l.height(), l.width());
        let g = Tensor::new(out_shape, uniform(&mut r, out_shape.numel(), 1.0)).unwrap();
        let loss = |x: &Tensor<f64>, wg: &WeightGrid<f64>| -> f64 {
            let y = dpwconv(x, wg, &l, DpwKernel::Naive).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let grads = dpwconv_backward(&x, &wg, &l, &g).unwrap();
        let h = 1e-5;
        let fx = finite_difference(x.data(), h, |v| {
            loss(&Tensor::new(x.shape(), v.to_vec()).unwrap(), &wg)
        });
        let fw = finite_difference(&wg.weight, h, |v| {
            let mut w2 = wg.clone();
            w2.weight = v.to_vec();
            loss(&x, &w2)
        });
        let mut pairs: Vec<(f64, f64)> = grads.grad_x.data().iter().copied().zip(fx).collect();
        pairs.extend(grads.grad_w.iter().copied().zip(fw));
        if let Some(b) = &wg.bias {
            let fb = finite_difference(b, h, |v| {
                let mut w2 = wg.clone();
                w2.bias = Some(v.to_vec());
                loss(&x, &w2)
            });
            pairs.extend(grads.grad_b.iter().copied().zip(fb));
        }
        coords += pairs.len();
        let e = pairs
            .iter()
            .map(|&(a, n)| rel_err(a, n))
            .fold(0.0, f64::max);
        worst = worst.max(e);
        if e > 1e-6 {
            bad += 1;
            rep.fail_seed(seed);
        }
    }
    rep.cases = cases;
    rep.check(
        "analytic gradients match central differences (h = 1e-5)",
        bad == 0,
        format!("{bad} failing cases over {coords} coordinates; worst relative error {worst:.2e} (tol 1e-6)"),
    );
    rep
}

/// Hand cases and invariants of the channel allocator.
pub fn divide(base: u64, cases: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("divide-channels");
    for (c, u, w, want) in [
        (32, 8, vec![1, 1, 1, 1], vec![8, 8, 8, 8]),
        (64, 16, vec![3, 1], vec![48, 16]),
        (128, 16, vec![5, 2, 1], vec![80, 32, 16]),
    ] {
        let got = divide_channels(c, u, &w).ok();
        rep.check(
            format!("({c}, {u}, {w:?})"),
            got.as_ref() == Some(&want),
            format!("got {got:?}, expected {want:?}"),
        );
    }
    let mut failures = [0usize; 5];
    for k in 0..cases {
        let seed = base + k as u64;
        let mut r = rng(seed);
        let groups = r.gen_range(1..=6);
        let unit = *[1, 2, 4, 8, 16].choose(&mut r).unwrap();
        let units = groups + r.gen_range(0..=24);
        let hi = if r.gen_bool(0.3) { 4 } else { 5000 };
        let w: Vec<usize> = (0..groups).map(|_| r.gen_range(1..=hi)).collect();
        let out = divide_channels(units * unit, unit, &w).unwrap();
        let mut ok = [
            out.iter().sum::<usize>() == units * unit,
            out.iter().all(|o| o % unit == 0),
            out.iter().all(|&o| o >= unit),
            (0..groups).all(|i| (0..groups).all(|j| w[i] <= w[j] || out[i] >= out[j])),
            true,
        ];
        let mut perm: Vec<usize> = (0..groups).collect();
        perm.shuffle(&mut r);
        let pw: Vec<usize> = perm.iter().map(|&i| w[i]).collect();
        let pout = divide_channels(units * unit, unit, &pw).unwrap();
        // tied weights may trade allocations; compare per weight value as multisets
        let mut a: Vec<(usize, usize)> = perm.iter().map(|&i| (w[i], out[i])).collect();
        let mut b: Vec<(usize, usize)> = pw.iter().copied().zip(pout.iter().copied()).collect();
        a.sort_unstable();
        b.sort_unstable();
        ok[4] = a == b;
        for (f, o) in failures.iter_mut().zip(ok) {
            if !o {
                *f += 1;
            }
        }
        if ok.contains(&false) {
            rep.fail_seed(seed);
        }
    }
    rep.cases = cases;
    for (name, f) in [
        "sum equals C",
        "multiple of the unit",
        "at least one unit",
        "weight-monotone",
        "permutation-consistent",
    ]
    .iter()
    .zip(failures)
    {
        rep.check(
            *name,
            f == 0,
            format!("{f} of {cases} random inputs violate"),
        );
    }
    rep
}

/// Mapper cost halves exactly when every group count doubles.
pub fn proportionality(config: &ModelConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("mapper-proportionality");
    let factors = [(1, 2), (1, 1), (2, 1)];
    let scaled: Vec<ModelConfig> = factors
        .iter()
        .map(|&(a, b)| config.scale_groups(a, b).unwrap())
        .collect();
    let coarsest = scaled.last().unwrap().validate().unwrap().partition;
    let totals: Vec<(u64, u64)> = scaled
        .iter()
        .map(|c| {
            let r = count_model(&c.validate().unwrap(), &c.name, false, Some(&coarsest));
            (r.totals.mapper_params, r.totals.mapper_flops)
        })
        .collect();
    for w in 0..2 {
        let (a, b) = (totals[w], totals[w + 1]);
        rep.check(
            format!(
                "groups {:?} -> {:?}",
                scaled[w].groups,
                scaled[w + 1].groups
            ),
            a.0 == 2 * b.0 && a.1 == 2 * b.1,
            format!(
                "|θ^w| {} -> {} (ratio {:.1}), flops {} -> {} (ratio {:.1})",
                a.0,
                b.0,
                a.0 as f64 / b.0 as f64,
                a.1,
                b.1,
                a.1 as f64 / b.1 as f64
            ),
        );
    }
    rep.cases = factors.len();
    rep
}

fn random_image<T: Scalar>(config: &ModelConfig, seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let shape = Shape::new(1, 3, config.input[0], config.input[1]);
    Tensor::new(
        shape,
        (0..shape.numel())
            .map(|_| T::of(r.gen_range(0.0..1.0)))
            .collect(),
    )
    .unwrap()
}

fn fuse_static<T: Scalar>(m: &Model<T>) -> Model<T> {
    let f = |v: &[ConvBn<T>]| v.iter().map(|c| c.fused().unwrap()).collect::<Vec<_>>();
    let mut out = m.clone();
    out.backbone.stages = f(&m.backbone.stages);
    out.backbone.signal = m.backbone.signal.fused().unwrap();
    out.reductions = m
        .reductions
        .iter()
        .map(|r| r.as_ref().map(|c| c.fused().unwrap()))
        .collect();
    if let Some(c) = out.context.as_mut() {
        c.down = f(&c.down);
        c.fuse = f(&c.fuse);
    }
    out
}

fn fuse_mappers_only<T: Scalar>(m: &Model<T>) -> Model<T> {
    let full = m.fuse().unwrap();
    let mut out = m.clone();
    out.mappers = full.mappers;
    out.blocks = full.blocks;
    out
}

/// Fused and unfused models agree; fusion drops tensors.
pub fn fusion(config: &ModelConfig, inputs: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("fusion");
    let mut m64 = Model::<f64>::build(config).unwrap();
    m64.randomize_norm_stats(seed).unwrap();
    let m32 = m64.cast::<f32>();
    let (f64m, f32m) = (m64.fuse().unwrap(), m32.fuse().unwrap());
    let (s64, s32) = (fuse_static(&m64), fuse_static(&m32));
    let (w64, w32) = (fuse_mappers_only(&m64), fuse_mappers_only(&m32));

    // fuse_bn_into_conv on its own: a stage conv with a bias
    let mut stage = m64.backbone.stages[0].clone();
    stage.conv.bias = Some(vec![0.1; stage.conv.c_out()]);
    let fused_stage = ConvBn {
        conv: fuse_bn_into_conv(&stage.conv, stage.bn.as_ref().unwrap()).unwrap(),
        bn: None,
    };
    let img = random_image::<f64>(config, seed);
    let d = stage
        .forward(&img)
        .unwrap()
        .max_abs_diff(&fused_stage.forward(&img).unwrap());
    rep.check(
        "single conv+BN with bias",
        d <= 1e-12,
        format!("max abs diff {d:.2e}"),
    );

    let (mut worst, mut worst_static, mut worst_mapper) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    for k in 0..inputs {
        let s = seed + 1 + k as u64;
        let x64 = random_image::<f64>(config, s);
        let x32 = x64.cast::<f32>();
        let y64 = m64.forward(&x64).unwrap();
        let y32 = m32.forward(&x32).unwrap();
        let d = [
            y64.max_abs_diff(&f64m.forward(&x64).unwrap()),
            y32.max_abs_diff(&f32m.forward(&x32).unwrap()),
        ];
        worst = [worst[0].max(d[0]), worst[1].max(d[1])];
        if d[0] > 1e-12 || d[1] > 1e-5 {
            rep.fail_seed(s);
        }
        if k < 10 {
            let ds = [
                y64.max_abs_diff(&s64.forward(&x64).unwrap()),
                y32.max_abs_diff(&s32.forward(&x32).unwrap()),
            ];
            let dm = [
                y64.max_abs_diff(&w64.forward(&x64).unwrap()),
                y32.max_abs_diff(&w32.forward(&x32).unwrap()),
            ];
            worst_static = [worst_static[0].max(ds[0]), worst_static[1].max(ds[1])];
            worst_mapper = [worst_mapper[0].max(dm[0]), worst_mapper[1].max(dm[1])];
        }
    }
    rep.cases = inputs;
    let line = |w: [f64; 2]| {
        format!(
            "max abs diff f64 {:.2e} (tol 1e-12), f32 {:.2e} (tol 1e-5)",
            w[0], w[1]
        )
    };
    rep.check(
        "static conv/BN fusion only (10 inputs)",
        worst_static[0] <= 1e-12 && worst_static[1] <= 1e-5,
        line(worst_static),
    );
    rep.check(
        "mapper/BN fusion only (10 inputs)",
        worst_mapper[0] <= 1e-12 && worst_mapper[1] <= 1e-5,
        line(worst_mapper),
    );
    rep.check(
        format!("full fusion ({inputs} inputs)"),
        worst[0] <= 1e-12 && worst[1] <= 1e-5,
        line(worst),
    );
    rep.check(
        "fused model stores fewer tensors",
        f32m.tensor_count() < m32.tensor_count(),
        format!("{} -> {}", m32.tensor_count(), f32m.tensor_count()),
    );
    let back = Model::<f32>::decode(config, &f32m.encode()).unwrap();
    let x = random_image::<f32>(config, seed);
    rep.check(
        "fused weights reload with identical outputs",
        back.fused && back.forward(&x).unwrap().bit_eq(&f32m.forward(&x).unwrap()),
        "HSEGW1 round-trip of the fused model",
    );
    rep
}

/// Corner, antisymmetry and H = 4 values of the positional encoding.
pub fn posenc() -> SuiteReport {
    let mut rep = SuiteReport::new("positional-encoding");
    let sizes = [(2, 2), (4, 4), (3, 7), (16, 9), (64, 128)];
    let mut corners = true;
    let mut anti = true;
    for &(h, w) in &sizes {
        let p = positional_encoding::<f64>(h, w);
        for (i, j, a, b) in [
            (0, 0, -1.0, -1.0),
            (0, w - 1, -1.0, 1.0),
            (h - 1, 0, 1.0, -1.0),
            (h - 1, w - 1, 1.0, 1.0),
        ] {
            corners &= p.at(0, 0, i, j) == a && p.at(0, 1, i, j) == b;
        }
        for i in 0..h {
            for j in 0..w {
                for c in 0..2 {
                    anti &= p.at(0, c, i, j) == -p.at(0, c, h - 1 - i, w - 1 - j);
                }
            }
        }
        let q = positional_encoding::<f32>(h, w);
        corners &= q.at(0, 0, 0, 0) == -1.0 && q.at(0, 1, h - 1, w - 1) == 1.0;
    }
    rep.check(
        "corners are exactly (±1, ±1)",
        corners,
        format!("sizes {sizes:?}"),
    );
    rep.check(
        "P[i][j] == -P[H-1-i][W-1-j] exactly",
        anti,
        format!("sizes {sizes:?}"),
    );
    let p = positional_encoding::<f64>(4, 3);
    let rows: Vec<f64> = (0..4).map(|i| p.at(0, 0, i, 0)).collect();
    let want = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    let err = rows
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    rep.check(
        "H = 4 rows are (-1, -1/3, 1/3, 1)",
        err <= 1e-15,
        format!("{rows:?}, max error {err:.1e}"),
    );
    rep.cases = sizes.len() + 1;
    rep
}

/// Repeated runs, worker counts and the straight-line oracle all agree bit for bit.
pub fn determinism(config: &ModelConfig, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("determinism");
    let m = Model::<f64>::build(config).unwrap();
    let x = random_image::<f64>(config, seed);
    let a = m.forward(&x).unwrap();
    let b = m.forward(&x).unwrap();
    rep.check("two runs", a.bit_eq(&b), "same model, same input");
    let rebuilt = Model::<f64>::build(config).unwrap().forward(&x).unwrap();
    rep.check(
        "rebuilt from the same seed",
        rebuilt.bit_eq(&a),
        format!("seed {}", config.seed),
    );
    for workers in [1, 2, 8] {
        let y = with_workers(Some(workers), || m.forward(&x).unwrap());
        let y32 = with_workers(Some(workers), || {
            m.cast::<f32>().forward(&x.cast()).unwrap()
        });
        let ref32 = m.cast::<f32>().forward(&x.cast()).unwrap();
        rep.check(
            format!("{workers} workers"),
            y.bit_eq(&a) && y32.bit_eq(&ref32),
            "f64 and f32 logits bit-identical to the default pool",
        );
    }
    let naive = m.forward_with(&x, &DpwKernel::Naive).unwrap();
    rep.check(
        "naive kernels end to end",
        naive.bit_eq(&a),
        "whole model with the naive dynamic convolution",
    );
    let line = straight::forward(&m, &x);
    rep.check(
        "straight-line oracle (f64)",
        line.bit_eq(&a),
        format!("max abs diff {:.2e}", line.max_abs_diff(&a)),
    );
    let m32 = m.cast::<f32>();
    let x32 = x.cast::<f32>();
    let line32 = straight::forward(&m32, &x32);
    rep.check(
        "straight-line oracle (f32)",
        line32.bit_eq(&m32.forward(&x32).unwrap()),
        "bit-identical",
    );
    rep.cases = 1;
    rep
}

/// The shipped configs build, type-check, run and round-trip.
pub fn structural(configs: &[ModelConfig]) -> SuiteReport {
    let mut rep = SuiteReport::new("structural");
    for c in configs {
        let result = (|| -> Result<String, String> {
            // channel bookkeeping re-derived from the raw config
            let first = usize::from(!c.include_m0);
            for (k, b) in c.blocks.iter().enumerate() {
                let level = first + k;
                let skip = if level == 0 {
                    3
                } else {
                    c.reductions[level - 1].apply(c.backbone_channels[level - 1])
                };
                let below = c.blocks.get(k + 1).map_or(0, |n| *n.last().unwrap());
                if b[0] != below + skip + 2 {
                    return Err(format!("m{level}: {} != {below} + {skip} + 2", b[0]));
                }
            }
            if *c.blocks[0].last().unwrap() != c.classes {
                return Err("finest block does not emit the class count".into());
            }
            let m = Model::<f32>::build(c).map_err(|e| e.to_string())?;
            let x = random_image::<f32>(c, 1);
            let y = m.forward(&x).map_err(|e| e.to_string())?;
            let want = Shape::new(1, c.classes, c.input[0], c.input[1]);
            if y.shape() != want {
                return Err(format!("logits {} != {want}", y.shape()));
            }
            let back = Model::<f32>::decode(c, &m.encode()).map_err(|e| e.to_string())?;
            if !back.forward(&x).map_err(|e| e.to_string())?.bit_eq(&y) {
                return Err("reloaded weights change the output".into());
            }
            let b64 =
                Model::<f64>::decode(c, &m.cast::<f64>().encode()).map_err(|e| e.to_string())?;
            let x64 = x.cast::<f64>();
            if !b64
                .forward(&x64)
                .map_err(|e| e.to_string())?
                .bit_eq(&m.cast::<f64>().forward(&x64).map_err(|e| e.to_string())?)
            {
                return Err("f64 round-trip changes the output".into());
            }
            Ok(format!(
                "logits {y_shape}, {} tensors, {} scalars",
                m.tensor_count(),
                m.param_count(),
                y_shape = y.shape()
            ))
        })();
        match result {
            Ok(d) => rep.check(&c.name, true, d),
            Err(e) => rep.check(&c.name, false, e),
        }
        rep.cases += 1;
    }
    rep
}

/// Naive against tiled timing on each config; correctness is asserted, speed is reported.
pub fn bench(configs: &[ModelConfig], iterations: usize) -> (SuiteReport, Vec<String>) {
    let mut rep = SuiteReport::new("bench");
    let mut lines = Vec::new();
    for c in configs {
        let m = Model::<f32>::build(c).unwrap();
        let x = random_image::<f32>(c, 3);
        let r = run_bench(&m, &x, iterations).unwrap();
        let same = r.ops.iter().all(|o| o.bit_identical);
        let regress = r.totals.ops_tiled_mean_ms > r.totals.ops_naive_mean_ms;
        lines.push(format!(
            "{}: dynamic convs naive {:.2} ms, tiled {:.2} ms ({:.2}x); model naive {:.2} ms, tiled {:.2} ms{}",
            c.name,
            r.totals.ops_naive_mean_ms,
            r.totals.ops_tiled_mean_ms,
            r.totals.speedup,
            r.model_naive.mean_ms,
            r.model_tiled.mean_ms,
            if regress { "  [tiled slower]" } else { "" }
        ));
        rep.check(
            format!("{} outputs", c.name),
            same,
            format!(
                "{} dynamic convolutions, tiled bit-identical to naive: {same}",
                r.ops.len()
            ),
        );
        rep.cases += 1;
    }
    (rep, lines)
}

/// Suite selectors accepted by [`run_named`].
pub const SUITES: [&str; 10] = [
    "dpwconv",
    "halo",
    "gradcheck",
    "divide-channels",
    "accounting",
    "fusion",
    "posenc",
    "determinism",
    "structural",
    "all",
];

/// Runs a suite by name with the default case counts.
pub fn run_named(name: &str, seed: u64) -> Option<SuiteReport> {
    let tiny = configs::tiny();
    Some(match name {
        "dpwconv" => SuiteReport::merge(
            "dpwconv",
            vec![
                dpwconv_oracle(seed, 500),
                reductions(seed, 200),
                halo(seed, 100),
                gradcheck(seed, 50),
            ],
        ),
        "halo" => halo(seed, 100),
        "gradcheck" => gradcheck(seed, 50),
        "divide-channels" => divide(seed, 1000),
        "accounting" => proportionality(&configs::by_name("hyperseg-m-cityscapes").unwrap()),
        "fusion" => fusion(&tiny, 100, seed),
        "posenc" => posenc(),
        "determinism" => determinism(&tiny, seed),
        "structural" => structural(&configs::scaled()),
        "all" => SuiteReport::merge(
            "all",
            SUITES[..SUITES.len() - 1]
                .iter()
                .filter(|&&s| s != "halo" && s != "gradcheck")
                .map(|s| run_named(s, seed).unwrap())
                .collect(),
        ),
        _ => return None,
    })
}
