//! Property tests for the algebraic invariants of the ops, the dynamic
//! convolution, the hypernetwork pieces, the decoder and the cost model.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperseg::accounting::count_model;
use hyperseg::decoder::{meta_block_forward, BlockNorms, MetaBlockSpec};
use hyperseg::dpwconv::{dpwconv, DpwKernel, PatchLayout, WeightGrid};
use hyperseg::hyper::{
    context_head, map_weights, mapper_cost, ContextHeadParams, MetaBundle, WeightMapperParams,
};
use hyperseg::ops::{
    avg_pool, batchnorm, concat_channels, conv2d, relu6, upsample_nearest, BatchNormParams, ConvBn,
    ConvParams,
};
use hyperseg::{ModelConfig, Shape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::new(
        shape,
        (0..shape.numel()).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn values(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Largest `|a - b| / max(|a|, |b|, 1)` over two equally shaped tensors.
fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn axpby(a: f64, x: &Tensor<f64>, b: f64, y: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| a * p + b * q)
            .collect(),
    )
    .unwrap()
}

fn random_conv(
    r: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    groups: usize,
    k: usize,
) -> ConvParams<f64> {
    let w = random(r, Shape::new(c_out, c_in / groups, k, k));
    ConvParams::new(w, Some(values(r, c_out)), groups, 1, k / 2).unwrap()
}

fn random_grid(
    r: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    groups: usize,
    k: usize,
    grid: (usize, usize),
) -> WeightGrid<f64> {
    let cells = grid.0 * grid.1;
    let w = values(r, c_out * (c_in / groups) * k * k * cells);
    WeightGrid::new(
        c_out,
        c_in / groups,
        (k, k),
        grid,
        groups,
        w,
        Some(values(r, c_out * cells)),
    )
    .unwrap()
}

fn group_dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..4, 1usize..4).prop_map(|(g, a, b)| (g, g * a, g * b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_conv_is_identity(seed: u64, c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let x = random(&mut r, Shape::new(2, c, h, w));
        let eye = Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d(&x, &ConvParams::new(eye, None, 1, 1, 0).unwrap()).unwrap();
        prop_assert!(y.bit_eq(&x));
    }

    #[test]
    fn conv_is_linear(seed: u64, (g, ci, co) in group_dims(), k in prop::sample::select(vec![1usize, 3]), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let shape = Shape::new(1, ci, 5, 6);
        let (x, y) = (random(&mut r, shape), random(&mut r, shape));
        let mut p = random_conv(&mut r, ci, co, g, k);
        p.bias = None;
        let lhs = conv2d(&axpby(a, &x, b, &y), &p).unwrap();
        let rhs = axpby(a, &conv2d(&x, &p).unwrap(), b, &conv2d(&y, &p).unwrap());
        prop_assert!(rel(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn batchnorm_inverts(seed: u64, c in 1usize..6) {
        let mut r = rng(seed);
        let x = random(&mut r, Shape::new(1, c, 4, 3));
        let bn = BatchNormParams {
            gamma: (0..c).map(|_| r.gen_range(0.5..2.0)).collect(),
            beta: values(&mut r, c),
            mean: values(&mut r, c),
            var: (0..c).map(|_| r.gen_range(0.1..2.0)).collect(),
            eps: 1e-5,
        };
        let y = batchnorm(&x, &bn).unwrap();
        let back = Tensor::from_fn(x.shape(), |n, ch, i, j| {
            let d = (bn.var[ch] + bn.eps).sqrt();
            (y.at(n, ch, i, j) - bn.beta[ch]) / bn.gamma[ch] * d + bn.mean[ch]
        });
        prop_assert!(rel(&back, &x) <= 1e-12);
    }

    #[test]
    fn nearest_then_pool_is_identity(seed: u64, f in 1usize..5, c in 1usize..4) {
        let mut r = rng(seed);
        // multiples of 2^-10 keep every partial sum exact
        let x = Tensor::from_fn(Shape::new(1, c, 3, 4), |_, _, _, _| r.gen_range(-1024i32..1024) as f64 / 1024.0);
        let back = avg_pool(&upsample_nearest(&x, f).unwrap(), (f, f), f).unwrap();
        prop_assert!(back.bit_eq(&x));
        let y = random(&mut r, Shape::new(1, c, 3, 4));
        let back = avg_pool(&upsample_nearest(&y, f).unwrap(), (f, f), f).unwrap();
        prop_assert!(rel(&back, &y) <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn concat_then_slice_recovers_inputs(seed: u64, cs in prop::collection::vec(1usize..4, 1..5)) {
        let mut r = rng(seed);
        let parts: Vec<Tensor<f64>> = cs.iter().map(|&c| random(&mut r, Shape::new(2, c, 3, 2))).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        let mut start = 0;
        for p in &parts {
            prop_assert!(cat.slice_channels(start, p.shape().c).unwrap().bit_eq(p));
            start += p.shape().c;
        }
    }

    #[test]
    fn dpwconv_is_linear_in_input_and_weights(
        seed: u64,
        (g, ci, co) in group_dims(),
        k in prop::sample::select(vec![1usize, 3]),
        grid in (1usize..4, 1usize..4),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let layout = PatchLayout::new(2 * grid.0, 3 * grid.1, grid.0, grid.1).unwrap();
        let shape = Shape::new(1, ci, layout.height(), layout.width());
        let (x, y) = (random(&mut r, shape), random(&mut r, shape));
        let mut wg = random_grid(&mut r, ci, co, g, k, grid);
        wg.bias = None;
        let run = |x: &Tensor<f64>, wg: &WeightGrid<f64>| dpwconv(x, wg, &layout, DpwKernel::Tiled).unwrap();
        let lhs = run(&axpby(a, &x, b, &y), &wg);
        prop_assert!(rel(&lhs, &axpby(a, &run(&x, &wg), b, &run(&y, &wg))) <= 1e-12);

        let mut w2 = wg.clone();
        w2.weight = values(&mut r, wg.weight.len());
        let mut mix = wg.clone();
        mix.weight = wg.weight.iter().zip(&w2.weight).map(|(p, q)| a * p + b * q).collect();
        let rhs = axpby(a, &run(&x, &wg), b, &run(&x, &w2));
        prop_assert!(rel(&run(&x, &mix), &rhs) <= 1e-12);
    }

    #[test]
    fn dpwconv_weights_act_only_inside_their_patch(
        seed: u64,
        (g, ci, co) in group_dims(),
        k in prop::sample::select(vec![1usize, 3, 5]),
        grid in (1usize..4, 1usize..4),
        patch in (1usize..4, 1usize..4),
    ) {
        let mut r = rng(seed);
        let layout = PatchLayout::new(patch.0 * grid.0, patch.1 * grid.1, grid.0, grid.1).unwrap();
        let x = random(&mut r, Shape::new(1, ci, layout.height(), layout.width()));
        let wg = random_grid(&mut r, ci, co, g, k, grid);
        let (pi, pj) = (r.gen_range(0..grid.0), r.gen_range(0..grid.1));
        let mut changed = wg.clone();
        for o in 0..co {
            for c in 0..ci / g {
                for a in 0..k {
                    for b in 0..k {
                        changed.weight[wg.w_index(o, c, a, b, pi, pj)] += 1.0;
                    }
                }
            }
            changed.bias.as_mut().unwrap()[wg.b_index(o, pi, pj)] += 1.0;
        }
        let before = dpwconv(&x, &wg, &layout, DpwKernel::Naive).unwrap();
        let after = dpwconv(&x, &changed, &layout, DpwKernel::Tiled).unwrap();
        for o in 0..co {
            for i in 0..layout.height() {
                for j in 0..layout.width() {
                    if layout.owner(i, j) != (pi, pj) {
                        prop_assert_eq!(before.at(0, o, i, j).to_bits(), after.at(0, o, i, j).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn single_patch_and_uniform_grids_equal_conv2d(
        seed: u64,
        (g, ci, co) in group_dims(),
        k in prop::sample::select(vec![1usize, 3, 5]),
        grid in (1usize..4, 1usize..4),
    ) {
        let mut r = rng(seed);
        let conv = random_conv(&mut r, ci, co, g, k);
        let layout = PatchLayout::new(3 * grid.0, 2 * grid.1, grid.0, grid.1).unwrap();
        let x = random(&mut r, Shape::new(2, ci, layout.height(), layout.width()));
        let want = conv2d(&x, &conv).unwrap();
        let uniform = WeightGrid::uniform(&conv, grid.0, grid.1).unwrap();
        prop_assert!(dpwconv(&x, &uniform, &layout, DpwKernel::Tiled).unwrap().bit_eq(&want));
        prop_assert!(dpwconv(&x, &uniform, &layout, DpwKernel::Naive).unwrap().bit_eq(&want));
        let one = PatchLayout::new(layout.height(), layout.width(), 1, 1).unwrap();
        let single = WeightGrid::uniform(&conv, 1, 1).unwrap();
        prop_assert!(dpwconv(&x, &single, &one, DpwKernel::Tiled).unwrap().bit_eq(&want));
    }

    #[test]
    fn context_head_keeps_shape(seed: u64, c in 1usize..9, d in 0usize..4, m in (1usize..3, 1usize..3)) {
        let mut r = rng(seed);
        let (h, w) = (m.0 << d, m.1 << d);
        let ch = ContextHeadParams::<f64>::level_channels(c, d);
        let layer = |r: &mut ChaCha8Rng, ci: usize, co: usize, k: usize, stride: usize| ConvBn {
            conv: ConvParams::new(random(r, Shape::new(co, ci, k, k)), None, 1, stride, 0).unwrap(),
            bn: Some(BatchNormParams::identity(co, 1e-5)),
        };
        let p = ContextHeadParams {
            down: (0..d).map(|l| layer(&mut r, ch[l], ch[l + 1], 2, 2)).collect(),
            fuse: (0..d).map(|l| layer(&mut r, ch[l] + ch[l + 1], ch[l], 1, 1)).collect(),
        };
        let f = random(&mut r, Shape::new(1, c, h, w));
        prop_assert_eq!(context_head(&f, &p).unwrap().shape(), f.shape());
    }

    #[test]
    fn mapper_cost_scales_exactly(theta in 1usize..5000, g in 1usize..9, m in 1usize..9, cells in 1usize..300) {
        let c = 2 * g * m;
        let (p1, f1) = mapper_cost(theta, c, g, cells).unwrap();
        let (p2, f2) = mapper_cost(theta, c, 2 * g, cells).unwrap();
        prop_assert_eq!((p1, f1), (2 * p2, 2 * f2));
        let (p3, f3) = mapper_cost(theta, 2 * c, g, cells).unwrap();
        prop_assert_eq!((p3, f3), (2 * p1, 2 * f1));
    }

    #[test]
    fn bundle_flattens_to_raw_mapper_output(
        seed: u64,
        ci in 1usize..8,
        hidden in prop::option::of(1usize..8),
        co in 1usize..8,
        g in prop::sample::select(vec![1usize, 2, 4]),
        grid in (1usize..4, 1usize..4),
    ) {
        let mut r = rng(seed);
        let spec = MetaBlockSpec::new(0, ci, hidden, co, g);
        let phi_c = 2 * g;
        let out = spec.mapper_channels();
        let p = WeightMapperParams {
            conv: ConvParams::new(random(&mut r, Shape::new(out, phi_c / g, 1, 1)), Some(values(&mut r, out)), g, 1, 0).unwrap(),
        };
        let phi = random(&mut r, Shape::new(1, phi_c, grid.0, grid.1));
        let bundle = map_weights(&phi, &p, &spec, grid).unwrap();
        let raw = conv2d(&phi, &p.conv).unwrap();
        let cells = grid.0 * grid.1;
        prop_assert_eq!(bundle.flatten(), raw.data()[..spec.param_count() * cells].to_vec());
    }

    #[test]
    fn one_cell_grid_block_is_a_static_block(
        seed: u64,
        ci in 1usize..6,
        hidden in prop::option::of(1usize..6),
        co in 1usize..6,
        hw in (1usize..6, 1usize..6),
    ) {
        let mut r = rng(seed);
        let co = if hidden.is_some() && r.gen_bool(0.3) { ci } else { co };
        let spec = MetaBlockSpec::new(0, ci, hidden, co, 1);
        let grids: Vec<WeightGrid<f64>> = spec
            .pieces()
            .iter()
            .map(|p| random_grid(&mut r, p.c_in, p.c_out, p.groups, p.kernel, (1, 1)))
            .collect();
        let mut it = grids.clone().into_iter();
        let bundle = MetaBundle { pw1: it.next().unwrap(), dw: it.next(), pw2: it.next() };
        let x = random(&mut r, Shape::new(1, ci, hw.0, hw.1));
        let layout = PatchLayout::new(hw.0, hw.1, 1, 1).unwrap();
        let got = meta_block_forward(&x, &bundle, &spec, &BlockNorms::none(), &layout, &DpwKernel::Tiled).unwrap();

        let as_conv = |wg: &WeightGrid<f64>| {
            let w = Tensor::new(Shape::new(wg.c_out, wg.cin_g, wg.kh, wg.kw), wg.weight.clone()).unwrap();
            ConvParams::new(w, wg.bias.clone(), wg.groups, 1, wg.kh / 2).unwrap()
        };
        let mut y = conv2d(&x, &as_conv(&grids[0])).unwrap();
        if grids.len() == 1 {
            y = relu6(&y);
        } else {
            y = relu6(&y);
            y = relu6(&conv2d(&y, &as_conv(&grids[1])).unwrap());
            y = conv2d(&y, &as_conv(&grids[2])).unwrap();
            if spec.residual {
                y = y.add(&x).unwrap();
            }
        }
        prop_assert!(got.bit_eq(&y));
    }

    #[test]
    fn meta_block_cell_weights_stay_local(
        seed: u64,
        ci in 1usize..5,
        hidden in prop::option::of(1usize..5),
        co in 1usize..5,
        grid in (2usize..4, 2usize..4),
        piece in 0usize..3,
    ) {
        let mut r = rng(seed);
        let spec = MetaBlockSpec::new(0, ci, hidden, co, 1);
        let pieces = spec.pieces();
        let piece = piece % pieces.len();
        let layout = PatchLayout::new(3 * grid.0, 3 * grid.1, grid.0, grid.1).unwrap();
        let mut grids: Vec<WeightGrid<f64>> = pieces
            .iter()
            .map(|p| random_grid(&mut r, p.c_in, p.c_out, p.groups, p.kernel, grid))
            .collect();
        let x = random(&mut r, Shape::new(1, ci, layout.height(), layout.width()));
        let bundle = |g: &[WeightGrid<f64>]| {
            let mut it = g.to_vec().into_iter();
            MetaBundle { pw1: it.next().unwrap(), dw: it.next(), pw2: it.next() }
        };
        let run = |g: &[WeightGrid<f64>]| {
            meta_block_forward(&x, &bundle(g), &spec, &BlockNorms::none(), &layout, &DpwKernel::Tiled).unwrap()
        };
        let before = run(&grids);
        let (pi, pj) = (r.gen_range(0..grid.0), r.gen_range(0..grid.1));
        let target = &mut grids[piece];
        let wg = target.clone();
        for o in 0..wg.c_out {
            target.bias.as_mut().unwrap()[wg.b_index(o, pi, pj)] += 0.5;
        }
        let after = run(&grids);
        // a pw1 change also reaches the one-pixel halo read by the following 3x3 dw
        let reach = if hidden.is_some() && piece == 0 { 1 } else { 0 };
        let (top, left) = ((pi * 3) as isize - reach, (pj * 3) as isize - reach);
        let (bottom, right) = (top + 3 + 2 * reach, left + 3 + 2 * reach);
        for o in 0..co {
            for i in 0..layout.height() {
                for j in 0..layout.width() {
                    let (ii, jj) = (i as isize, j as isize);
                    if ii < top || ii >= bottom || jj < left || jj >= right {
                        prop_assert_eq!(before.at(0, o, i, j).to_bits(), after.at(0, o, i, j).to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn cost_model_is_pure_and_fusion_drops_parameters() {
    for text in [
        include_str!("../../../configs/tiny.json"),
        include_str!("../../../configs/hyperseg-l-pascal.json"),
        include_str!("../../../configs/hyperseg-s-camvid.json"),
    ] {
        let config = ModelConfig::from_json(text).unwrap();
        let plan = config.validate().unwrap();
        let a = count_model(&plan, &config.name, false, None);
        assert_eq!(a, count_model(&plan, &config.name, false, None));
        let fused = count_model(&plan, &config.name, true, None);
        assert!(a.totals.params > fused.totals.params, "{}", config.name);
        assert_eq!(a.totals.mapper_params, fused.totals.mapper_params);
    }
}
