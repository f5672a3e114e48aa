//! Whole-model forward pass written as plain loops over `(c, h, w)` buffers,
//! reading parameters from a built [`Model`] but none of its operators.
//! Every reduction follows the library's documented accumulation order, so
//! the result is expected to match the modular pipeline bit for bit.

use hyperseg::dpwconv::WeightGrid;
use hyperseg::ops::{BatchNormParams, ConvBn, ConvParams};
use hyperseg::{Model, Scalar, Shape, Tensor};

#[derive(Clone)]
struct Map<T> {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<T>,
}

impl<T: Scalar> Map<T> {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            v: vec![T::zero(); c * h * w],
        }
    }

    fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.v[(c * self.h + i) * self.w + j]
    }

    fn put(&mut self, c: usize, i: usize, j: usize, x: T) {
        self.v[(c * self.h + i) * self.w + j] = x;
    }
}

fn conv<T: Scalar>(x: &Map<T>, p: &ConvParams<T>) -> Map<T> {
    let ws = p.weight.shape();
    let (kh, kw, cin_g) = (ws.h, ws.w, ws.c);
    let c_out = ws.n;
    let per_group = c_out / p.groups;
    let h_out = (x.h + 2 * p.padding - kh) / p.stride + 1;
    let w_out = (x.w + 2 * p.padding - kw) / p.stride + 1;
    let w = p.weight.data();
    let mut y = Map::zeros(c_out, h_out, w_out);
    for o in 0..c_out {
        let g = o / per_group;
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = T::zero();
                for ci in 0..cin_g {
                    for a in 0..kh {
                        for b in 0..kw {
                            let r = (i * p.stride + a) as isize - p.padding as isize;
                            let q = (j * p.stride + b) as isize - p.padding as isize;
                            if r < 0 || q < 0 || r >= x.h as isize || q >= x.w as isize {
                                continue;
                            }
                            acc = acc
                                + w[((o * cin_g + ci) * kh + a) * kw + b]
                                    * x.get(g * cin_g + ci, r as usize, q as usize);
                        }
                    }
                }
                if let Some(bias) = &p.bias {
                    acc = acc + bias[o];
                }
                y.put(o, i, j, acc);
            }
        }
    }
    y
}

fn bn<T: Scalar>(x: &mut Map<T>, p: &BatchNormParams<T>) {
    for c in 0..x.c {
        let d = (p.var[c] + p.eps).sqrt();
        for k in c * x.h * x.w..(c + 1) * x.h * x.w {
            x.v[k] = p.gamma[c] * (x.v[k] - p.mean[c]) / d + p.beta[c];
        }
    }
}

fn relu6<T: Scalar>(x: &mut Map<T>) {
    let six = T::of(6.0);
    x.v.iter_mut().for_each(|v| *v = v.max(T::zero()).min(six));
}

fn conv_bn<T: Scalar>(x: &Map<T>, l: &ConvBn<T>) -> Map<T> {
    let mut y = conv(x, &l.conv);
    if let Some(p) = &l.bn {
        bn(&mut y, p);
    }
    relu6(&mut y);
    y
}

fn concat<T: Scalar>(parts: &[&Map<T>]) -> Map<T> {
    let (h, w) = (parts[0].h, parts[0].w);
    let mut v = Vec::new();
    for p in parts {
        assert_eq!((p.h, p.w), (h, w), "concat spatial mismatch");
        v.extend_from_slice(&p.v);
    }
    Map {
        c: v.len() / (h * w),
        h,
        w,
        v,
    }
}

fn mean_pool<T: Scalar>(x: &Map<T>, kh: usize, kw: usize) -> Map<T> {
    let count = T::of((kh * kw) as f64);
    let mut y = Map::zeros(x.c, x.h / kh, x.w / kw);
    for c in 0..x.c {
        for i in 0..y.h {
            for j in 0..y.w {
                let mut s = T::zero();
                for a in 0..kh {
                    for b in 0..kw {
                        s = s + x.get(c, i * kh + a, j * kw + b);
                    }
                }
                y.put(c, i, j, s / count);
            }
        }
    }
    y
}

fn nearest<T: Scalar>(x: &Map<T>, fh: usize, fw: usize) -> Map<T> {
    let mut y = Map::zeros(x.c, x.h * fh, x.w * fw);
    for c in 0..y.c {
        for i in 0..y.h {
            for j in 0..y.w {
                y.put(c, i, j, x.get(c, i / fh, j / fw));
            }
        }
    }
    y
}

fn half_pixel(o: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0).min((n - 1) as f64);
    let lo = s.floor() as usize;
    (lo, (lo + 1).min(n - 1), s - lo as f64)
}

fn bilinear2<T: Scalar>(x: &Map<T>) -> Map<T> {
    let mut y = Map::zeros(x.c, 2 * x.h, 2 * x.w);
    let one = T::one();
    for c in 0..x.c {
        for i in 0..y.h {
            let (i0, i1, ty) = half_pixel(i, x.h);
            let ty = T::of(ty);
            for j in 0..y.w {
                let (j0, j1, tx) = half_pixel(j, x.w);
                let tx = T::of(tx);
                let top = x.get(c, i0, j0) * (one - tx) + x.get(c, i0, j1) * tx;
                let bot = x.get(c, i1, j0) * (one - tx) + x.get(c, i1, j1) * tx;
                y.put(c, i, j, top * (one - ty) + bot * ty);
            }
        }
    }
    y
}

fn coords<T: Scalar>(h: usize, w: usize) -> Map<T> {
    let f = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            (2.0 * i as f64 - n as f64 + 1.0) / (n as f64 - 1.0)
        }
    };
    let mut p = Map::zeros(2, h, w);
    for i in 0..h {
        for j in 0..w {
            p.put(0, i, j, T::of(f(i, h)));
            p.put(1, i, j, T::of(f(j, w)));
        }
    }
    p
}

/// Per-pixel dynamic convolution reading the weight at its flat position.
fn dynamic<T: Scalar>(x: &Map<T>, g: &WeightGrid<T>) -> Map<T> {
    let (ph, pw) = (x.h / g.nh, x.w / g.nw);
    let (rh, rw) = (g.kh / 2, g.kw / 2);
    let per_group = g.c_out / g.groups;
    let mut y = Map::zeros(g.c_out, x.h, x.w);
    for o in 0..g.c_out {
        let grp = o / per_group;
        for i in 0..x.h {
            for j in 0..x.w {
                let cell = (i / ph) * g.nw + j / pw;
                let cells = g.nh * g.nw;
                let mut acc = T::zero();
                for ci in 0..g.cin_g {
                    for a in 0..g.kh {
                        for b in 0..g.kw {
                            let (r, q) = (
                                i as isize + a as isize - rh as isize,
                                j as isize + b as isize - rw as isize,
                            );
                            if r < 0 || q < 0 || r >= x.h as isize || q >= x.w as isize {
                                continue;
                            }
                            let k = ((o * g.cin_g + ci) * g.kh + a) * g.kw + b;
                            acc = acc
                                + g.weight[k * cells + cell]
                                    * x.get(grp * g.cin_g + ci, r as usize, q as usize);
                        }
                    }
                }
                if let Some(bias) = &g.bias {
                    acc = acc + bias[o * cells + cell];
                }
                y.put(o, i, j, acc);
            }
        }
    }
    y
}

/// Logits of `model` for a `(1, 3, H, W)` image.
pub fn forward<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Tensor<T> {
    let plan = &model.plan;
    let s = image.shape();
    let img = Map {
        c: 3,
        h: s.h,
        w: s.w,
        v: image.data().to_vec(),
    };

    let mut raw = Vec::new();
    let mut f = img.clone();
    for stage in &model.backbone.stages {
        f = conv_bn(&f, stage);
        raw.push(f.clone());
    }
    let feats: Vec<Map<T>> = raw
        .iter()
        .zip(&model.reductions)
        .map(|(f, r)| r.as_ref().map_or_else(|| f.clone(), |r| conv_bn(f, r)))
        .collect();

    let mut phi = conv_bn(raw.last().unwrap(), &model.backbone.signal);
    if let Some(ctx) = &model.context {
        let d = ctx.down.len();
        if d > 0 {
            let mut skips = vec![phi.clone()];
            for l in &ctx.down {
                let next = conv_bn(skips.last().unwrap(), l);
                skips.push(next);
            }
            let bottom = &skips[d];
            let pooled = mean_pool(bottom, bottom.h, bottom.w);
            let up = nearest(&pooled, skips[d - 1].h, skips[d - 1].w);
            let mut y = conv_bn(&concat(&[&skips[d - 1], &up]), &ctx.fuse[d - 1]);
            for l in (0..d - 1).rev() {
                let up = nearest(&y, 2, 2);
                y = conv_bn(&concat(&[&skips[l], &up]), &ctx.fuse[l]);
            }
            phi = y;
        }
    }
    let (nh, nw) = plan.grid;
    if (phi.h, phi.w) != (nh, nw) {
        phi = mean_pool(&phi, phi.h / nh, phi.w / nw);
    }

    let mut start = 0;
    let mut slices = Vec::new();
    for &c in &plan.partition {
        let cells = nh * nw;
        slices.push(Map {
            c,
            h: nh,
            w: nw,
            v: phi.v[start * cells..(start + c) * cells].to_vec(),
        });
        start += c;
    }

    let mut prev: Option<Map<T>> = None;
    for (k, block) in model.blocks.iter().enumerate().rev() {
        let spec = &block.spec;
        let src = if spec.level == 0 {
            &img
        } else {
            &feats[spec.level - 1]
        };
        let pos = coords::<T>(src.h, src.w);
        let x = match prev.take() {
            None => concat(&[src, &pos]),
            Some(p) => concat(&[&bilinear2(&p), src, &pos]),
        };
        assert_eq!(
            x.c, spec.in_channels,
            "block m{} input channels",
            spec.level
        );

        let raw_params = conv(&slices[k], &model.mappers[k].conv);
        let cells = nh * nw;
        let norms = block.norms.as_slice();
        let pieces = spec.pieces();
        let mut t = x.clone();
        for (n, piece) in pieces.iter().enumerate() {
            let w0 = piece.offset * cells;
            let b0 = (piece.offset + piece.weight_len) * cells;
            let grid = WeightGrid {
                c_out: piece.c_out,
                cin_g: piece.c_in / piece.groups,
                kh: piece.kernel,
                kw: piece.kernel,
                nh,
                nw,
                groups: piece.groups,
                weight: raw_params.v[w0..b0].to_vec(),
                bias: Some(raw_params.v[b0..b0 + piece.c_out * cells].to_vec()),
            };
            t = dynamic(&t, &grid);
            if let Some(p) = norms[n] {
                bn(&mut t, p);
            }
            if n + 1 < pieces.len() || spec.hidden.is_none() {
                relu6(&mut t);
            }
        }
        if spec.residual {
            t.v.iter_mut().zip(&x.v).for_each(|(a, &b)| *a = *a + b);
        }
        prev = Some(t);
    }
    let mut y = prev.expect("at least one block");
    while y.h < s.h {
        y = bilinear2(&y);
    }
    Tensor::new(Shape::new(1, y.c, y.h, y.w), y.v).expect("logit shape")
}
