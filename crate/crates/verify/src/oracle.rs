//! Brute-force references written without reference to the library kernels.

use hyperseg::dpwconv::{PatchLayout, WeightGrid};
use hyperseg::{Scalar, Tensor};

/// Per-output-pixel dynamic convolution over an explicitly zero-padded copy
/// of the input, accumulated in f64.
pub fn dpwconv_brute<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
) -> Vec<f64> {
    let s = x.shape();
    let (ph, pw) = (wg.kh / 2, wg.kw / 2);
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let mut padded = vec![0.0f64; s.n * s.c * hp * wp];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    padded[((n * s.c + c) * hp + i + ph) * wp + j + pw] =
                        x.at(n, c, i, j).to_f64_lossless();
                }
            }
        }
    }
    let per_group = wg.c_out / wg.groups;
    let mut out = vec![0.0; s.n * wg.c_out * s.h * s.w];
    for n in 0..s.n {
        for o in 0..wg.c_out {
            let g = o / per_group;
            for i in 0..s.h {
                for j in 0..s.w {
                    let (pi, pj) = (i / layout.ph, j / layout.pw);
                    let mut v = 0.0;
                    for ci in 0..wg.cin_g {
                        let c = g * wg.cin_g + ci;
                        for a in 0..wg.kh {
                            for b in 0..wg.kw {
                                let widx =
                                    ((((o * wg.cin_g + ci) * wg.kh + a) * wg.kw + b) * wg.nh + pi)
                                        * wg.nw
                                        + pj;
                                v += wg.weight[widx].to_f64_lossless()
                                    * padded[((n * s.c + c) * hp + i + a) * wp + j + b];
                            }
                        }
                    }
                    if let Some(bias) = &wg.bias {
                        v += bias[(o * wg.nh + pi) * wg.nw + pj].to_f64_lossless();
                    }
                    out[((n * wg.c_out + o) * s.h + i) * s.w + j] = v;
                }
            }
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let up = f(&p);
            p[k] = x[k] - h;
            let down = f(&p);
            p[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperseg::Shape;

    #[test]
    fn brute_matches_hand_sums() {
        // all-ones 3x3 map, all-ones 3x3 kernel: window counts 4/6/9
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let wg = WeightGrid::new(1, 1, (3, 3), (1, 1), 1, vec![1.0; 9], None).unwrap();
        let y = dpwconv_brute(&x, &wg, &PatchLayout::new(3, 3, 1, 1).unwrap());
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = finite_difference(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
