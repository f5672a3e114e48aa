//! Dynamic patch-wise convolution.
//!
//! The feature map is split into an `N_h × N_w` grid of equal patches and each
//! patch is convolved with its own kernel. Padding is applied once to the whole
//! map, so a kernel near a patch boundary reads the neighbouring patch's pixels
//! (the halo) and only the true map border sees zeros. Stride is always 1 and
//! kernels are odd-sized and centred.
//!
//! Both kernels accumulate each output pixel in the order
//! (in-channel, kernel-row, kernel-col), skip taps that fall in the border
//! padding and add the bias last, exactly like [`crate::ops::conv2d`].

use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Equal-sized patch grid over an `h × w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub nh: usize,
    pub nw: usize,
    /// Patch height in pixels.
    pub ph: usize,
    /// Patch width in pixels.
    pub pw: usize,
}

impl PatchLayout {
    pub fn new(h: usize, w: usize, nh: usize, nw: usize) -> Result<Self> {
        if nh == 0 || nw == 0 || h % nh != 0 || w % nw != 0 || h == 0 || w == 0 {
            return Err(Error::Layout(format!(
                "{h}x{w} map is not divisible into a {nh}x{nw} patch grid"
            )));
        }
        Ok(PatchLayout {
            nh,
            nw,
            ph: h / nh,
            pw: w / nw,
        })
    }

    pub fn height(&self) -> usize {
        self.nh * self.ph
    }

    pub fn width(&self) -> usize {
        self.nw * self.pw
    }

    /// Patch owning pixel `(y, x)`.
    #[inline]
    pub fn owner(&self, y: usize, x: usize) -> (usize, usize) {
        (y / self.ph, x / self.pw)
    }

    pub fn cells(&self) -> usize {
        self.nh * self.nw
    }
}

/// Per-patch convolution parameters.
///
/// `weight` has logical shape `(C_out, C_in / G, K_h, K_w, N_h, N_w)` and
/// `bias` shape `(C_out, N_h, N_w)`, both row-major. This is also the channel
/// layout produced by a weight mapper, so a mapper output slice can be used
/// without reshuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid<T> {
    pub c_out: usize,
    pub cin_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub nh: usize,
    pub nw: usize,
    pub groups: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> WeightGrid<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_out: usize,
        cin_g: usize,
        (kh, kw): (usize, usize),
        (nh, nw): (usize, usize),
        groups: usize,
        weight: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let wg = WeightGrid {
            c_out,
            cin_g,
            kh,
            kw,
            nh,
            nw,
            groups,
            weight,
            bias,
        };
        wg.validate()?;
        Ok(wg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.c_out == 0 || self.cin_g == 0 || self.c_out % self.groups != 0 {
            return Err(Error::shape(
                "dpwconv",
                format!("C_out divisible by groups {}", self.groups),
                format!("C_out {}", self.c_out),
            ));
        }
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(Error::shape(
                "dpwconv",
                "odd kernel",
                format!("{}x{}", self.kh, self.kw),
            ));
        }
        if self.nh == 0 || self.nw == 0 {
            return Err(Error::Layout("empty weight grid".into()));
        }
        if self.weight.len() != self.weight_len() {
            return Err(Error::shape(
                "dpwconv weight",
                format!("{} values", self.weight_len()),
                format!("{} values", self.weight.len()),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.bias_len() {
                return Err(Error::shape(
                    "dpwconv bias",
                    format!("{} values", self.bias_len()),
                    format!("{} values", b.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.cin_g * self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.cin_g * self.kh * self.kw * self.nh * self.nw
    }

    pub fn bias_len(&self) -> usize {
        self.c_out * self.nh * self.nw
    }

    #[inline]
    pub fn w_index(
        &self,
        o: usize,
        ci: usize,
        ki: usize,
        kj: usize,
        pi: usize,
        pj: usize,
    ) -> usize {
        ((((o * self.cin_g + ci) * self.kh + ki) * self.kw + kj) * self.nh + pi) * self.nw + pj
    }

    #[inline]
    pub fn b_index(&self, o: usize, pi: usize, pj: usize) -> usize {
        (o * self.nh + pi) * self.nw + pj
    }

    /// Replicates one static kernel over every patch.
    pub fn uniform(conv: &ConvParams<T>, nh: usize, nw: usize) -> Result<Self> {
        let ws = conv.weight.shape();
        let cells = nh * nw;
        let mut weight = Vec::with_capacity(conv.weight.data().len() * cells);
        for &v in conv.weight.data() {
            weight.extend(std::iter::repeat(v).take(cells));
        }
        let bias = conv.bias.as_ref().map(|b| {
            b.iter()
                .flat_map(|&v| std::iter::repeat(v).take(cells))
                .collect()
        });
        Self::new(
            ws.n,
            ws.c,
            (ws.h, ws.w),
            (nh, nw),
            conv.groups,
            weight,
            bias,
        )
    }

    /// Copies the kernel of patch `(pi, pj)` for output channel `o` into `buf`,
    /// laid out `(ci, ki, kj)`.
    fn gather_kernel(&self, o: usize, pi: usize, pj: usize, buf: &mut [T]) {
        let mut k = 0;
        for ci in 0..self.cin_g {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    buf[k] = self.weight[self.w_index(o, ci, ki, kj, pi, pj)];
                    k += 1;
                }
            }
        }
    }
}

/// Which forward implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DpwKernel {
    Naive,
    Tiled,
}

impl DpwKernel {
    pub fn name(self) -> &'static str {
        match self {
            DpwKernel::Naive => "naive",
            DpwKernel::Tiled => "tiled",
        }
    }
}

pub fn dpwconv<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
    kernel: DpwKernel,
) -> Result<Tensor<T>> {
    match kernel {
        DpwKernel::Naive => dpwconv_naive(x, wg, layout),
        DpwKernel::Tiled => dpwconv_tiled(x, wg, layout),
    }
}

fn check_inputs<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
) -> Result<Shape> {
    wg.validate()?;
    let s = x.shape();
    if s.h != layout.height() || s.w != layout.width() {
        return Err(Error::Layout(format!(
            "{}x{} map does not match a {}x{} grid of {}x{} patches",
            s.h, s.w, layout.nh, layout.nw, layout.ph, layout.pw
        )));
    }
    if (wg.nh, wg.nw) != (layout.nh, layout.nw) {
        return Err(Error::Layout(format!(
            "weight grid is {}x{} but layout is {}x{}",
            wg.nh, wg.nw, layout.nh, layout.nw
        )));
    }
    if s.c != wg.c_in() {
        return Err(Error::shape(
            "dpwconv",
            format!(
                "input with {} channels ({} groups of {})",
                wg.c_in(),
                wg.groups,
                wg.cin_g
            ),
            format!("input {s}"),
        ));
    }
    Ok(Shape::new(s.n, wg.c_out, s.h, s.w))
}

/// Reference kernel: one output pixel at a time, in raster order.
pub fn dpwconv_naive<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
) -> Result<Tensor<T>> {
    let out_shape = check_inputs(x, wg, layout)?;
    let s = x.shape();
    let (ph, pw) = ((wg.kh - 1) / 2, (wg.kw - 1) / 2);
    let cout_g = wg.c_out / wg.groups;
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.n {
        for o in 0..wg.c_out {
            let g = o / cout_g;
            for y in 0..s.h {
                for xx in 0..s.w {
                    let (pi, pj) = layout.owner(y, xx);
                    let mut acc = T::zero();
                    for ci in 0..wg.cin_g {
                        let c = g * wg.cin_g + ci;
                        for ki in 0..wg.kh {
                            let r = y as isize + ki as isize - ph as isize;
                            if r < 0 || r >= s.h as isize {
                                continue;
                            }
                            for kj in 0..wg.kw {
                                let col = xx as isize + kj as isize - pw as isize;
                                if col < 0 || col >= s.w as isize {
                                    continue;
                                }
                                let wv = wg.weight[wg.w_index(o, ci, ki, kj, pi, pj)];
                                acc = acc + wv * x.at(b, c, r as usize, col as usize);
                            }
                        }
                    }
                    let v = match &wg.bias {
                        Some(bias) => acc + bias[wg.b_index(o, pi, pj)],
                        None => acc,
                    };
                    out.set(b, o, y, xx, v);
                }
            }
        }
    }
    Ok(out)
}

/// Optimized kernel. Output planes are independent work units; within a plane
/// each patch's kernel is gathered into a contiguous buffer and the patch rows
/// are accumulated a row at a time. Per-pixel accumulation order matches
/// [`dpwconv_naive`], so results are bit-identical.
pub fn dpwconv_tiled<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
) -> Result<Tensor<T>> {
    let out_shape = check_inputs(x, wg, layout)?;
    let s = x.shape();
    let (pad_h, pad_w) = ((wg.kh - 1) / 2, (wg.kw - 1) / 2);
    let cout_g = wg.c_out / wg.groups;
    let ksize = wg.cin_g * wg.kh * wg.kw;
    let mut out = vec![T::zero(); out_shape.numel()];

    par::for_each_chunk(&mut out, s.plane(), |plane_idx, dst| {
        let (b, o) = (plane_idx / wg.c_out, plane_idx % wg.c_out);
        let g = o / cout_g;
        let mut kbuf = vec![T::zero(); ksize];
        let mut acc = vec![T::zero(); layout.pw];
        for pi in 0..layout.nh {
            for pj in 0..layout.nw {
                wg.gather_kernel(o, pi, pj, &mut kbuf);
                let bias = wg.bias.as_ref().map(|bv| bv[wg.b_index(o, pi, pj)]);
                let x0 = pj * layout.pw;
                let x1 = x0 + layout.pw;
                for y in pi * layout.ph..(pi + 1) * layout.ph {
                    acc.iter_mut().for_each(|a| *a = T::zero());
                    for ci in 0..wg.cin_g {
                        let src = x.plane(b, g * wg.cin_g + ci);
                        for ki in 0..wg.kh {
                            let r = y as isize + ki as isize - pad_h as isize;
                            if r < 0 || r >= s.h as isize {
                                continue;
                            }
                            let row = &src[r as usize * s.w..(r as usize + 1) * s.w];
                            let kbase = (ci * wg.kh + ki) * wg.kw;
                            for kj in 0..wg.kw {
                                let wv = kbuf[kbase + kj];
                                // columns x in [lo, hi) read row[x + kj - pad_w] inside the map
                                let lo = x0.max(pad_w.saturating_sub(kj));
                                let hi = x1.min((s.w + pad_w).saturating_sub(kj));
                                if lo >= hi {
                                    continue;
                                }
                                let src_row = &row[lo + kj - pad_w..hi + kj - pad_w];
                                for (a, &v) in acc[lo - x0..hi - x0].iter_mut().zip(src_row) {
                                    *a = *a + wv * v;
                                }
                            }
                        }
                    }
                    let dst_row = &mut dst[y * s.w + x0..y * s.w + x1];
                    match bias {
                        Some(bv) => dst_row.iter_mut().zip(&acc).for_each(|(d, &a)| *d = a + bv),
                        None => dst_row.copy_from_slice(&acc),
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Vector-Jacobian products of [`dpwconv_naive`].
#[derive(Debug, Clone, PartialEq)]
pub struct DpwGrads<T> {
    pub grad_x: Tensor<T>,
    /// Same layout as [`WeightGrid::weight`].
    pub grad_w: Vec<T>,
    /// Same layout as [`WeightGrid::bias`]; all patches are reported even when the forward had no bias.
    pub grad_b: Vec<T>,
}

pub fn dpwconv_backward<T: Scalar>(
    x: &Tensor<T>,
    wg: &WeightGrid<T>,
    layout: &PatchLayout,
    grad_out: &Tensor<T>,
) -> Result<DpwGrads<T>> {
    let out_shape = check_inputs(x, wg, layout)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "dpwconv_backward",
            out_shape,
            grad_out.shape(),
        ));
    }
    let s = x.shape();
    let (pad_h, pad_w) = ((wg.kh - 1) / 2, (wg.kw - 1) / 2);
    let cout_g = wg.c_out / wg.groups;
    let (lph, lpw) = (layout.ph, layout.pw);
    let in_bounds =
        |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < s.h && (c as usize) < s.w;

    let grad_b = par::map_range(wg.bias_len(), |idx| {
        let (o, cell) = (idx / layout.cells(), idx % layout.cells());
        let (pi, pj) = (cell / layout.nw, cell % layout.nw);
        let mut acc = T::zero();
        for b in 0..s.n {
            for y in pi * lph..(pi + 1) * lph {
                for xx in pj * lpw..(pj + 1) * lpw {
                    acc = acc + grad_out.at(b, o, y, xx);
                }
            }
        }
        acc
    });

    let grad_w = par::map_range(wg.weight_len(), |idx| {
        let pj = idx % wg.nw;
        let pi = (idx / wg.nw) % wg.nh;
        let kj = (idx / (wg.nw * wg.nh)) % wg.kw;
        let ki = (idx / (wg.nw * wg.nh * wg.kw)) % wg.kh;
        let ci = (idx / (wg.nw * wg.nh * wg.kw * wg.kh)) % wg.cin_g;
        let o = idx / (wg.nw * wg.nh * wg.kw * wg.kh * wg.cin_g);
        let c = (o / cout_g) * wg.cin_g + ci;
        let mut acc = T::zero();
        for b in 0..s.n {
            for y in pi * lph..(pi + 1) * lph {
                for xx in pj * lpw..(pj + 1) * lpw {
                    let r = y as isize + ki as isize - pad_h as isize;
                    let col = xx as isize + kj as isize - pad_w as isize;
                    if in_bounds(r, col) {
                        acc = acc + grad_out.at(b, o, y, xx) * x.at(b, c, r as usize, col as usize);
                    }
                }
            }
        }
        acc
    });

    // Gather form: every input pixel sums the output pixels that read it, so
    // halo contributions from neighbouring patches combine in a fixed order.
    let mut gx = vec![T::zero(); s.numel()];
    par::for_each_chunk(&mut gx, s.plane(), |plane_idx, dst| {
        let (b, c) = (plane_idx / s.c, plane_idx % s.c);
        let (g, ci) = (c / wg.cin_g, c % wg.cin_g);
        for r in 0..s.h {
            for col in 0..s.w {
                let mut acc = T::zero();
                for o in g * cout_g..(g + 1) * cout_g {
                    for ki in 0..wg.kh {
                        for kj in 0..wg.kw {
                            let y = r as isize - ki as isize + pad_h as isize;
                            let xx = col as isize - kj as isize + pad_w as isize;
                            if !in_bounds(y, xx) {
                                continue;
                            }
                            let (y, xx) = (y as usize, xx as usize);
                            let (pi, pj) = layout.owner(y, xx);
                            acc = acc
                                + grad_out.at(b, o, y, xx)
                                    * wg.weight[wg.w_index(o, ci, ki, kj, pi, pj)];
                        }
                    }
                }
                dst[r * s.w + col] = acc;
            }
        }
    });

    Ok(DpwGrads {
        grad_x: Tensor::new(s, gx)?,
        grad_w,
        grad_b,
    })
}
