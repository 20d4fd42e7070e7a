//! Dense kernels shared by the graph ops: im2col convolution, instance statistics.

use super::tensor::{gemm, Float, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies inside `[0, w)`.
fn valid_range(g: &ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let limit = g.w + g.pad; // need ox*stride + kj < w + pad
    let hi = if limit > kj { ((limit - kj - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold the channels `[c0, c0 + cin_g)` of one sample into the `(cin_g*k*k) x (h_out*w_out)`
/// block of `col` that starts at column `off` of a row-major matrix with row stride `ld`.
fn im2col<T: Float>(g: &ConvGeom, sample: &[T], c0: usize, col: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_range(g, kj, wo);
                let dst = &mut col[row * ld + off..row * ld + off + hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (v, s) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Float>(g: &ConvGeom, col: &[T], ld: usize, off: usize, c0: usize, sample: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut row = 0;
    for c in c0..c0 + g.cin_g() {
        let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_range(g, kj, wo);
                let src = &col[row * ld + off..row * ld + off + hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let s_row = &src[oy * wo + lo..oy * wo + hi];
                    for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(s_row) {
                        *d += *s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Samples unfolded together so each gemm sees at least this many columns.
const MIN_GEMM_COLS: usize = 1024;

fn chunk_len(g: &ConvGeom) -> usize {
    MIN_GEMM_COLS.div_ceil(g.h_out() * g.w_out()).clamp(1, g.n.max(1))
}

pub(crate) fn conv2d_forward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = g.h_out() * g.w_out();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    let nb = chunk_len(g);
    let mut col = vec![T::zero(); rows * nb * hw];
    let mut res = vec![T::zero(); cout_g * nb * hw];
    for n0 in (0..g.n).step_by(nb) {
        let cnt = nb.min(g.n - n0);
        let ld = cnt * hw;
        for gi in 0..g.groups {
            for s in 0..cnt {
                let sample = &x[(n0 + s) * in_len..(n0 + s + 1) * in_len];
                if g.is_pointwise() {
                    for r in 0..rows {
                        let c = gi * cin_g + r;
                        col[r * ld + s * hw..r * ld + (s + 1) * hw].copy_from_slice(&sample[c * hw..(c + 1) * hw]);
                    }
                } else {
                    im2col(g, sample, gi * cin_g, &mut col, ld, s * hw);
                }
            }
            let w_g = &weight[gi * cout_g * rows..(gi + 1) * cout_g * rows];
            gemm(
                MatRef::new(w_g, cout_g, rows),
                MatRef::new(&col[..rows * ld], rows, ld),
                T::zero(),
                &mut res[..cout_g * ld],
            );
            for s in 0..cnt {
                for co in 0..cout_g {
                    let c = gi * cout_g + co;
                    let dst = &mut out[((n0 + s) * g.c_out + c) * hw..((n0 + s) * g.c_out + c + 1) * hw];
                    let src = &res[co * ld + s * hw..co * ld + (s + 1) * hw];
                    match bias {
                        Some(b) => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + b[c]),
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let hw = g.h_out() * g.w_out();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let in_len = g.c_in * g.h * g.w;
    // For stride-1 convolutions the input gradient is itself a convolution of the output
    // gradient with spatially flipped, transposed weights; that avoids a large col2im.
    let use_transposed = need_input_grad && g.stride == 1 && g.groups == 1 && !g.is_pointwise() && g.pad < g.k;
    let mut grad_x = (need_input_grad && !use_transposed).then(|| vec![T::zero(); g.n * in_len]);
    let nb = chunk_len(g);
    let mut col = vec![T::zero(); rows * nb * hw];
    let mut dy = vec![T::zero(); cout_g * nb * hw];
    let mut dcol = vec![T::zero(); if grad_x.is_some() { rows * nb * hw } else { 0 }];

    if let Some(gb) = grad_b {
        for n in 0..g.n {
            let dy_n = &grad_out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
            for (co, plane) in dy_n.chunks(hw).enumerate() {
                gb[co] += plane.iter().copied().sum::<T>();
            }
        }
    }

    for n0 in (0..g.n).step_by(nb) {
        let cnt = nb.min(g.n - n0);
        let ld = cnt * hw;
        for gi in 0..g.groups {
            for s in 0..cnt {
                let sample = &x[(n0 + s) * in_len..(n0 + s + 1) * in_len];
                if g.is_pointwise() {
                    for r in 0..rows {
                        let c = gi * cin_g + r;
                        col[r * ld + s * hw..r * ld + (s + 1) * hw].copy_from_slice(&sample[c * hw..(c + 1) * hw]);
                    }
                } else {
                    im2col(g, sample, gi * cin_g, &mut col, ld, s * hw);
                }
                for co in 0..cout_g {
                    let c = gi * cout_g + co;
                    let src = &grad_out[((n0 + s) * g.c_out + c) * hw..((n0 + s) * g.c_out + c + 1) * hw];
                    dy[co * ld + s * hw..co * ld + (s + 1) * hw].copy_from_slice(src);
                }
            }
            let dy_b = MatRef::new(&dy[..cout_g * ld], cout_g, ld);
            let gw = &mut grad_w[gi * cout_g * rows..(gi + 1) * cout_g * rows];
            gemm(dy_b, MatRef::new(&col[..rows * ld], rows, ld).t(), T::one(), gw);
            if let (Some(gx), false) = (grad_x.as_mut(), use_transposed) {
                let w_g = &weight[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                gemm(MatRef::new(w_g, cout_g, rows).t(), dy_b, T::zero(), &mut dcol[..rows * ld]);
                for s in 0..cnt {
                    let gx_n = &mut gx[(n0 + s) * in_len..(n0 + s + 1) * in_len];
                    if g.is_pointwise() {
                        for r in 0..rows {
                            let c = gi * cin_g + r;
                            gx_n[c * hw..(c + 1) * hw]
                                .iter_mut()
                                .zip(&dcol[r * ld + s * hw..r * ld + (s + 1) * hw])
                                .for_each(|(d, &v)| *d += v);
                        }
                    } else {
                        col2im(g, &dcol, ld, s * hw, gi * cin_g, gx_n);
                    }
                }
            }
        }
    }
    if use_transposed {
        let k2 = g.k * g.k;
        let mut w_t = vec![T::zero(); weight.len()];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for t in 0..k2 {
                    w_t[(ci * g.c_out + co) * k2 + (k2 - 1 - t)] = weight[(co * g.c_in + ci) * k2 + t];
                }
            }
        }
        let tg = ConvGeom {
            n: g.n,
            c_in: g.c_out,
            h: g.h_out(),
            w: g.w_out(),
            c_out: g.c_in,
            k: g.k,
            stride: 1,
            pad: g.k - 1 - g.pad,
            groups: 1,
        };
        debug_assert_eq!((tg.h_out(), tg.w_out()), (g.h, g.w));
        grad_x = Some(conv2d_forward(&tg, grad_out, &w_t, None));
    }
    grad_x
}

/// Population mean and standard deviation (with `eps` added to the variance) of a slice.
pub(crate) fn moments<T: Float>(values: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(values.len()).expect("length fits");
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt())
}
