//! Raw NCHW kernels shared by the graph operations.

use crate::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output columns `ox` whose input column `ox*stride + j - pad` is inside
/// `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeom, j: usize, wo: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(j).div_ceil(g.stride);
    let last = if g.w + g.pad > j { ((g.w + g.pad - j - 1) / g.stride + 1).min(wo) } else { 0 };
    (first.min(last), last)
}

/// Unfold one `C x H x W` image into the `(C*kh*kw) x (Ho*Wo)` block of a
/// column matrix whose rows are `ld` long, starting at column `off`.
fn im2col_into<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ld + off..row * ld + off + hw_out];
                let (lo, hi) = valid_cols(g, j, wo);
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy * g.stride + i;
                    if iy < g.pad || iy - g.pad >= g.h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let base = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (t, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[base + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Unfold one `C x H x W` image into a `(C*kh*kw) x (Ho*Wo)` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    debug_assert_eq!(cols.len(), g.patch_len() * ho * wo);
    im2col_into(x, g, cols, ho * wo, 0);
}

fn col2im_from<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = g.out_hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ld + off..row * ld + off + ho * wo];
                let (lo, hi) = valid_cols(g, j, wo);
                for oy in 0..ho {
                    let iy = oy * g.stride + i;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let base = lo * g.stride + j - g.pad;
                    for (t, &v) in src[oy * wo + lo..oy * wo + hi].iter().enumerate() {
                        let d = &mut dst[base + t * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    col2im_from(cols, g, dx, ho * wo, 0);
}

/// A pooled buffer of at least `len` elements. Contents are unspecified;
/// callers overwrite the prefix they use.
fn take_buf<T: Scalar>(len: usize) -> Vec<T> {
    let mut v = T::scratch().with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if v.len() < len {
        v.resize(len, T::zero());
    }
    v
}

fn give_buf<T: Scalar>(v: Vec<T>) {
    T::scratch().with(|p| p.borrow_mut().push(v));
}

/// Column-matrix budget in elements; batches are unfolded in chunks that fit.
const COLS_BUDGET: usize = 1 << 22;

fn chunk_len(n: usize, k: usize, hw_out: usize) -> usize {
    (COLS_BUDGET / (k * hw_out).max(1)).clamp(1, n.max(1))
}

/// Batched convolution. `w` is `c_out x (c_in*kh*kw)`. Samples are unfolded
/// side by side so each chunk is a single GEMM.
pub fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    c_out: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = c_out * hw_out;
    let step = chunk_len(n, k, hw_out);
    let mut cols = take_buf::<T>(k * hw_out * step);
    let mut prod = take_buf::<T>(c_out * hw_out * step);
    for b0 in (0..n).step_by(step) {
        let nb = step.min(n - b0);
        let ld = nb * hw_out;
        for t in 0..nb {
            let b = b0 + t;
            im2col_into(&x[b * in_len..(b + 1) * in_len], g, &mut cols[..k * ld], ld, t * hw_out);
        }
        gemm(c_out, k, ld, T::one(), w, false, &cols[..k * ld], false, T::zero(), &mut prod[..c_out * ld]);
        for t in 0..nb {
            let ob = &mut out[(b0 + t) * out_len..(b0 + t + 1) * out_len];
            for co in 0..c_out {
                let src = &prod[co * ld + t * hw_out..co * ld + (t + 1) * hw_out];
                let dst = &mut ob[co * hw_out..(co + 1) * hw_out];
                match bias {
                    Some(bias) => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bias[co]),
                    None => dst.copy_from_slice(src),
                }
            }
        }
    }
    give_buf(cols);
    give_buf(prod);
}

/// Gradients of [`conv_forward`]. Any of `dx`, `dw`, `db` may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    c_out: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let k = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = c_out * hw_out;
    if let Some(db) = db {
        for dob in dout.chunks(out_len).take(n) {
            for (co, row) in dob.chunks(hw_out).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
    }
    if dw.is_none() && dx.is_none() {
        return;
    }
    let step = chunk_len(n, k, hw_out);
    let mut cols = take_buf::<T>(k * hw_out * step);
    let mut dmat = take_buf::<T>(c_out * hw_out * step);
    for b0 in (0..n).step_by(step) {
        let nb = step.min(n - b0);
        let ld = nb * hw_out;
        // dout chunk as c_out x (nb*hw)
        for t in 0..nb {
            let dob = &dout[(b0 + t) * out_len..(b0 + t + 1) * out_len];
            for co in 0..c_out {
                dmat[co * ld + t * hw_out..co * ld + (t + 1) * hw_out].copy_from_slice(&dob[co * hw_out..(co + 1) * hw_out]);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for t in 0..nb {
                let b = b0 + t;
                im2col_into(&x[b * in_len..(b + 1) * in_len], g, &mut cols[..k * ld], ld, t * hw_out);
            }
            // dw (c_out x k) += dout (c_out x nb*hw) * cols^T
            gemm(c_out, ld, k, T::one(), &dmat[..c_out * ld], false, &cols[..k * ld], true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k, c_out, ld, T::one(), w, true, &dmat[..c_out * ld], false, T::zero(), &mut cols[..k * ld]);
            for t in 0..nb {
                let b = b0 + t;
                col2im_from(&cols[..k * ld], g, &mut dx[b * in_len..(b + 1) * in_len], ld, t * hw_out);
            }
        }
    }
    give_buf(cols);
    give_buf(dmat);
}

/// Per-channel mean and biased variance over `N x H x W`.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s = s + x[off..off + hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for &xv in &x[off..off + hw] {
                let d = xv - m;
                v = v + d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
