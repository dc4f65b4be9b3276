//! Per-sample compute kernels behind the autograd primitives.
//!
//! Every inner product and reduction accumulates in `f64` regardless of the
//! storage type, and the loop order is fixed, so results are reproducible
//! bit for bit.

use crate::tensor::Scalar;

/// Geometry of a stride-1 zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Unrolls one `C×H×W` sample into a `(C·kh·kw) × (H'·W')` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    cols.clear();
    cols.resize(g.patch_len() * n, 0.0);
    if g.is_pointwise() {
        for (c, v) in cols.iter_mut().zip(x) {
            *c = v.as_f64();
        }
        return;
    }
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    // valid ox range: 0 <= ox + kx - pad < w
                    let lo = (pad - kx as isize).max(0) as usize;
                    let hi = ((g.w as isize + pad - kx as isize).min(ow as isize)).max(0) as usize;
                    for ox in lo..hi {
                        drow[ox] = src[(ox as isize + kx as isize - pad) as usize].as_f64();
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a `C×H×W` gradient buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    if g.is_pointwise() {
        for (d, c) in dx.iter_mut().zip(cols) {
            *d += c;
        }
        return;
    }
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let lo = (pad - kx as isize).max(0) as usize;
                    let hi = ((g.w as isize + pad - kx as isize).min(ow as isize)).max(0) as usize;
                    for ox in lo..hi {
                        drow[(ox as isize + kx as isize - pad) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 4;
/// Column block width; keeps the streamed operand panel cache resident.
const JB: usize = 256;

/// `acc[m×n] += a[m×k] · b[k×n]`.
///
/// Each output element accumulates its `k` products in ascending order, so
/// the blocking below does not affect the result.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], acc: &mut [f64]) {
    for j0 in (0..n).step_by(JB) {
        let j1 = (j0 + JB).min(n);
        for i0 in (0..m).step_by(MR) {
            match MR.min(m - i0) {
                4 => tile_nn::<4>(i0, j0, j1, k, n, a, b, acc),
                3 => tile_nn::<3>(i0, j0, j1, k, n, a, b, acc),
                2 => tile_nn::<2>(i0, j0, j1, k, n, a, b, acc),
                _ => tile_nn::<1>(i0, j0, j1, k, n, a, b, acc),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile_nn<const R: usize>(
    i0: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    acc: &mut [f64],
) {
    let mut j = j0;
    while j + NR <= j1 {
        let mut t = [[0.0f64; NR]; R];
        for r in 0..R {
            t[r].copy_from_slice(&acc[(i0 + r) * n + j..(i0 + r) * n + j + NR]);
        }
        for kk in 0..k {
            let bv: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
            for r in 0..R {
                let av = a[(i0 + r) * k + kk];
                for c in 0..NR {
                    t[r][c] += av * bv[c];
                }
            }
        }
        for r in 0..R {
            acc[(i0 + r) * n + j..(i0 + r) * n + j + NR].copy_from_slice(&t[r]);
        }
        j += NR;
    }
    for r in i0..i0 + R {
        for jj in j..j1 {
            let mut v = acc[r * n + jj];
            for kk in 0..k {
                v += a[r * k + kk] * b[kk * n + jj];
            }
            acc[r * n + jj] = v;
        }
    }
}

/// `acc[m×n] += a[m×k] · b[n×k]ᵀ` (row-by-row dot products).
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], acc: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            acc[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `acc[k×n] += a[m×k]ᵀ · b[m×n]`, accumulating over `m` in ascending order.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], acc: &mut [f64]) {
    for j0 in (0..n).step_by(JB) {
        let j1 = (j0 + JB).min(n);
        for q0 in (0..k).step_by(MR) {
            match MR.min(k - q0) {
                4 => tile_tn::<4>(q0, j0, j1, m, k, n, a, b, acc),
                3 => tile_tn::<3>(q0, j0, j1, m, k, n, a, b, acc),
                2 => tile_tn::<2>(q0, j0, j1, m, k, n, a, b, acc),
                _ => tile_tn::<1>(q0, j0, j1, m, k, n, a, b, acc),
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile_tn<const R: usize>(
    q0: usize,
    j0: usize,
    j1: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    acc: &mut [f64],
) {
    let mut j = j0;
    while j + NR <= j1 {
        let mut t = [[0.0f64; NR]; R];
        for r in 0..R {
            t[r].copy_from_slice(&acc[(q0 + r) * n + j..(q0 + r) * n + j + NR]);
        }
        for i in 0..m {
            let bv: &[f64; NR] = b[i * n + j..i * n + j + NR].try_into().unwrap();
            for r in 0..R {
                let av = a[i * k + q0 + r];
                for c in 0..NR {
                    t[r][c] += av * bv[c];
                }
            }
        }
        for r in 0..R {
            acc[(q0 + r) * n + j..(q0 + r) * n + j + NR].copy_from_slice(&t[r]);
        }
        j += NR;
    }
    for r in q0..q0 + R {
        for jj in j..j1 {
            let mut v = acc[r * n + jj];
            for i in 0..m {
                v += a[i * k + r] * b[i * n + jj];
            }
            acc[r * n + jj] = v;
        }
    }
}

/// Dot product with eight fixed lanes so the summation order never changes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
        + tail
}

pub(crate) fn to_f64<T: Scalar>(src: &[T]) -> Vec<f64> {
    src.iter().map(|v| v.as_f64()).collect()
}

/// Forward conv for one sample. `w` is `cout × (cin·kh·kw)` in f64.
pub(crate) fn conv2d_sample<T: Scalar>(
    x: &[T],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    cols: &mut Vec<f64>,
    out: &mut [T],
) {
    let n = g.out_h() * g.out_w();
    im2col(x, g, cols);
    let mut acc = vec![0.0f64; g.cout * n];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            acc[co * n..(co + 1) * n].fill(bv);
        }
    }
    gemm_nn(g.cout, g.patch_len(), n, w, cols, &mut acc);
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = T::from_f64(*a);
    }
}

/// Backward conv for one sample; accumulates into `dw`, `db` and `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_sample_backward<T: Scalar>(
    x: &[T],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    cols: &mut Vec<f64>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let n = g.out_h() * g.out_w();
    let k = g.patch_len();
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += dy[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        im2col(x, g, cols);
        gemm_nt(g.cout, n, k, dy, cols, dw);
    }
    if let Some(dx) = dx {
        cols.clear();
        cols.resize(k * n, 0.0);
        gemm_tn(g.cout, k, n, w, dy, cols);
        col2im(cols, g, dx);
    }
}

/// Geometry of an unpadded transposed convolution with square stride.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.stride + self.k
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.stride + self.k
    }
}

/// Transposed conv forward for one sample. `w` is `cin × (cout·k·k)`.
pub(crate) fn conv_t_sample<T: Scalar>(
    x: &[T],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvTGeom,
    out: &mut [T],
) {
    let n = g.h * g.w;
    let q = g.cout * g.k * g.k;
    let xf = to_f64(x);
    let mut cols = vec![0.0f64; q * n];
    gemm_tn(g.cin, q, n, w, &xf, &mut cols);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut acc = vec![0.0f64; g.cout * oh * ow];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            acc[co * oh * ow..(co + 1) * oh * ow].fill(bv);
        }
    }
    for co in 0..g.cout {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((co * g.k + ky) * g.k + kx) * n..][..n];
                for iy in 0..g.h {
                    let oy = iy * g.stride + ky;
                    let dst = &mut acc[(co * oh + oy) * ow..][..ow];
                    for ix in 0..g.w {
                        dst[ix * g.stride + kx] += row[iy * g.w + ix];
                    }
                }
            }
        }
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = T::from_f64(*a);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_sample_backward<T: Scalar>(
    x: &[T],
    w: &[f64],
    dy: &[f64],
    g: &ConvTGeom,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let n = g.h * g.w;
    let q = g.cout * g.k * g.k;
    let (oh, ow) = (g.out_h(), g.out_w());
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += dy[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    // gather dy into the column layout used by the forward scatter
    let mut cols = vec![0.0f64; q * n];
    for co in 0..g.cout {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((co * g.k + ky) * g.k + kx) * n..][..n];
                for iy in 0..g.h {
                    let src = &dy[(co * oh + iy * g.stride + ky) * ow..][..ow];
                    for ix in 0..g.w {
                        row[iy * g.w + ix] = src[ix * g.stride + kx];
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        let xf = to_f64(x);
        gemm_nt(g.cin, n, q, &xf, &cols, dw);
    }
    if let Some(dx) = dx {
        gemm_nn(g.cin, q, n, w, &cols, dx);
    }
}
