// Raw loops behind the tape operators. Shapes are validated by the caller.

use super::Real;

/// `out[n,m] = sum_d x[n,d] * w[d,m] + b[m]`.
pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, d: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for row in x.chunks(d) {
        let start = out.len();
        out.extend_from_slice(b);
        let acc = &mut out[start..start + m];
        for (k, &xv) in row.iter().enumerate() {
            let wrow = &w[k * m..(k + 1) * m];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
    }
    debug_assert_eq!(out.len(), n * m);
    out
}

/// Gradients of `linear_forward` given the upstream gradient `g` (`n x m`).
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    n: usize,
    d: usize,
    m: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::ZERO; n * d];
    let mut gw = vec![T::ZERO; d * m];
    let mut gb = vec![T::ZERO; m];
    for r in 0..n {
        let grow = &g[r * m..(r + 1) * m];
        let xrow = &x[r * d..(r + 1) * d];
        for (acc, &gv) in gb.iter_mut().zip(grow) {
            *acc += gv;
        }
        for k in 0..d {
            let wrow = &w[k * m..(k + 1) * m];
            let mut s = T::ZERO;
            for (&wv, &gv) in wrow.iter().zip(grow) {
                s += wv * gv;
            }
            gx[r * d + k] = s;
            let xv = xrow[k];
            let gwrow = &mut gw[k * m..(k + 1) * m];
            for (acc, &gv) in gwrow.iter_mut().zip(grow) {
                *acc += xv * gv;
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // last valid ox satisfies ox*s + kx - pad <= w - 1
        let hi_num = self.w + self.pad;
        let hi = if hi_num <= kx { 0 } else { ((hi_num - kx - 1) / s + 1).min(self.wo) };
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unrolls sample `xin` (`c x h x w`) into `col[(c*kh*kw) x (ho*wo)]`; padded taps are zero.
fn im2col<T: Real>(xin: &[T], g: &ConvGeometry, col: &mut [T]) {
    let p = g.ho * g.wo;
    let in_plane = g.h * g.w;
    col.fill(T::ZERO);
    for c in 0..g.c {
        let plane = &xin[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let dst = &mut row[oy * g.wo + lo..oy * g.wo + hi];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let base = lo + kx - g.pad;
                        dst.copy_from_slice(&src[base..base + (hi - lo)]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[(lo + j) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `gx` (accumulating).
fn col2im<T: Real>(col: &[T], g: &ConvGeometry, gx: &mut [T]) {
    let p = g.ho * g.wo;
    let in_plane = g.h * g.w;
    for c in 0..g.c {
        let plane = &mut gx[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let base = lo + kx - g.pad;
                        for (d, &v) in dst[base..base + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[(lo + j) * g.stride + kx - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major, blocked 4 rows by 8 columns.
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let cols = NR.min(n - j);
            let mut acc = [[T::ZERO; NR]; MR];
            if rows == MR && cols == NR {
                for t in 0..k {
                    let brow = &b[t * n + j..t * n + j + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + t];
                        for q in 0..NR {
                            acc[r][q] += av * brow[q];
                        }
                    }
                }
            } else {
                for t in 0..k {
                    let brow = &b[t * n + j..t * n + j + cols];
                    for r in 0..rows {
                        let av = a[(i + r) * k + t];
                        for q in 0..cols {
                            acc[r][q] += av * brow[q];
                        }
                    }
                }
            }
            for r in 0..rows {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + cols];
                for q in 0..cols {
                    crow[q] += acc[r][q];
                }
            }
            j += NR;
        }
        i += MR;
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let in_sample = g.c * g.h * g.w;
    let p = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let mut out = vec![T::ZERO; g.n * g.f * p];
    let mut col = vec![T::ZERO; ck * p];
    for n in 0..g.n {
        im2col(&x[n * in_sample..(n + 1) * in_sample], g, &mut col);
        gemm_acc(k, &col, &mut out[n * g.f * p..(n + 1) * g.f * p], g.f, ck, p);
    }
    out
}

/// Returns `(grad_x, grad_k)`; the kernel gradient is accumulated sample by sample in order.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeometry,
    need_x: bool,
    need_k: bool,
) -> (Vec<T>, Vec<T>) {
    let in_sample = g.c * g.h * g.w;
    let p = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let mut gx = if need_x { vec![T::ZERO; x.len()] } else { Vec::new() };
    let mut gk = if need_k { vec![T::ZERO; k.len()] } else { Vec::new() };
    let mut col = vec![T::ZERO; ck * p];
    let mut gcol = vec![T::ZERO; if need_x { ck * p } else { 0 }];
    // k transposed to `ck x f` for the input gradient
    let mut kt = vec![T::ZERO; if need_x { k.len() } else { 0 }];
    if need_x {
        for f in 0..g.f {
            for j in 0..ck {
                kt[j * g.f + f] = k[f * ck + j];
            }
        }
    }
    for n in 0..g.n {
        let go = &gout[n * g.f * p..(n + 1) * g.f * p];
        if need_k {
            im2col(&x[n * in_sample..(n + 1) * in_sample], g, &mut col);
            for f in 0..g.f {
                let grow = &go[f * p..(f + 1) * p];
                for (j, acc) in gk[f * ck..(f + 1) * ck].iter_mut().enumerate() {
                    *acc += dot(grow, &col[j * p..(j + 1) * p]);
                }
            }
        }
        if need_x {
            gcol.fill(T::ZERO);
            gemm_acc(&kt, go, &mut gcol, ck, g.f, p);
            col2im(&gcol, g, &mut gx[n * in_sample..(n + 1) * in_sample]);
        }
    }
    (gx, gk)
}

/// Mean over non-overlapping `kh x kw` windows of each `h x w` plane.
pub(crate) fn avg_pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ho, wo) = (h / kh, w / kw);
    let scale = T::ONE / T::from_usize(kh * kw);
    let mut out = vec![T::ZERO; planes * ho * wo];
    for p in 0..planes {
        let xin = &x[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::ZERO;
                for dy in 0..kh {
                    let row = &xin[(oy * kh + dy) * w + ox * kw..(oy * kh + dy) * w + ox * kw + kw];
                    for &v in row {
                        s += v;
                    }
                }
                o[oy * wo + ox] = s * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let (ho, wo) = (h / kh, w / kw);
    let scale = T::ONE / T::from_usize(kh * kw);
    let mut gx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                gx[p * h * w + iy * w + ix] = g[p * ho * wo + (iy / kh) * wo + ix / kw] * scale;
            }
        }
    }
    gx
}

/// Per-channel mean and biased variance of an `N x C x plane` buffer.
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane);
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut s = T::ZERO;
        for s_idx in 0..n {
            for &v in &x[(s_idx * c + ch) * plane..(s_idx * c + ch + 1) * plane] {
                s += v;
            }
        }
        let mu = s / count;
        let mut q = T::ZERO;
        for s_idx in 0..n {
            for &v in &x[(s_idx * c + ch) * plane..(s_idx * c + ch + 1) * plane] {
                let d = v - mu;
                q += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Per-channel sums of `g` and `g * xhat`.
pub(crate) fn channel_grad_sums<T: Real>(
    g: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let mut sum_g = vec![T::ZERO; c];
    let mut sum_gx = vec![T::ZERO; c];
    for s_idx in 0..n {
        for ch in 0..c {
            let range = (s_idx * c + ch) * plane..(s_idx * c + ch + 1) * plane;
            for (&gv, &xv) in g[range.clone()].iter().zip(&xhat[range]) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xv;
            }
        }
    }
    (sum_g, sum_gx)
}
