//! Slice-level forward and backward kernels behind the graph operations.
//!
//! Shapes are validated by the graph before a kernel is called; kernels only
//! index.

use super::{cst, Real};

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let tail: T = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (xa, xb) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds every receptive field into a row: `[positions, C*k*k]`.
fn im2col<T: Real>(x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let (k, s) = (geo.kernel, geo.stride);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let mut cols = Vec::with_capacity(geo.positions() * geo.patch_len());
    for oy in 0..ho {
        for ox in 0..wo {
            for c in 0..geo.in_channels {
                let plane = &x[c * geo.height * geo.width..];
                for i in 0..k {
                    let row = (oy * s + i) * geo.width + ox * s;
                    cols.extend_from_slice(&plane[row..row + k]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], geo: &ConvGeometry, gx: &mut [T]) {
    let (k, s) = (geo.kernel, geo.stride);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let mut it = cols.chunks_exact(k);
    for oy in 0..ho {
        for ox in 0..wo {
            for c in 0..geo.in_channels {
                let base = c * geo.height * geo.width;
                for i in 0..k {
                    let row = base + (oy * s + i) * geo.width + ox * s;
                    add_into(&mut gx[row..row + k], it.next().unwrap());
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], kernels: &[T], bias: &[T], geo: &ConvGeometry) -> Vec<T> {
    let cols = im2col(x, geo);
    let (p, l) = (geo.positions(), geo.patch_len());
    let mut out = Vec::with_capacity(geo.out_channels * p);
    for (kern, &b) in kernels.chunks_exact(l).zip(bias) {
        out.extend(cols.chunks_exact(l).map(|patch| b + dot(kern, patch)));
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernels: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    kernels: &[T],
    g: &[T],
    geo: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (p, l) = (geo.positions(), geo.patch_len());
    let cols = im2col(x, geo);
    let gk = need[1].then(|| {
        let mut gk = vec![T::zero(); kernels.len()];
        for (gk_o, g_o) in gk.chunks_exact_mut(l).zip(g.chunks_exact(p)) {
            for (&go, patch) in g_o.iter().zip(cols.chunks_exact(l)) {
                axpy(go, patch, gk_o);
            }
        }
        gk
    });
    let gb = need[2].then(|| g.chunks_exact(p).map(|g_o| g_o.iter().copied().sum()).collect());
    let gx = need[0].then(|| {
        let mut gcols = vec![T::zero(); cols.len()];
        for (kern, g_o) in kernels.chunks_exact(l).zip(g.chunks_exact(p)) {
            for (&go, gpatch) in g_o.iter().zip(gcols.chunks_exact_mut(l)) {
                axpy(go, kern, gpatch);
            }
        }
        let mut gx = vec![T::zero(); x.len()];
        col2im_add(&gcols, geo, &mut gx);
        gx
    });
    ConvGrads { input: gx, kernels: gk, bias: gb }
}

/// `weight[m,n] · x[n] + bias[m]`
pub fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    weight.chunks_exact(x.len()).zip(bias).map(|(row, &b)| b + dot(row, x)).collect()
}

pub fn dense_backward<T: Real>(
    x: &[T],
    weight: &[T],
    g: &[T],
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let n = x.len();
    let gx = need[0].then(|| {
        let mut gx = vec![T::zero(); n];
        for (row, &gi) in weight.chunks_exact(n).zip(g) {
            axpy(gi, row, &mut gx);
        }
        gx
    });
    let gw = need[1].then(|| {
        let mut gw = vec![T::zero(); weight.len()];
        for (row, &gi) in gw.chunks_exact_mut(n).zip(g) {
            axpy(gi, x, row);
        }
        gw
    });
    let gb = need[2].then(|| g.to_vec());
    [gx, gw, gb]
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax over the middle extent of an `[outer, n, inner]` view.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Real>(y: &[T], g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let inner_prod: T = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - inner_prod);
            }
        }
    }
    gx
}

/// Squash scale `q / ((1 + q) * sqrt(q + eps))` for squared norm `q`, and its
/// derivative with respect to `q`.
fn squash_scale<T: Real>(q: T, eps: T) -> (T, T) {
    let one = T::one();
    let r = (q + eps).sqrt();
    let scale = q / ((one + q) * r);
    let num = (one + q) * r - q * (r + (one + q) / (cst::<T>(2.0) * r));
    let deriv = num / ((one + q) * (one + q) * (q + eps));
    (scale, deriv)
}

pub fn squash_forward<T: Real>(x: &[T], dim: usize, eps: T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(dim) {
        let (scale, _) = squash_scale(dot(row, row), eps);
        out.extend(row.iter().map(|&v| v * scale));
    }
    out
}

pub fn squash_backward<T: Real>(x: &[T], g: &[T], dim: usize, eps: T) -> Vec<T> {
    let mut gx = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks_exact(dim).zip(g.chunks_exact(dim)) {
        let (scale, deriv) = squash_scale(dot(row, row), eps);
        let coupling = cst::<T>(2.0) * deriv * dot(row, grow);
        gx.extend(row.iter().zip(grow).map(|(&s, &gv)| scale * gv + coupling * s));
    }
    gx
}

pub fn row_norm_forward<T: Real>(x: &[T], dim: usize) -> Vec<T> {
    x.chunks_exact(dim).map(|row| dot(row, row).sqrt()).collect()
}

pub fn row_norm_backward<T: Real>(x: &[T], norms: &[T], g: &[T], dim: usize) -> Vec<T> {
    let mut gx = Vec::with_capacity(x.len());
    for ((row, &n), &gi) in x.chunks_exact(dim).zip(norms).zip(g) {
        if n > T::zero() {
            gx.extend(row.iter().map(|&v| gi * v / n));
        } else {
            gx.extend(std::iter::repeat(T::zero()).take(dim));
        }
    }
    gx
}

/// `out[i,j,:] = w[i,j,:,:] · u[i,:]` for `u: [n, in_dim]`,
/// `w: [n, outputs, out_dim, in_dim]`.
pub fn caps_predict_forward<T: Real>(u: &[T], w: &[T], in_dim: usize, rows_per_capsule: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w.len() / in_dim);
    let block = rows_per_capsule * in_dim;
    for (ui, wi) in u.chunks_exact(in_dim).zip(w.chunks_exact(block)) {
        out.extend(wi.chunks_exact(in_dim).map(|row| dot(row, ui)));
    }
    out
}

pub fn caps_predict_backward<T: Real>(
    u: &[T],
    w: &[T],
    g: &[T],
    in_dim: usize,
    rows_per_capsule: usize,
    need: [bool; 2],
) -> [Option<Vec<T>>; 2] {
    let block = rows_per_capsule * in_dim;
    let gu = need[0].then(|| {
        let mut gu = vec![T::zero(); u.len()];
        for ((gui, wi), gi) in gu
            .chunks_exact_mut(in_dim)
            .zip(w.chunks_exact(block))
            .zip(g.chunks_exact(rows_per_capsule))
        {
            for (row, &gv) in wi.chunks_exact(in_dim).zip(gi) {
                axpy(gv, row, gui);
            }
        }
        gu
    });
    let gw = need[1].then(|| {
        let mut gw = vec![T::zero(); w.len()];
        for ((gwi, ui), gi) in gw
            .chunks_exact_mut(block)
            .zip(u.chunks_exact(in_dim))
            .zip(g.chunks_exact(rows_per_capsule))
        {
            for (row, &gv) in gwi.chunks_exact_mut(in_dim).zip(gi) {
                axpy(gv, ui, row);
            }
        }
        gw
    });
    [gu, gw]
}

/// `s[j,:] = Σ_i c[i,j] · uhat[i,j,:]`
pub fn weighted_sum_forward<T: Real>(c: &[T], uhat: &[T], outputs: usize, dim: usize) -> Vec<T> {
    let mut s = vec![T::zero(); outputs * dim];
    for (ci, ui) in c.chunks_exact(outputs).zip(uhat.chunks_exact(outputs * dim)) {
        for (j, (&cij, uij)) in ci.iter().zip(ui.chunks_exact(dim)).enumerate() {
            axpy(cij, uij, &mut s[j * dim..(j + 1) * dim]);
        }
    }
    s
}

pub fn weighted_sum_backward<T: Real>(
    c: &[T],
    uhat: &[T],
    g: &[T],
    outputs: usize,
    dim: usize,
    need: [bool; 2],
) -> [Option<Vec<T>>; 2] {
    let gc = need[0].then(|| {
        uhat.chunks_exact(dim)
            .enumerate()
            .map(|(k, uij)| dot(uij, &g[(k % outputs) * dim..(k % outputs + 1) * dim]))
            .collect()
    });
    let gu = need[1].then(|| {
        let mut gu = Vec::with_capacity(uhat.len());
        for (k, &cij) in c.iter().enumerate() {
            let j = k % outputs;
            gu.extend(g[j * dim..(j + 1) * dim].iter().map(|&gv| cij * gv));
        }
        gu
    });
    [gc, gu]
}

/// `a[i,j] = uhat[i,j,:] · v[j,:]`
pub fn agreement_forward<T: Real>(uhat: &[T], v: &[T], outputs: usize, dim: usize) -> Vec<T> {
    uhat.chunks_exact(dim)
        .enumerate()
        .map(|(k, uij)| {
            let j = k % outputs;
            dot(uij, &v[j * dim..(j + 1) * dim])
        })
        .collect()
}

pub fn agreement_backward<T: Real>(
    uhat: &[T],
    v: &[T],
    g: &[T],
    outputs: usize,
    dim: usize,
    need: [bool; 2],
) -> [Option<Vec<T>>; 2] {
    let gu = need[0].then(|| {
        let mut gu = Vec::with_capacity(uhat.len());
        for (k, &gk) in g.iter().enumerate() {
            let j = k % outputs;
            gu.extend(v[j * dim..(j + 1) * dim].iter().map(|&vv| gk * vv));
        }
        gu
    });
    let gv = need[1].then(|| {
        let mut gv = vec![T::zero(); v.len()];
        for (k, (uij, &gk)) in uhat.chunks_exact(dim).zip(g).enumerate() {
            let j = k % outputs;
            axpy(gk, uij, &mut gv[j * dim..(j + 1) * dim]);
        }
        gv
    });
    [gu, gv]
}

/// `[groups, rows, cols] -> [groups, cols, rows]`
pub fn transpose_groups<T: Real>(x: &[T], groups: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for gidx in 0..groups {
        let base = gidx * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}
