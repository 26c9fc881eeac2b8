//! Raw loops over `f64` slices shared by the tape and by the non-taped
//! helpers. Nothing here allocates graph state.

use crate::error::{Error, Result};

use super::{numel, strides};

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(Error::invalid(format!(
            "permutation {axes:?} does not cover rank {rank}"
        )));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis {
                op: "permute",
                axis: a,
                rank,
            });
        }
        if std::mem::replace(&mut seen[a], true) {
            return Err(Error::invalid(format!("axis {a} repeated in {axes:?}")));
        }
    }
    Ok(())
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // stride in the source for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src[last];
    while out.len() < n {
        let mut o = offset;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_stride;
        }
        // advance the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Pairwise summation: O(log n) error growth.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, (a, k as isize, 1), (b, n as isize, 1), c);
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, n, k, (a, n as isize, 1), (b, 1, n as isize), c);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(k, m, n, (a, 1, k as isize), (b, n as isize, 1), c);
}

/// `c[rows,cols] += A * B` for `A` of `rows x inner` and `B` of
/// `inner x cols`, each given as `(data, row stride, column stride)`.
fn gemm(rows: usize, inner: usize, cols: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64]) {
    if rows == 0 || cols == 0 || inner == 0 {
        return;
    }
    let span = |r: usize, rs: isize, cs: isize, cc: usize| (r - 1) * rs as usize + (cc - 1) * cs as usize + 1;
    assert!(a.0.len() >= span(rows, a.1, a.2, inner), "gemm lhs too short");
    assert!(b.0.len() >= span(inner, b.1, b.2, cols), "gemm rhs too short");
    assert!(c.len() >= rows * cols, "gemm output too short");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// Shape bookkeeping for `[.., m, k] x [.., k, n]`. A rank-2 right operand is
/// shared across every leading index of the left operand; otherwise the
/// leading extents must agree exactly.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::shape("matmul", a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &a[..a.len() - 2];
        let shared_rhs = b.len() == 2;
        if !shared_rhs && (b.len() != a.len() || &b[..b.len() - 2] != lead) {
            return Err(mismatch());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: numel(lead),
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![0.0; self.batch * m * n];
        if self.shared_rhs {
            gemm_nn(self.batch * m, k, n, a, b, &mut c);
        } else {
            for bi in 0..self.batch {
                gemm_nn(
                    m,
                    k,
                    n,
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        c
    }

    pub fn grad_lhs(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut da = vec![0.0; self.batch * m * k];
        if self.shared_rhs {
            gemm_nt(self.batch * m, n, k, g, b, &mut da);
        } else {
            for bi in 0..self.batch {
                gemm_nt(
                    m,
                    n,
                    k,
                    &g[bi * m * n..(bi + 1) * m * n],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut da[bi * m * k..(bi + 1) * m * k],
                );
            }
        }
        da
    }

    pub fn grad_rhs(&self, g: &[f64], a: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            let mut db = vec![0.0; k * n];
            gemm_tn(self.batch * m, k, n, a, g, &mut db);
            db
        } else {
            let mut db = vec![0.0; self.batch * k * n];
            for bi in 0..self.batch {
                gemm_tn(
                    m,
                    k,
                    n,
                    &a[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut db[bi * k * n..(bi + 1) * k * n],
                );
            }
            db
        }
    }
}

/// Output index of every input element under a reduction over `axes`.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis {
                op: "reduce",
                axis: a,
                rank,
            });
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
    let out_strides = strides(&out_shape);
    // stride contribution of each input axis in the output (0 when reduced)
    let mut contrib = vec![0usize; rank];
    let mut j = 0;
    for i in 0..rank {
        if !reduced[i] {
            contrib[i] = out_strides[j];
            j += 1;
        }
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for _ in 0..n {
        map.push(o);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            o += contrib[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= contrib[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, map))
}

/// Geometry of a 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(Error::shape("conv2d", x, w));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            h,
            w: wd,
            out_ch: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for column row `r` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let c = r / (self.kh * self.kw);
        let i = (r / self.kw) % self.kh;
        let j = r % self.kw;
        let y = (oy * self.stride + i) as isize - self.pad as isize;
        let x = (ox * self.stride + j) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }

    /// `[C*kh*kw, oh*ow]` patch matrix for one image.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for r in 0..self.patch_len() {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    cols[r * p + oy * self.ow + ox] =
                        self.source(r, oy, ox).map_or(0.0, |s| img[s]);
                }
            }
        }
    }

    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for r in 0..self.patch_len() {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    if let Some(s) = self.source(r, oy, ox) {
                        img[s] += cols[r * p + oy * self.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = if log { v - lse } else { (v - lse).exp() };
        }
    }
    out
}

/// Per-row standardization; returns `(y, 1/std)`.
pub(crate) fn standardize_rows(x: &[f64], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / width);
    for (row, yrow) in x.chunks(width).zip(y.chunks_mut(width)) {
        let mu = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (o, &v) in yrow.iter_mut().zip(row) {
            *o = (v - mu) * r;
        }
        inv.push(r);
    }
    (y, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (s, out) = permute(&shape, &data, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[(a * 2 + b) * 3 + c], data[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn reduce_map_middle_axis() {
        let (s, map) = reduce_map(&[2, 3, 2], &[1]).unwrap();
        assert_eq!(s, vec![2, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        assert!(reduce_map(&[2], &[1]).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
