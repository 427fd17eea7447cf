use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Gathers rows by index into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Scatter-adds `src` rows into `self` at `idx` (inverse of `select_rows` for gradients).
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Tensor2) {
        debug_assert_eq!(src.rows, idx.len());
        debug_assert_eq!(src.cols, self.cols);
        for (o, &i) in idx.iter().enumerate() {
            let s = src.row(o);
            for (d, v) in self.row_mut(i).iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Tensor2 {
        Tensor2::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    /// Column-wise concatenation.
    pub fn hcat(parts: &[&Tensor2]) -> Result<Tensor2> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hcat row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Splits columns into blocks of the given widths (inverse of `hcat`).
    pub fn hsplit(&self, widths: &[usize]) -> Vec<Tensor2> {
        let mut off = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            let mut t = Tensor2::zeros(self.rows, w);
            for r in 0..self.rows {
                t.row_mut(r).copy_from_slice(&self.row(r)[off..off + w]);
            }
            out.push(t);
            off += w;
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor2) -> Tensor2 {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Tensor2 {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// Adds a row vector (1×cols) to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Column sums as a 1×cols tensor.
    pub fn sum_rows(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn column_mean(&self) -> Vec<f64> {
        let mut s = self.sum_rows().data;
        let n = self.rows.max(1) as f64;
        s.iter_mut().for_each(|v| *v /= n);
        s
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Which operand of a product is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

/// `out = beta * out + alpha * op(a) * op(b)` via `matrixmultiply::dgemm`.
pub fn gemm_into(
    alpha: f64,
    a: &Tensor2,
    ta: Trans,
    b: &Tensor2,
    tb: Trans,
    beta: f64,
    out: &mut Tensor2,
) {
    let (m, k) = match ta {
        Trans::N => (a.rows, a.cols),
        Trans::T => (a.cols, a.rows),
    };
    let (k2, n) = match tb {
        Trans::N => (b.rows, b.cols),
        Trans::T => (b.cols, b.rows),
    };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale(beta);
        return;
    }
    if m.min(n) <= SKINNY
        && m.max(n) * k >= SKINNY_MIN_WORK
        && skinny(alpha, a, ta, b, tb, beta, out)
    {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (a.cols as isize, 1),
        Trans::T => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (b.cols as isize, 1),
        Trans::T => (1, b.cols as isize),
    };
    // SAFETY: strides and extents were checked against the backing buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

pub fn gemm(a: &Tensor2, ta: Trans, b: &Tensor2, tb: Trans) -> Tensor2 {
    let m = if ta == Trans::N { a.rows } else { a.cols };
    let n = if tb == Trans::N { b.cols } else { b.rows };
    let mut out = Tensor2::zeros(m, n);
    gemm_into(1.0, a, ta, b, tb, 0.0, &mut out);
    out
}

/// Outputs with at most this many rows or columns take the streaming path.
const SKINNY: usize = 16;
const SKINNY_MIN_WORK: usize = 1 << 16;

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc
        .remainder()
        .iter()
        .zip(yc.remainder())
        .map(|(a, b)| a * b)
        .sum();
    for (a, b) in xc.zip(yc) {
        for i in 0..4 {
            acc[i] += a[i] * b[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Products with one tiny output dimension and row-contiguous operands,
/// streamed once over the large operand. Returns `false` for layouts it does
/// not cover.
fn skinny(
    alpha: f64,
    a: &Tensor2,
    ta: Trans,
    b: &Tensor2,
    tb: Trans,
    beta: f64,
    out: &mut Tensor2,
) -> bool {
    let (m, n) = (out.rows, out.cols);
    match (ta, tb) {
        // rows of a against rows of b
        (Trans::N, Trans::T) => {
            for r in 0..m {
                let ar = a.row(r);
                for c in 0..n {
                    let v = alpha * dot(ar, b.row(c));
                    let o = &mut out.data[r * n + c];
                    *o = if beta == 0.0 { v } else { beta * *o + v };
                }
            }
            true
        }
        // small m: out[r, :] = Σ_i a[r, i] · b[i, :]
        (Trans::N, Trans::N) if m <= SKINNY => {
            scale_or_zero(out, beta);
            for i in 0..b.rows {
                let br = b.row(i);
                for r in 0..m {
                    let w = alpha * a.data[r * a.cols + i];
                    if w != 0.0 {
                        axpy(w, br, &mut out.data[r * n..(r + 1) * n]);
                    }
                }
            }
            true
        }
        // small m: out[r, :] = Σ_i a[i, r] · b[i, :]
        (Trans::T, Trans::N) if m <= SKINNY => {
            scale_or_zero(out, beta);
            for i in 0..b.rows {
                let (ar, br) = (a.row(i), b.row(i));
                for r in 0..m {
                    let w = alpha * ar[r];
                    if w != 0.0 {
                        axpy(w, br, &mut out.data[r * n..(r + 1) * n]);
                    }
                }
            }
            true
        }
        _ => false,
    }
}

fn scale_or_zero(out: &mut Tensor2, beta: f64) {
    if beta == 0.0 {
        out.data.fill(0.0);
    } else if beta != 1.0 {
        out.data.iter_mut().for_each(|v| *v *= beta);
    }
}

/// `a · b`
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm(a, Trans::N, b, Trans::N))
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(gemm(a, Trans::N, b, Trans::T))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        Tensor2::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn skinny_products_match_naive() {
        let big = Tensor2::from_fn(3000, 37, |r, c| ((r * 31 + c * 7) % 17) as f64 * 0.1 - 0.8);
        let small = Tensor2::from_fn(5, 37, |r, c| ((r * 3 + c) % 11) as f64 * 0.2 - 1.0);
        let weights = Tensor2::from_fn(3000, 5, |r, c| ((r + 2 * c) % 7) as f64 * 0.1 - 0.3);
        let close = |x: &Tensor2, y: &Tensor2| {
            assert_eq!(x.shape(), y.shape());
            let err = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        };
        close(
            &gemm(&big, Trans::N, &small, Trans::T),
            &naive(&big, &small.transpose()),
        );
        close(
            &gemm(&small, Trans::N, &big, Trans::T),
            &naive(&small, &big.transpose()),
        );
        close(
            &gemm(&weights, Trans::T, &big, Trans::N),
            &naive(&weights.transpose(), &big),
        );
        let p = weights.transpose();
        close(&gemm(&p, Trans::N, &big, Trans::N), &naive(&p, &big));

        let mut acc = Tensor2::filled(5, 37, 1.0);
        gemm_into(0.5, &weights, Trans::T, &big, Trans::N, 2.0, &mut acc);
        let mut want = naive(&weights.transpose(), &big);
        want.data_mut().iter_mut().for_each(|v| *v = 0.5 * *v + 2.0);
        close(&acc, &want);
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = Tensor2::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 0.3);
        let b = Tensor2::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.2);
        let want = naive(&a, &b);
        let got = matmul(&a, &b).unwrap();
        assert!(got
            .data()
            .iter()
            .zip(want.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let got_nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(got_nt
            .data()
            .iter()
            .zip(want.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let got_tn = gemm(&a.transpose(), Trans::T, &b, Trans::N);
        assert!(got_tn
            .data()
            .iter()
            .zip(want.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn shape_errors() {
        let a = Tensor2::zeros(2, 3);
        assert!(matmul(&a, &a).is_err());
        assert!(Tensor2::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn hcat_hsplit_inverse() {
        let a = Tensor2::from_fn(2, 2, |r, c| (r + c) as f64);
        let b = Tensor2::from_fn(2, 3, |r, c| (r * c) as f64);
        let cat = Tensor2::hcat(&[&a, &b]).unwrap();
        let parts = cat.hsplit(&[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
