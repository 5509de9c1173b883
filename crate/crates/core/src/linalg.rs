//! Dense row-major matrices and the Gram-determinant volume kernel.
//!
//! Everything here is a pure function of its inputs. The volume of the
//! parallelotope spanned by the columns of a tall matrix `T` is
//! `sqrt(det(TᵀT))`; we work with its logarithm, which is what the volume
//! regularizer minimizes, and with the closed-form gradient `T (TᵀT)⁻¹`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest Gram determinant (and row sum) treated as nonzero.
pub const DEGENERATE_FLOOR: f64 = 1e-300;

/// Pivots below this fraction of `‖T‖_F` mark a rank-deficient Gram matrix.
const RANK_TOLERANCE: f64 = 1e-13;

/// Central-difference step used for gradient certification.
pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

// Deserialization goes through `from_vec` so shape and finiteness are checked.
#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size.
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let rhs_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        Matrix::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    /// Column sums as a `1 × cols` matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in self.row_iter() {
            for (o, v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    /// Appends the columns of `other` to the right of `self`.
    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hstack row mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    /// Copies the leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the first maximal element.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Upper-triangular `R` from a Householder QR of a tall matrix. Working on
/// `T` directly rather than on `TᵀT` keeps the error proportional to the
/// condition number instead of its square.
struct TriangularFactor {
    n: usize,
    upper: Vec<f64>,
}

impl TriangularFactor {
    fn factor(t: &Matrix) -> Result<Self> {
        let (rows, n) = (t.rows(), t.cols());
        let mut a: Vec<f64> = t.as_slice().to_vec();
        let at = |a: &[f64], i: usize, j: usize| a[i * n + j];
        let mut v = vec![0.0; rows];
        for k in 0..n {
            let norm = (k..rows).map(|i| at(&a, i, k).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::SingularGram);
            }
            if norm == 0.0 {
                continue;
            }
            let alpha = if at(&a, k, k) > 0.0 { -norm } else { norm };
            for i in k..rows {
                v[i] = at(&a, i, k);
            }
            v[k] -= alpha;
            let vv: f64 = (k..rows).map(|i| v[i] * v[i]).sum();
            if vv > 0.0 {
                for j in k..n {
                    let dot: f64 = (k..rows).map(|i| v[i] * at(&a, i, j)).sum();
                    let f = 2.0 * dot / vv;
                    for i in k..rows {
                        a[i * n + j] -= f * v[i];
                    }
                }
            }
        }
        let mut upper = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                upper[i * n + j] = a[i * n + j];
            }
        }
        let factor = Self { n, upper };
        // Pivots at round-off level mean the columns are linearly dependent.
        let scale = t.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        let floor = RANK_TOLERANCE * scale;
        if (0..n).any(|i| !(factor.upper[i * n + i].abs() > floor)) {
            return Err(Error::SingularGram);
        }
        Ok(factor)
    }

    /// `ln det(TᵀT) = 2 Σ ln |R_ii|`
    fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.upper[i * self.n + i].abs().ln()).sum::<f64>() * 2.0
    }

    /// `(TᵀT)⁻¹ = R⁻¹ R⁻ᵀ`
    fn gram_inverse(&self) -> Matrix {
        let n = self.n;
        let r = &self.upper;
        let mut rinv = Matrix::zeros(n, n);
        for c in 0..n {
            // R x = e_c
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for k in i + 1..=c {
                    s -= r[i * n + k] * rinv[(k, c)];
                }
                rinv[(i, c)] = s / r[i * n + i];
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (i.max(j)..n).map(|k| rinv[(i, k)] * rinv[(j, k)]).sum();
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }
}

fn factor_gram(t: &Matrix) -> Result<TriangularFactor> {
    if t.rows() < t.cols() || t.cols() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "Gram volume needs a tall matrix, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    let factor = TriangularFactor::factor(t)?;
    let log_det = factor.log_det();
    if !log_det.is_finite() || log_det <= DEGENERATE_FLOOR.ln() {
        return Err(Error::SingularGram);
    }
    Ok(factor)
}

/// `ln sqrt(det(TᵀT))` for an `R × C` matrix with `R ≥ C`.
pub fn gram_logvol(t: &Matrix) -> Result<f64> {
    Ok(0.5 * factor_gram(t)?.log_det())
}

/// Gradient of [`gram_logvol`] with respect to every entry of `T`: `T (TᵀT)⁻¹`.
pub fn grad_gram_logvol(t: &Matrix) -> Result<Matrix> {
    let factor = factor_gram(t)?;
    Ok(t.matmul(&factor.gram_inverse()))
}

/// Scales each row to sum to one.
pub fn row_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let sum: f64 = row.iter().sum();
        if !(sum > DEGENERATE_FLOOR) {
            return Err(Error::ZeroRow { row: r, sum });
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function of a matrix.
pub fn fd_gradient<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("step {eps} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.data.len() {
        let orig = x.data[idx];
        probe.data[idx] = orig + eps;
        let plus = f(&probe);
        probe.data[idx] = orig - eps;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "probe at entry ({}, {})",
                idx / x.cols,
                idx % x.cols
            )));
        }
        grad.data[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, 1e−8)`
#[inline]
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest entrywise [`rel_error`] between two equally shaped matrices.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn logvol_examples() {
        assert_eq!(gram_logvol(&Matrix::identity(3)).unwrap(), 0.0);

        let square = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let expected = (0.9f64 * 0.8 - 0.1 * 0.2).ln();
        assert!((gram_logvol(&square).unwrap() - expected).abs() < 1e-12);
        assert!((expected - (-0.356675)).abs() < 1e-6);

        let tall = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let expected = 0.5 * 1.5f64.ln();
        assert!((gram_logvol(&tall).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.202733).abs() < 1e-6);
    }

    #[test]
    fn logvol_rejects_collapse_and_wide_input() {
        let collapsed = m(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(gram_logvol(&collapsed), Err(Error::SingularGram));
        assert_eq!(grad_gram_logvol(&collapsed), Err(Error::SingularGram));
        let wide = m(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(gram_logvol(&wide), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gradient_examples() {
        let g = grad_gram_logvol(&Matrix::identity(3)).unwrap();
        assert!(g.sub(&Matrix::identity(3)).max_abs() < 1e-15);

        // Square case: T (TᵀT)⁻¹ = T⁻ᵀ.
        let t = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let det = 0.9 * 0.8 - 0.1 * 0.2;
        let inv_t = m(&[&[0.8 / det, -0.2 / det], &[-0.1 / det, 0.9 / det]]);
        let g = grad_gram_logvol(&t).unwrap();
        assert!(g.sub(&inv_t).max_abs() < 1e-12);

        let tall = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let analytic = grad_gram_logvol(&tall).unwrap();
        let numeric =
            fd_gradient(|x| gram_logvol(x).unwrap_or(f64::NAN), &tall, FD_EPS).unwrap();
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn row_normalize_examples() {
        let out = row_normalize(&m(&[&[2.0, 2.0], &[1.0, 3.0]])).unwrap();
        assert_eq!(out, m(&[&[0.5, 0.5], &[0.25, 0.75]]));

        let stochastic = m(&[&[0.25, 0.75], &[0.5, 0.5]]);
        assert_eq!(row_normalize(&stochastic).unwrap(), stochastic);

        assert!(matches!(
            row_normalize(&m(&[&[0.0, 0.0]])),
            Err(Error::ZeroRow { row: 0, .. })
        ));
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|x| x.frobenius_sq(), &m(&[&[3.0]]), FD_EPS).unwrap();
        assert!((g[(0, 0)] - 6.0).abs() < 1e-8);

        let g = fd_gradient(|_| 4.2, &m(&[&[1.0, 2.0], &[3.0, 4.0]]), FD_EPS).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));

        let err = fd_gradient(|x| x[(0, 0)].ln(), &m(&[&[0.0]]), FD_EPS);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(fd_gradient(|x| x.sum(), &m(&[&[0.0]]), 0.0).is_err());
    }

    #[test]
    fn from_vec_validates() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn products_agree() {
        let a = m(&[&[1.0, 2.0, 0.0], &[-1.0, 0.5, 3.0]]);
        let b = m(&[&[2.0, 1.0], &[0.0, -1.0], &[4.0, 0.5]]);
        let ab = a.matmul(&b);
        assert_eq!(ab, m(&[&[2.0, -1.0], &[10.0, 0.0]]));
        assert_eq!(a.transpose().t_matmul(&b), ab);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
