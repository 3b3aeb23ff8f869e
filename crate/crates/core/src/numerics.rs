//! Dense matrices and stabilized log-sum-exp / softmax.
//!
//! Everything downstream (energies, attention, the toy denoiser) is written
//! against [`Matrix`]. Vectors are plain `&[f64]` slices.
//!
//! `lse(v, beta) = beta^-1 * log(sum_i exp(beta * v_i))`, so that its gradient
//! with respect to `v` is `softmax(beta * v)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut c = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Smooth maximum `beta^-1 log sum exp(beta v_i)`, stabilized by max subtraction.
pub fn lse(v: &[f64], beta: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("lse", "empty vector"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain("lse", format!("beta must be positive, got {beta}")));
    }
    Ok(lse_unchecked(v, beta))
}

pub(crate) fn lse_unchecked(v: &[f64], beta: f64) -> f64 {
    let m = max_of(v);
    let s = compensated_sum(v.iter().map(|&x| (beta * (x - m)).exp()));
    m + s.ln() / beta
}

/// `exp(v - lse(v, 1))`, computed as a normalized exponential.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("softmax", "empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out, 1.0);
    Ok(out)
}

/// Replaces `v` with `softmax(beta * v)`.
pub(crate) fn softmax_in_place(v: &mut [f64], beta: f64) {
    let m = max_of(v);
    for x in v.iter_mut() {
        *x = (beta * (*x - m)).exp();
    }
    let s = compensated_sum(v.iter().copied());
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Row-wise softmax of `beta * A` (each output row sums to one).
///
/// `beta = 0` gives uniform rows; negative beta is rejected.
pub fn row_softmax(a: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::domain("row_softmax", format!("beta must be nonnegative, got {beta}")));
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(a.cols) {
        softmax_in_place(row, beta);
    }
    Ok(out)
}

/// `diag(K K^T)` as a vector: squared norm of every row.
pub fn row_sq_norms(k: &Matrix) -> Vec<f64> {
    (0..k.rows).map(|i| compensated_sum(k.row(i).iter().map(|x| x * x))).collect()
}

/// `tr(K K^T)`: sum of all squared entries.
pub fn sq_norm_sum(k: &Matrix) -> f64 {
    compensated_sum(row_sq_norms(k))
}

/// `D(d) A` without materializing the diagonal matrix.
pub fn scale_rows(a: &Matrix, d: &[f64]) -> Result<Matrix> {
    if d.len() != a.rows {
        return Err(Error::shape("scale_rows", format!("{} scales for {} rows", d.len(), a.rows)));
    }
    let mut out = a.clone();
    for (row, &s) in out.data.chunks_mut(a.cols).zip(d) {
        for x in row {
            *x *= s;
        }
    }
    Ok(out)
}

/// Dense row-major matrix of finite `f64` values with at least one row and column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Matrix::new", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", format!("{} values for shape {rows}x{cols}", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Matrix::new(rows.len(), cols, data)
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix entry by entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Matrix::new(1, v.len(), v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{}x{} * ({}x{})^T", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("({}x{})^T * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out.data[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `self += s * other`.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled_in_place", "shape mismatch"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Mean of every column, as a vector of length `cols`.
    pub fn column_means(&self) -> Vec<f64> {
        (0..self.cols).map(|j| compensated_sum((0..self.rows).map(|i| self.get(i, j))) / self.rows as f64).collect()
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.rows) {
            return Err(Error::shape("select_rows", "row index out of range or empty selection"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix { rows: idx.len(), cols: self.cols, data })
    }

    /// CSV text, one row per line, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 24);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| fmt_f64(*x)).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("empty matrix CSV".into()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Formats a float with 17 significant digits, which round-trips any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn lse_examples() {
        assert!((lse(&[0.0, 0.0], 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        for beta in [0.1, 1.0, 7.0] {
            assert!((lse(&[5.0], beta).unwrap() - 5.0).abs() < 1e-15);
        }
        // (1/2) ln(e^2 + e^4 + e^6), evaluated with 40-digit arithmetic.
        assert!((lse(&[1.0, 2.0, 3.0], 2.0).unwrap() - 3.071_465_814_249_95).abs() < 1e-13);
    }

    #[test]
    fn lse_rejects_bad_input() {
        assert!(matches!(lse(&[], 1.0), Err(Error::Domain { .. })));
        assert!(matches!(lse(&[1.0], 0.0), Err(Error::Domain { .. })));
        assert!(matches!(lse(&[1.0], -1.0), Err(Error::Domain { .. })));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn lse_is_stable_for_large_inputs() {
        let v = lse(&[1000.0, 1000.0], 1.0).unwrap();
        assert!(v.is_finite());
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[3.7]).unwrap(), vec![1.0]);
    }

    #[test]
    fn row_softmax_examples() {
        let z = row_softmax(&Matrix::zeros(3, 4), 2.0).unwrap();
        assert!(z.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let sharp = row_softmax(&Matrix::identity(2), 200.0).unwrap();
        assert!(sharp.get(0, 0) > 1.0 - 1e-12 && sharp.get(1, 1) > 1.0 - 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 5);
            let s = row_softmax(&a, 1.0).unwrap();
            for i in 0..4 {
                let oracle = softmax(a.row(i)).unwrap();
                for (x, y) in s.row(i).iter().zip(&oracle) {
                    assert!((x - y).abs() < 1e-15);
                }
                assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norms_and_row_scaling() {
        assert_eq!(row_sq_norms(&Matrix::identity(3)), vec![1.0; 3]);
        assert_eq!(row_sq_norms(&Matrix::zeros(2, 3)), vec![0.0; 2]);
        assert_eq!(sq_norm_sum(&Matrix::identity(3)), 3.0);
        assert_eq!(sq_norm_sum(&Matrix::zeros(2, 2)), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_matrix(&mut rng, 4, 3);
        let norms = row_sq_norms(&k);
        for i in 0..4 {
            let mut brute = 0.0;
            for j in 0..3 {
                brute += k.get(i, j) * k.get(i, j);
            }
            assert!((norms[i] - brute).abs() < 1e-14);
        }
        assert!((sq_norm_sum(&k) - norms.iter().sum::<f64>()).abs() < 1e-14);

        assert_eq!(scale_rows(&k, &[1.0; 4]).unwrap(), k);
        assert_eq!(scale_rows(&k, &[0.0; 4]).unwrap().max_abs(), 0.0);
        let d = [0.3, -1.2, 2.0, 0.7];
        let diag = Matrix::from_fn(4, 4, |i, j| if i == j { d[i] } else { 0.0 });
        let dense = diag.matmul(&k).unwrap();
        assert!(scale_rows(&k, &d).unwrap().max_abs_diff(&dense) < 1e-15);
        assert!(matches!(scale_rows(&k, &[1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 8);
        let lhs = a.matmul_t(&b).unwrap().transpose();
        let rhs = b.matmul_t(&a).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        assert!(a.t_matmul(&b).unwrap().max_abs_diff(&a.transpose().matmul(&b).unwrap()) < 1e-12);
    }

    #[test]
    fn construction_rejects_invalid() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
        assert!(matches!(Matrix::new(1, 1, vec![f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Matrix::from_csv("1,2\n3\n").is_err());
        assert!(Matrix::from_csv("1,abc\n").is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 5, 3).scale(1e-7);
        assert_eq!(Matrix::from_csv(&a.to_csv()).unwrap(), a);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let s = softmax(&v).unwrap();
            prop_assert!((compensated_sum(s.iter().copied()) - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_bounds_and_monotonicity(
            v in prop::collection::vec(-20.0f64..20.0, 1..12),
            bumps in prop::collection::vec(0.0f64..3.0, 12),
            beta in 0.05f64..5.0,
        ) {
            let l = lse(&v, beta).unwrap();
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= m - 1e-12);
            prop_assert!(l <= m + (v.len() as f64).ln() / beta + 1e-12);
            let w: Vec<f64> = v.iter().zip(&bumps).map(|(x, b)| x + b).collect();
            prop_assert!(lse(&w, beta).unwrap() >= l - 1e-12);
        }
    }
}
