//! Dense complex matrices.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(
            rows,
            cols,
            data.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        )
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from CN(0, variance): real and imaginary parts each
    /// N(0, variance/2).
    pub fn random_cn<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        variance: f64,
        rng: &mut R,
    ) -> Self {
        let std = (variance / 2.0).sqrt();
        let data = (0..rows * cols).map(|_| sample_cn(rng, std)).collect();
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_complex(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sqr().sqrt()
    }

    /// Copy of rows `start..start + count`.
    pub fn row_block(&self, start: usize, count: usize) -> Self {
        Self {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Overwrites rows `start..` with `block`.
    pub fn set_row_block(&mut self, start: usize, block: &Self) -> Result<()> {
        if block.cols != self.cols || start + block.rows > self.rows {
            return Err(Error::Shape(format!(
                "row block {}x{} at {start} does not fit {}x{}",
                block.rows, block.cols, self.rows, self.cols
            )));
        }
        self.data[start * self.cols..(start + block.rows) * self.cols].copy_from_slice(&block.data);
        Ok(())
    }

    /// Same entries, new shape (row-major reinterpretation).
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data)
    }

    /// Maximum entrywise deviation from the conjugate transpose.
    pub fn hermitian_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn to_nalgebra(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<Complex64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }

    /// Solves `X · self = rhs` for `X` (right division), i.e. `X = rhs · self⁻¹`.
    pub fn right_solve(&self, rhs: &Self) -> Result<Self> {
        if self.rows != self.cols || rhs.cols != self.rows {
            return Err(Error::Shape(format!(
                "right solve of {}x{} by {}x{}",
                rhs.rows, rhs.cols, self.rows, self.cols
            )));
        }
        // X A = B  <=>  Aᴴ Xᴴ = Bᴴ
        let lu = self.to_nalgebra().adjoint().lu();
        let sol = lu
            .solve(&rhs.to_nalgebra().adjoint())
            .ok_or_else(|| Error::Singular("normal matrix is not invertible".into()))?;
        let out = Self::from_nalgebra(&sol.adjoint());
        if !out.is_finite() {
            return Err(Error::Singular(
                "normal matrix is numerically singular".into(),
            ));
        }
        Ok(out)
    }

    /// Principal square root of a Hermitian positive semidefinite matrix.
    pub fn psd_sqrt(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Covariance(format!(
                "{}x{} matrix is not square",
                self.rows, self.cols
            )));
        }
        let scale = self.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let tol = 1e-10 * scale.max(1.0);
        if self.hermitian_defect() > tol {
            return Err(Error::Covariance("matrix is not Hermitian".into()));
        }
        let eig = self.to_nalgebra().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -tol) {
            return Err(Error::Covariance(
                "matrix is not positive semidefinite".into(),
            ));
        }
        let v = &eig.eigenvectors;
        let n = self.rows;
        let sqrt_l: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
        Ok(Self::from_fn(n, n, |r, c| {
            (0..n)
                .map(|k| v[(r, k)] * v[(c, k)].conj() * sqrt_l[k])
                .sum()
        }))
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// One CN(0, 2·std²) draw.
pub(crate) fn sample_cn<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * std, im * std)
}

/// `Σ conj(a_i) b_i`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = ComplexMatrix::from_vec(2, 2, vec![c(1., 0.), c(0., 1.), c(2., 0.), c(0., 0.)])
            .unwrap();
        let b = ComplexMatrix::from_vec(2, 1, vec![c(1., 1.), c(3., 0.)]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p[(0, 0)], c(1., 4.));
        assert_eq!(p[(1, 0)], c(2., 2.));
        assert!(a.matmul(&a.transpose().row_block(0, 1)).is_err());
    }

    #[test]
    fn right_solve_inverts() {
        let a = ComplexMatrix::from_vec(2, 2, vec![c(2., 0.), c(0., 1.), c(0., -1.), c(3., 0.)])
            .unwrap();
        let b = ComplexMatrix::from_vec(1, 2, vec![c(1., 2.), c(-1., 0.5)]).unwrap();
        let x = a.right_solve(&b).unwrap();
        let back = x.matmul(&a).unwrap();
        assert!(back.sub(&b).unwrap().frobenius_norm() < 1e-12);
        assert!(ComplexMatrix::zeros(2, 2).right_solve(&b).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let r =
            ComplexMatrix::from_vec(2, 2, vec![c(1., 0.), c(0.3, 0.4), c(0.3, -0.4), c(1., 0.)])
                .unwrap();
        let s = r.psd_sqrt().unwrap();
        assert!(s.matmul(&s).unwrap().sub(&r).unwrap().frobenius_norm() < 1e-12);
        assert!(s.hermitian_defect() < 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_bad_covariances() {
        let non_herm =
            ComplexMatrix::from_vec(2, 2, vec![c(1., 0.), c(0.5, 0.), c(0., 0.), c(1., 0.)])
                .unwrap();
        assert!(matches!(non_herm.psd_sqrt(), Err(Error::Covariance(_))));
        let indefinite = ComplexMatrix::from_real(2, 2, &[1., 2., 2., 1.]).unwrap();
        assert!(matches!(indefinite.psd_sqrt(), Err(Error::Covariance(_))));
    }
}
