//! Dense vector and matrix helpers.
//!
//! Everything is `f64` and every reduction accumulates left to right, so the
//! same inputs always give bit-identical outputs.

use crate::error::{Error, Result};

/// Norms at or below this value are treated as a zero vector.
pub const EPS_NORM: f64 = 1e-12;

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Left-to-right sum of products. Callers guarantee equal lengths.
#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::ZeroVector(n));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn add(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn scale(v: &[f64], alpha: f64) -> Vec<f64> {
    v.iter().map(|x| alpha * x).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    check_len(y.len(), x.len())?;
    axpy_unchecked(alpha, x, y);
    Ok(())
}

#[inline]
pub(crate) fn axpy_unchecked(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, values.len())?;
        Ok(Mat { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            values.extend_from_slice(r);
        }
        Ok(Mat { rows: rows.len(), cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self * v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, v.len())?;
        Ok(self.matvec_unchecked(v))
    }

    pub(crate) fn matvec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot_unchecked(self.row(r), v)).collect()
    }

    /// `self^T * v`
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, v.len())?;
        Ok(self.matvec_transposed_unchecked(v))
    }

    pub(crate) fn matvec_transposed_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            axpy_unchecked(*vr, self.row(r), &mut out);
        }
        out
    }

    /// `self += alpha * u v^T`
    pub(crate) fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols;
        for (r, ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a != 0.0 {
                axpy_unchecked(a, v, &mut self.values[r * cols..(r + 1) * cols]);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}
