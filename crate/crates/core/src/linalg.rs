//! Dense linear-algebra helpers shared by every numerical module.
//!
//! Two flavours live here: `nalgebra`-based routines used on the general
//! paths, and allocation-free routines over small row-major slices used by
//! the hot loops (cost evaluation, VB E-step).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Initial relative jitter, scaled by `trace / d`.
pub const JITTER_EPS: f64 = 1e-9;
/// Number of jittered retries after the first failed factorisation.
pub const JITTER_RETRIES: usize = 3;
/// Jitter multiplier between retries.
pub const JITTER_GROWTH: f64 = 100.0;

/// Largest tolerated relative asymmetry before a matrix is rejected.
pub const ASYMMETRY_REJECT: f64 = 1e-8;

pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Returns the exactly symmetric part of `m`, rejecting visibly asymmetric input.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(m.nrows(), m.ncols()));
    }
    let asym = relative_asymmetry(m);
    if asym > ASYMMETRY_REJECT {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Cholesky factorisation with the jitter policy: on failure add
/// `eps * trace / d` to the diagonal (eps = 1e-9, x100 per retry, three
/// retries). Returns the factor and the (possibly jittered) matrix it factors.
pub fn robust_cholesky(m: &DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, m.clone()));
    }
    let d = m.nrows().max(1) as f64;
    let trace = m.trace();
    let base = if trace > 0.0 { trace / d } else { 1.0 };
    let mut eps = JITTER_EPS;
    for _ in 0..JITTER_RETRIES {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps * base;
        }
        if let Some(c) = Cholesky::new(jittered.clone()) {
            return Ok((c, jittered));
        }
        eps *= JITTER_GROWTH;
    }
    Err(Error::NotPositiveDefinite { context: context.to_string() })
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Symmetric positive-definite inverse via the jitter-aware Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (c, _) = robust_cholesky(m, context)?;
    let inv = c.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `v^T A^{-1} v` through a Cholesky factor.
pub fn chol_quad_form(c: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    let y = c.l_dirty().solve_lower_triangular(v).expect("cholesky diagonal is positive");
    y.norm_squared()
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    Cholesky::new(m.clone()).is_some()
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::arg("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Copies a matrix into a row-major flat buffer.
pub fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}


/// Serde adapter: `DVector` as a plain JSON array.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serde adapter: `DMatrix` as row-major nested arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Allocation-free kernels over row-major n x n slices.

/// In-place lower Cholesky of a row-major SPD matrix. Returns `log|A|`, or
/// `None` when a pivot is not strictly positive. Upper triangle is left dirty.
#[inline]
pub fn small_cholesky(n: usize, a: &mut [f64]) -> Option<f64> {
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        log_det += 2.0 * d.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Some(log_det)
}

/// Solves `L y = b` in place for a lower factor produced by [`small_cholesky`].
#[inline]
pub fn small_forward(n: usize, l: &[f64], b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = y` in place.
#[inline]
pub fn small_backward(n: usize, l: &[f64], b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Full inverse from a lower Cholesky factor, written row-major into `out`.
/// `col` is scratch of length `n`.
#[inline]
pub fn small_chol_inverse(n: usize, l: &[f64], out: &mut [f64], col: &mut [f64]) {
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        small_forward(n, l, col);
        small_backward(n, l, col);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, j) = robust_cholesky(&m, "test").unwrap();
        assert!(j[(0, 0)] > 1.0);
        assert!(j[(0, 0)] - 1.0 < 1e-4);
    }

    #[test]
    fn jitter_gives_up_on_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(robust_cholesky(&m, "neg"), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        assert!(matches!(symmetrize(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn small_kernels_match_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let mut flat = to_flat(&m);
        let ld = small_cholesky(3, &mut flat).unwrap();
        let c = Cholesky::new(m.clone()).unwrap();
        assert!((ld - chol_log_det(&c)).abs() < 1e-12);
        let mut inv = vec![0.0; 9];
        let mut col = vec![0.0; 3];
        small_chol_inverse(3, &flat, &mut inv, &mut col);
        let expected = to_flat(&c.inverse());
        for (a, b) in inv.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_is_stable() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
