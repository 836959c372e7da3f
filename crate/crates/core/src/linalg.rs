//! Dense symmetric and positive-definite linear algebra.
//!
//! [`PdMatrix`] is the workhorse: a symmetric positive-definite matrix that is
//! symmetrised and Cholesky-factored at construction, so every value of the
//! type is known to be PD. General rectangular matrices are plain
//! [`nalgebra::DMatrix<f64>`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense general real matrix.
pub type Matrix = DMatrix<f64>;

/// Pivots at or below this value are rejected. No jitter is ever added.
pub const PIVOT_THRESHOLD: f64 = 1e-300;

/// Symmetric positive-definite matrix with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PdMatrix {
    entries: Matrix,
    factor: Matrix,
}

impl PdMatrix {
    /// Symmetrises `m` as `(m + mᵀ)/2` and factors it.
    pub fn new(m: Matrix) -> Result<Self> {
        let entries = symmetrize(&m)?;
        let factor = cholesky_symmetric(&entries)?;
        Ok(Self { entries, factor })
    }

    /// Builds from a known lower Cholesky factor; `entries = L·Lᵀ`.
    pub fn from_factor(factor: Matrix) -> Result<Self> {
        if !factor.is_square() {
            return Err(Error::Dimension("Cholesky factor must be square".into()));
        }
        for (i, d) in factor.diagonal().iter().enumerate() {
            if !(*d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: i,
                    value: *d,
                });
            }
        }
        let factor = factor.lower_triangle();
        let entries = &factor * factor.transpose();
        Ok(Self { entries, factor })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: Matrix::identity(dim, dim),
            factor: Matrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(diag),
        ))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.entries
    }

    pub fn into_matrix(self) -> Matrix {
        self.entries
    }

    /// Lower-triangular `L` with `L·Lᵀ = self`.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `self · X = rhs`.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.nrows() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} rows, matrix is {}x{}",
                rhs.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        let mut x = rhs.clone();
        self.factor.solve_lower_triangular_mut(&mut x);
        self.factor.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        let linv = lower_triangular_inverse(&self.factor);
        let inv = linv.transpose() * &linv;
        symmetrize_unchecked(inv)
    }

    /// Diagonal of the inverse, from the row norms of `L⁻¹`'s columns.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let linv = lower_triangular_inverse(&self.factor);
        linv.column_iter().map(|c| c.norm_squared()).collect()
    }

    /// Quadratic form `tr(self⁻¹ · RᵀR)` for `R` with `dim` columns.
    pub fn trace_inv_quadratic(&self, r: &Matrix) -> Result<f64> {
        if r.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "residual has {} columns, covariance is {}x{}",
                r.ncols(),
                self.dim(),
                self.dim()
            )));
        }
        // tr(Σ⁻¹RᵀR) = ‖L⁻¹Rᵀ‖_F²
        let mut z = r.transpose();
        self.factor.solve_lower_triangular_mut(&mut z);
        Ok(z.norm_squared())
    }
}

impl serde::Serialize for PdMatrix {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        matrix_rows(&self.entries).serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for PdMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let m = matrix_from_rows(&rows).map_err(serde::de::Error::custom)?;
        PdMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Row-major nested vectors, the JSON layout used for matrices.
pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(rows.len(), ncols, &flat))
}

fn symmetrize(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::Dimension("matrix has zero dimension".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(symmetrize_unchecked(m.clone()))
}

pub(crate) fn symmetrize_unchecked(m: Matrix) -> Matrix {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Lower Cholesky factor of `m` after symmetrisation.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    cholesky_symmetric(&symmetrize(m)?)
}

fn cholesky_symmetric(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    // Row-major scratch so the inner products run over contiguous memory.
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (head, tail) = l.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        for i in 0..j {
            let row_i = &head[i * n..i * n + n];
            let s: f64 = row_i[..i].iter().zip(&row_j[..i]).map(|(a, b)| a * b).sum();
            row_j[i] = (a[(j, i)] - s) / row_i[i];
        }
        let s: f64 = row_j[..j].iter().map(|v| v * v).sum();
        let pivot = a[(j, j)] - s;
        if !(pivot > PIVOT_THRESHOLD) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        row_j[j] = pivot.sqrt();
    }
    Ok(Matrix::from_row_slice(n, n, &l))
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub(crate) fn lower_triangular_inverse(l: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut inv = Matrix::identity(n, n);
    l.solve_lower_triangular_mut(&mut inv);
    inv
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn eigvals_sym(m: &Matrix) -> Vec<f64> {
    assert!(m.is_square(), "eigvals_sym needs a square matrix");
    if m.nrows() == 0 {
        return Vec::new();
    }
    let s = symmetrize_unchecked(m.clone());
    let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn is_symmetric(m: &Matrix) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

/// Largest singular value.
///
/// Symmetric inputs use `max |λ|` from a symmetric eigensolve; everything else
/// goes through the eigenvalues of the smaller Gram matrix.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() || m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    if is_symmetric(m) {
        let ev = eigvals_sym(m);
        return ev[0].abs().max(ev[ev.len() - 1].abs());
    }
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let ev = eigvals_sym(&gram);
    ev[ev.len() - 1].max(0.0).sqrt()
}

/// Extreme singular values `(s_min, s_max)` of a tall or square matrix.
pub fn extreme_singular_values(m: &Matrix) -> (f64, f64) {
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let ev = eigvals_sym(&gram);
    (ev[0].max(0.0).sqrt(), ev[ev.len() - 1].max(0.0).sqrt())
}

/// `ln |m|` for a symmetric PD matrix.
pub fn logdet_pd(m: &Matrix) -> Result<f64> {
    Ok(PdMatrix::new(m.clone())?.logdet())
}

pub fn solve_pd(m: &PdMatrix, rhs: &Matrix) -> Result<Matrix> {
    m.solve(rhs)
}

/// Checks the block determinant identity
/// `|S + Δ| = (s₁₁ + δ₁) · |C − u·uᵀ / (s₁₁ + δ₁)|`
/// where `S = [[s₁₁, uᵀ], [u, C*]]`, `Δ = diag(δ₁, rest…)` and
/// `C = C* + diag(rest)`, to 1e-8 relative.
pub fn schur_det_identity_check(s: &PdMatrix, delta1: f64, rest: &[f64]) -> Result<bool> {
    let q = s.dim();
    if q < 2 {
        return Err(Error::DimensionMismatch(
            "identity needs dimension >= 2".into(),
        ));
    }
    if rest.len() != q - 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected {} trailing scales, got {}",
            q - 1,
            rest.len()
        )));
    }
    if !(delta1 > 0.0) || rest.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::ParameterOutOfRange("scales must be positive".into()));
    }
    let sm = s.as_matrix();
    let mut full = sm.clone();
    full[(0, 0)] += delta1;
    for (k, d) in rest.iter().enumerate() {
        full[(k + 1, k + 1)] += d;
    }
    let lhs = logdet_pd(&full)?;

    let head = sm[(0, 0)] + delta1;
    let u = sm.view((1, 0), (q - 1, 1)).clone_owned();
    let mut c = sm.view((1, 1), (q - 1, q - 1)).clone_owned();
    for (k, d) in rest.iter().enumerate() {
        c[(k, k)] += d;
    }
    let schur = c - (&u * u.transpose()) / head;
    let rhs = head.ln() + logdet_pd(&schur)?;
    // Compare determinants, not log-determinants.
    Ok((rhs - lhs).exp_m1().abs() <= 1e-8)
}
