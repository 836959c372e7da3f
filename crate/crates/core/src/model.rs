//! Multi-response Gaussian regression `Y = X·B + E`, rows of `E` i.i.d.
//! `N_q(0, Σ)`, and the sufficient statistics the posterior conditionals use.
//!
//! A dataset without a design matrix is the i.i.d. covariance setting
//! (`p = 0`, `S_Y = YᵀY`).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, PdMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Matrix,
    x: Option<Matrix>,
}

impl Dataset {
    pub fn new(y: Matrix, x: Option<Matrix>) -> Result<Self> {
        if y.nrows() < 2 || y.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "need at least 2 observations of at least 1 response, got {}x{}",
                y.nrows(),
                y.ncols()
            )));
        }
        if let Some(x) = &x {
            if x.nrows() != y.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "Y has {} rows but X has {}",
                    y.nrows(),
                    x.nrows()
                )));
            }
            if x.ncols() == 0 {
                return Err(Error::Dimension("design matrix has no columns".into()));
            }
        }
        if y.iter()
            .chain(x.iter().flat_map(|x| x.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite);
        }
        Ok(Self { y, x })
    }

    pub fn iid(y: Matrix) -> Result<Self> {
        Self::new(y, None)
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn x(&self) -> Option<&Matrix> {
        self.x.as_ref()
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.ncols())
    }

    /// CSV with header `y1..yq[,x1..xp]` and one row per observation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.q()).map(|j| format!("y{j}")).collect();
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.y.row(i).iter().map(|v| format!("{v}")).collect();
            if let Some(x) = &self.x {
                rec.extend(x.row(i).iter().map(|v| format!("{v}")));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let mut y_cols = Vec::new();
        let mut x_cols = Vec::new();
        for (k, name) in header.iter().enumerate() {
            let name = name.trim();
            let parsed = |prefix: &str| {
                name.strip_prefix(prefix)
                    .and_then(|s| s.parse::<usize>().ok())
            };
            match (parsed("y"), parsed("x")) {
                (Some(j), _) => y_cols.push((j, k)),
                (_, Some(j)) => x_cols.push((j, k)),
                _ => {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unexpected column {name:?}; expected y1..yq[,x1..xp]"),
                    })
                }
            }
        }
        for (cols, prefix) in [(&mut y_cols, "y"), (&mut x_cols, "x")] {
            cols.sort();
            if cols.iter().enumerate().any(|(i, (j, _))| *j != i + 1) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("{prefix} columns must be numbered 1..k without gaps"),
                });
            }
        }
        if y_cols.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no response columns".into(),
            });
        }
        let mut y_rows = Vec::new();
        let mut x_rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |k: usize| -> Result<f64> {
                let raw = rec.get(k).unwrap_or("").trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("column {} is not a finite number: {raw:?}", k + 1),
                    })
            };
            for (_, k) in &y_cols {
                y_rows.push(field(*k)?);
            }
            for (_, k) in &x_cols {
                x_rows.push(field(*k)?);
            }
        }
        let q = y_cols.len();
        let n = y_rows.len() / q;
        let y = Matrix::from_row_slice(n, q, &y_rows);
        let x = (!x_cols.is_empty()).then(|| Matrix::from_row_slice(n, x_cols.len(), &x_rows));
        Self::new(y, x)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
        _ => Error::Parse {
            line,
            message: e.to_string(),
        },
    }
}

/// Ground truth for simulated data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParams {
    pub b0: Option<Matrix>,
    pub sigma0: PdMatrix,
    /// Eigenvalue bound: spectrum of `sigma0` lies in `[k_sigma, 1/k_sigma]`.
    pub k_sigma: f64,
    pub sigma0_subg: f64,
}

impl TrueParams {
    /// Tightest `k_sigma ≤ 1` for which `sigma0` is well conditioned.
    pub fn eigenvalue_bound(sigma0: &PdMatrix) -> f64 {
        let ev = crate::linalg::eigvals_sym(sigma0.as_matrix());
        ev[0].min(1.0 / ev[ev.len() - 1]).min(1.0)
    }
}

/// Everything the conditional posteriors need from one dataset.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub lambda: f64,
    /// `Yᵀ(I − X·X_λ⁻¹·Xᵀ)Y`, or `YᵀY` without a design.
    pub s_y: PdMatrix,
    /// `XᵀX + λI_p`.
    pub x_lambda: Option<PdMatrix>,
    /// `X_λ⁻¹XᵀY`.
    pub b_tilde: Option<Matrix>,
    pub xtx: Option<Matrix>,
    /// Least-squares `(XᵀX)⁻¹XᵀY`, when `XᵀX` is invertible.
    pub b_ls: Option<Matrix>,
    /// Least-squares residual cross-product `Yᵀ(I − X(XᵀX)⁻¹Xᵀ)Y`.
    pub w_n: Option<Matrix>,
}

/// Relative pivot size below which `XᵀX` is treated as singular.
const DESIGN_RCOND: f64 = 1e-12;

fn invertible_gram(xtx: &Matrix) -> Option<PdMatrix> {
    let pd = PdMatrix::new(xtx.clone()).ok()?;
    let max_diag = xtx.diagonal().max();
    let min_pivot = pd
        .factor()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    (min_pivot >= DESIGN_RCOND * max_diag).then_some(pd)
}

pub fn compute_stats(d: &Dataset, lambda: f64) -> Result<SufficientStats> {
    let y = d.y();
    let yty = y.transpose() * y;
    let Some(x) = d.x() else {
        return Ok(SufficientStats {
            n: d.n(),
            p: 0,
            q: d.q(),
            lambda,
            s_y: PdMatrix::new(yty)?,
            x_lambda: None,
            b_tilde: None,
            xtx: None,
            b_ls: None,
            w_n: None,
        });
    };
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::ParameterOutOfRange(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let p = x.ncols();
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let gram = invertible_gram(&xtx);

    let x_lambda = if lambda > 0.0 {
        PdMatrix::new(&xtx + Matrix::identity(p, p) * lambda)?
    } else {
        gram.clone().ok_or(Error::SingularDesign)?
    };
    let b_tilde = x_lambda.solve(&xty)?;
    let s_y = PdMatrix::new(&yty - xty.transpose() * &b_tilde)?;

    let (b_ls, w_n) = match &gram {
        Some(g) => {
            let b = g.solve(&xty)?;
            let w = crate::linalg::symmetrize_unchecked(&yty - xty.transpose() * &b);
            (Some(b), Some(w))
        }
        None => (None, None),
    };

    Ok(SufficientStats {
        n: d.n(),
        p,
        q: d.q(),
        lambda,
        s_y,
        x_lambda: Some(x_lambda),
        b_tilde: Some(b_tilde),
        xtx: Some(xtx),
        b_ls,
        w_n,
    })
}

/// `S_Y = W_n + B̂ᵀ(λ⁻¹I + (XᵀX)⁻¹)⁻¹B̂` to 1e-8 relative (Frobenius).
pub fn woodbury_check(s: &SufficientStats) -> Result<bool> {
    if s.p == 0 {
        return Err(Error::SingularDesign);
    }
    if !(s.lambda > 0.0) {
        return Err(Error::ParameterOutOfRange(
            "woodbury check needs lambda > 0".into(),
        ));
    }
    let (Some(b), Some(w), Some(xtx)) = (&s.b_ls, &s.w_n, &s.xtx) else {
        return Err(Error::SingularDesign);
    };
    let gram_inv = PdMatrix::new(xtx.clone())?.inverse();
    let middle = PdMatrix::new(gram_inv + Matrix::identity(s.p, s.p) / s.lambda)?;
    let rhs = w + b.transpose() * middle.solve(b)?;
    let lhs = s.s_y.as_matrix();
    Ok((lhs - rhs).norm() <= 1e-8 * lhs.norm())
}

/// Matrix-normal log density of `Y` under `MN(X·B, I_n, Σ)`.
///
/// `b` is required exactly when the dataset has a design matrix.
pub fn loglik(d: &Dataset, b: Option<&Matrix>, sigma: &PdMatrix) -> Result<f64> {
    let (n, q) = (d.n(), d.q());
    if sigma.dim() != q {
        return Err(Error::DimensionMismatch(format!(
            "Sigma is {0}x{0} but q = {q}",
            sigma.dim()
        )));
    }
    let resid = match (d.x(), b) {
        (Some(x), Some(b)) => {
            if b.nrows() != x.ncols() || b.ncols() != q {
                return Err(Error::DimensionMismatch(format!(
                    "B is {}x{}, expected {}x{q}",
                    b.nrows(),
                    b.ncols(),
                    x.ncols()
                )));
            }
            d.y() - x * b
        }
        (None, None) => d.y().clone(),
        (Some(_), None) => {
            return Err(Error::DimensionMismatch(
                "B is required with a design".into(),
            ))
        }
        (None, Some(_)) => return Err(Error::DimensionMismatch("B given without a design".into())),
    };
    let quad = sigma.trace_inv_quadratic(&resid)?;
    let (n, q) = (n as f64, q as f64);
    Ok(-0.5 * n * q * (2.0 * std::f64::consts::PI).ln() - 0.5 * n * sigma.logdet() - 0.5 * quad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randmat::{std_normal_matrix, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn regression(n: usize, p: usize, q: usize, seed: u64) -> Dataset {
        let mut r = RngStream::new(seed, 0);
        let x = std_normal_matrix(n, p, &mut r).unwrap();
        let b = std_normal_matrix(p, q, &mut r).unwrap();
        let e = std_normal_matrix(n, q, &mut r).unwrap();
        Dataset::new(&x * b + e, Some(x)).unwrap()
    }

    #[test]
    fn iid_stats_are_cross_product() {
        let d = Dataset::iid(Matrix::identity(2, 2)).unwrap();
        let s = compute_stats(&d, 1.0).unwrap();
        assert_eq!(s.s_y.as_matrix(), &Matrix::identity(2, 2));
        assert_eq!(s.p, 0);
        assert!(s.b_tilde.is_none());
    }

    #[test]
    fn intercept_only_design() {
        // Y rows (1,2), (3,5), (8,2): column means (4,3).
        let y = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, 8.0, 2.0]);
        let d = Dataset::new(y.clone(), Some(Matrix::from_element(3, 1, 1.0))).unwrap();
        let s = compute_stats(&d, 0.0).unwrap();
        let bt = s.b_tilde.as_ref().unwrap();
        assert_relative_eq!(bt[(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(bt[(0, 1)], 3.0, epsilon = 1e-12);
        // centred cross-product by hand: dev rows (−3,−1), (−1,2), (4,−1)
        let expected = Matrix::from_row_slice(2, 2, &[26.0, -3.0, -3.0, 6.0]);
        assert_relative_eq!(s.s_y.as_matrix(), &expected, epsilon = 1e-10);
    }

    #[test]
    fn ridge_limit() {
        let d = regression(12, 2, 3, 4);
        let s = compute_stats(&d, 1e12).unwrap();
        assert!(s.b_tilde.as_ref().unwrap().amax() < 1e-6);
        let yty = d.y().transpose() * d.y();
        assert!((s.s_y.as_matrix() - &yty).norm() <= 1e-6 * yty.norm());
    }

    #[test]
    fn singular_design_without_ridge() {
        let y = Matrix::from_row_slice(3, 1, &[1.0, 2.0, 4.0]);
        let x = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let d = Dataset::new(y, Some(x)).unwrap();
        assert_eq!(compute_stats(&d, 0.0).unwrap_err(), Error::SingularDesign);
        let s = compute_stats(&d, 1.0).unwrap();
        assert!(s.b_ls.is_none());
        assert_eq!(woodbury_check(&s).unwrap_err(), Error::SingularDesign);
    }

    #[test]
    fn degenerate_responses_are_not_pd() {
        // n < q
        let d = Dataset::iid(Matrix::from_row_slice(
            2,
            3,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ))
        .unwrap();
        assert!(matches!(
            compute_stats(&d, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn woodbury_examples() {
        let d = regression(40, 3, 4, 1);
        assert!(woodbury_check(&compute_stats(&d, 1.0).unwrap()).unwrap());
        assert!(woodbury_check(&compute_stats(&d, 1e-9).unwrap()).unwrap());
        let iid = Dataset::iid(Matrix::identity(3, 3)).unwrap();
        assert_eq!(
            woodbury_check(&compute_stats(&iid, 1.0).unwrap()).unwrap_err(),
            Error::SingularDesign
        );
    }

    #[test]
    fn loglik_scalar_and_separable() {
        let d = Dataset::iid(Matrix::from_row_slice(2, 1, &[0.0, 0.0])).unwrap();
        let ll = loglik(&d, None, &PdMatrix::identity(1)).unwrap();
        assert_relative_eq!(ll, -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);

        let y = Matrix::from_row_slice(3, 2, &[0.1, -1.0, 2.0, 0.5, -0.3, 0.0]);
        let d = Dataset::iid(y.clone()).unwrap();
        let ll = loglik(&d, None, &PdMatrix::identity(2)).unwrap();
        let uni = |v: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * v * v;
        let sep: f64 = y.iter().map(|v| uni(*v)).sum();
        assert_relative_eq!(ll, sep, epsilon = 1e-12);
    }

    #[test]
    fn loglik_matches_kronecker_form() {
        let d = regression(4, 2, 2, 9);
        let b = Matrix::from_row_slice(2, 2, &[0.3, -0.2, 1.0, 0.4]);
        let sigma = PdMatrix::new(Matrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 0.9])).unwrap();
        let ll = loglik(&d, Some(&b), &sigma).unwrap();
        // brute force: vec(Y) ~ N(vec(XB), Σ ⊗ I_n), dense 8x8 covariance
        let mean = d.x().unwrap() * &b;
        let r = d.y() - mean;
        let v = nalgebra::DVector::from_column_slice(r.as_slice());
        let cov = sigma.as_matrix().kronecker(&Matrix::identity(4, 4));
        let k = v.len() as f64;
        let quad = (v.transpose() * cov.clone().try_inverse().unwrap() * &v)[(0, 0)];
        let oracle = -0.5 * k * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * cov.determinant().ln()
            - 0.5 * quad;
        assert_relative_eq!(ll, oracle, max_relative = 1e-10);
        assert!(loglik(&d, None, &sigma).is_err());
        assert!(loglik(&d, Some(&b), &PdMatrix::identity(3)).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = regression(5, 2, 3, 2);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y1,y2,y3,x1,x2\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);

        let bad = "y1,y2\n1,2\n3,oops\n";
        match Dataset::read_csv(bad.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            Dataset::read_csv("y1,z\n1,2\n3,4\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Dataset::read_csv("y1,y2\n1,2\n3\n".as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn woodbury_holds(n in 15usize..=60, p in 1usize..=5, q in 1usize..=6, seed in any::<u64>(), lam in 0.01f64..10.0) {
            prop_assume!(n > p + q);
            let d = regression(n, p, q, seed);
            prop_assert!(woodbury_check(&compute_stats(&d, lam).unwrap()).unwrap());
        }

        #[test]
        fn row_permutation_invariance(seed in any::<u64>(), shift in 1usize..20) {
            let d = regression(20, 3, 4, seed);
            let perm: Vec<usize> = (0..20).map(|i| (i * 7 + shift) % 20).collect();
            let y = Matrix::from_fn(20, 4, |i, j| d.y()[(perm[i], j)]);
            let x = Matrix::from_fn(20, 3, |i, j| d.x().unwrap()[(perm[i], j)]);
            let dp = Dataset::new(y, Some(x)).unwrap();
            let (a, b) = (compute_stats(&d, 0.5).unwrap(), compute_stats(&dp, 0.5).unwrap());
            prop_assert!((a.s_y.as_matrix() - b.s_y.as_matrix()).amax() <= 1e-10 * a.s_y.as_matrix().amax());
            prop_assert!((a.b_tilde.unwrap() - b.b_tilde.unwrap()).amax() <= 1e-10);
        }

        #[test]
        fn projection_invariance_without_ridge(seed in any::<u64>(), c in 0.1f64..10.0) {
            let d = regression(25, 2, 3, seed);
            let mut x = d.x().unwrap().clone();
            x.column_mut(1).scale_mut(c);
            let ds = Dataset::new(d.y().clone(), Some(x)).unwrap();
            let (a, b) = (compute_stats(&d, 0.0).unwrap(), compute_stats(&ds, 0.0).unwrap());
            prop_assert!((a.s_y.as_matrix() - b.s_y.as_matrix()).amax() <= 1e-8 * a.s_y.as_matrix().amax());
        }

        #[test]
        fn residual_cross_product_is_pd(seed in any::<u64>(), q in 1usize..6) {
            let d = regression(30, 4, q, seed);
            let ev = crate::linalg::eigvals_sym(compute_stats(&d, 0.0).unwrap().s_y.as_matrix());
            prop_assert!(ev[0] > 0.0);
        }
    }
}
