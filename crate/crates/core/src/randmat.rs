//! Random scalars, vectors and matrices for the model, the priors and the
//! posterior conditionals, plus a univariate slice sampler for the
//! non-conjugate mixing updates.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Exp1, Gamma, LogNormal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{lower_triangular_inverse, Matrix, PdMatrix};

/// Reproducible random stream: a ChaCha8 generator keyed by `seed` and
/// positioned on stream `stream_id`.
///
/// Cloning copies the generator state, so a clone replays the same draws.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Stream for a task keyed by `path` under a master seed.
    pub fn for_task(master_seed: u64, path: &[u64]) -> Self {
        Self::new(master_seed, derive_stream_id(master_seed, path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable stream id for `(master_seed, path…)`. Does not depend on the
/// platform hasher, so ids are identical across builds.
pub fn derive_stream_id(master_seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master_seed), |h, &p| {
        splitmix64(h ^ splitmix64(p))
    })
}

fn check_dims(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "requested a {rows}x{cols} matrix"
        )));
    }
    Ok(())
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix of i.i.d. N(0, 1) entries.
pub fn std_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    check_dims(rows, cols)?;
    Ok(Matrix::from_fn(rows, cols, |_, _| std_normal(rng)))
}

/// Draw from MN(M, U, V): `M + L_U · Z · L_Vᵀ`, so `vec(Y) ~ N(vec(M), V ⊗ U)`.
pub fn matrix_normal<R: Rng + ?Sized>(
    mean: &Matrix,
    row_cov: &PdMatrix,
    col_cov: &PdMatrix,
    rng: &mut R,
) -> Result<Matrix> {
    if mean.nrows() != row_cov.dim() || mean.ncols() != col_cov.dim() {
        return Err(Error::DimensionMismatch(format!(
            "mean is {}x{}, U is {}x{}, V is {}x{}",
            mean.nrows(),
            mean.ncols(),
            row_cov.dim(),
            row_cov.dim(),
            col_cov.dim(),
            col_cov.dim()
        )));
    }
    let z = std_normal_matrix(mean.nrows(), mean.ncols(), rng)?;
    Ok(mean + row_cov.factor() * z * col_cov.factor().transpose())
}

/// Lower-triangular Bartlett factor `A` with `A·Aᵀ ~ W(df, I_dim)`:
/// `A_ii² ~ χ²(df − i)` (0-based `i`), `A_ij ~ N(0, 1)` below the diagonal.
/// Real-valued `df` is used directly.
pub fn bartlett_factor<R: Rng + ?Sized>(df: f64, dim: usize, rng: &mut R) -> Result<Matrix> {
    check_dims(dim, dim)?;
    if !(df > dim as f64 - 1.0) || !df.is_finite() {
        return Err(Error::DegreesOfFreedomTooSmall { df, dim });
    }
    let mut a = Matrix::zeros(dim, dim);
    for j in 0..dim {
        a[(j, j)] = chi_square(df - j as f64, rng)?.sqrt();
        for i in (j + 1)..dim {
            a[(i, j)] = std_normal(rng);
        }
    }
    Ok(a)
}

/// Wishart draw with `E[W] = df · scale`.
pub fn wishart<R: Rng + ?Sized>(df: f64, scale: &PdMatrix, rng: &mut R) -> Result<PdMatrix> {
    let a = bartlett_factor(df, scale.dim(), rng)?;
    // L·A is lower triangular with positive diagonal, i.e. already the factor.
    PdMatrix::from_factor(scale.factor() * a)
}

/// Inverse-Wishart draw parameterised so that `E[Σ] = scale / (df − dim − 1)`.
pub fn inverse_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &PdMatrix,
    rng: &mut R,
) -> Result<PdMatrix> {
    InverseWishartDraw::sample(df, scale, rng)?.covariance()
}

/// An inverse-Wishart draw kept in factored form.
///
/// With `scale = L·Lᵀ` and Bartlett factor `A`, the precision is
/// `Σ⁻¹ = L⁻ᵀ·A·Aᵀ·L⁻¹ ~ W(df, scale⁻¹)` and `Σ = (L·A⁻ᵀ)(L·A⁻ᵀ)ᵀ`.
/// Samplers that only need `Σ⁻¹` (or its diagonal) never form `Σ`.
#[derive(Debug, Clone)]
pub struct InverseWishartDraw {
    scale_factor: Matrix,
    bartlett: Matrix,
}

impl InverseWishartDraw {
    pub fn sample<R: Rng + ?Sized>(df: f64, scale: &PdMatrix, rng: &mut R) -> Result<Self> {
        Ok(Self {
            scale_factor: scale.factor().clone(),
            bartlett: bartlett_factor(df, scale.dim(), rng)?,
        })
    }

    /// `G` with `Σ⁻¹ = G·Gᵀ`.
    pub fn precision_root(&self) -> Matrix {
        let mut g = self.bartlett.clone();
        self.scale_factor.tr_solve_lower_triangular_mut(&mut g);
        g
    }

    pub fn precision(&self) -> Matrix {
        let g = self.precision_root();
        crate::linalg::symmetrize_unchecked(&g * g.transpose())
    }

    pub fn precision_diagonal(&self) -> Vec<f64> {
        let g = self.precision_root();
        g.row_iter().map(|r| r.norm_squared()).collect()
    }

    pub fn covariance(&self) -> Result<PdMatrix> {
        let ainv = lower_triangular_inverse(&self.bartlett);
        let c = &self.scale_factor * ainv.transpose();
        PdMatrix::new(&c * c.transpose())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterOutOfRange(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// Gamma with shape/scale parameterisation (mean `shape · scale`).
pub fn gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    positive("gamma shape", shape)?;
    positive("gamma scale", scale)?;
    let d = Gamma::new(shape, scale).map_err(|e| Error::ParameterOutOfRange(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Inverse gamma with density `∝ x^{−shape−1} e^{−scale/x}`.
pub fn inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    positive("inverse-gamma scale", scale)?;
    Ok(1.0 / gamma(shape, 1.0 / scale, rng)?)
}

pub fn lognormal<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !mu.is_finite() {
        return Err(Error::ParameterOutOfRange(format!(
            "lognormal mu must be finite, got {mu}"
        )));
    }
    positive("lognormal sigma", sigma)?;
    let d = LogNormal::new(mu, sigma).map_err(|e| Error::ParameterOutOfRange(e.to_string()))?;
    Ok(d.sample(rng))
}

pub fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::ParameterOutOfRange(format!(
            "uniform needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    Ok(lo + (hi - lo) * rng.random::<f64>())
}

pub fn beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    positive("beta a", a)?;
    positive("beta b", b)?;
    let d = Beta::new(a, b).map_err(|e| Error::ParameterOutOfRange(e.to_string()))?;
    Ok(d.sample(rng))
}

pub fn chi_square<R: Rng + ?Sized>(df: f64, rng: &mut R) -> Result<f64> {
    positive("chi-square df", df)?;
    let d = ChiSquared::new(df).map_err(|e| Error::ParameterOutOfRange(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Standardised lower truncation point beyond which the exponential
/// rejection sampler replaces the inverse CDF.
const DEEP_TAIL: f64 = 4.0;

/// N(mu, sigma²) conditioned on being positive.
pub fn truncated_normal_positive<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !mu.is_finite() {
        return Err(Error::ParameterOutOfRange(format!(
            "truncated normal mu must be finite, got {mu}"
        )));
    }
    positive("truncated normal sigma", sigma)?;
    // standardised truncation point
    let alpha = -mu / sigma;
    loop {
        let z = if alpha <= DEEP_TAIL {
            let std = Normal::standard();
            // Upper-tail inversion keeps precision when alpha is large.
            let tail = std.sf(alpha);
            let u: f64 = 1.0 - rng.random::<f64>();
            -std.inverse_cdf(u * tail)
        } else {
            // Robert (1995) translated-exponential proposal.
            let rate = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
            loop {
                let e: f64 = Exp1.sample(rng);
                let z = alpha + e / rate;
                let u: f64 = rng.random();
                if u <= (-0.5 * (z - rate).powi(2)).exp() {
                    break z;
                }
            }
        };
        let x = mu + sigma * z;
        if x > 0.0 && x.is_finite() {
            return Ok(x);
        }
    }
}

/// Step-out expansions allowed before the slice sampler gives up.
pub const MAX_SLICE_EXPANSIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceDraw {
    pub value: f64,
    pub expansions: usize,
    pub evaluations: usize,
}

/// One stepping-out / shrinkage slice-sampling transition for a target on
/// `(0, ∞)`. The walk runs on `ln x` (Jacobian included), so it is scale
/// free; `width_hint` is the initial bracket width in log units (default 1).
pub fn slice_sample<F, R>(
    mut log_density: F,
    current: f64,
    width_hint: Option<f64>,
    rng: &mut R,
) -> Result<SliceDraw>
where
    F: FnMut(f64) -> f64,
    R: Rng + ?Sized,
{
    let mut evaluations = 0usize;
    let mut f = |u: f64| {
        evaluations += 1;
        let x = u.exp();
        if x > 0.0 && x.is_finite() {
            log_density(x) + u
        } else {
            f64::NEG_INFINITY
        }
    };
    if !(current > 0.0) || !current.is_finite() {
        return Err(Error::NonFiniteDensity(current));
    }
    let u0 = current.ln();
    let f0 = f(u0);
    if !f0.is_finite() {
        return Err(Error::NonFiniteDensity(current));
    }
    let width = match width_hint {
        Some(w) if w > 0.0 && w.is_finite() => w,
        _ => 1.0,
    };
    let level = f0 - Distribution::<f64>::sample(&Exp1, rng);

    let mut left = u0 - width * rng.random::<f64>();
    let mut right = left + width;
    let mut expansions = 0usize;
    while f(left) > level {
        left -= width;
        expansions += 1;
        if expansions > MAX_SLICE_EXPANSIONS {
            return Err(Error::SliceStepOut(MAX_SLICE_EXPANSIONS));
        }
    }
    while f(right) > level {
        right += width;
        expansions += 1;
        if expansions > MAX_SLICE_EXPANSIONS {
            return Err(Error::SliceStepOut(MAX_SLICE_EXPANSIONS));
        }
    }

    loop {
        let u = left + (right - left) * rng.random::<f64>();
        if f(u) > level {
            return Ok(SliceDraw {
                value: u.exp(),
                expansions,
                evaluations,
            });
        }
        if u < u0 {
            left = u;
        } else {
            right = u;
        }
    }
}
