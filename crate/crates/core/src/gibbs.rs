//! Gibbs samplers for the DSIW and matrix-F covariance posteriors.
//!
//! DSIW sweep (default order):
//!
//! 1. `Σ | Y, Δ ~ IW(ν + q + n − 1, S_Y + c_ν·Δ)`
//! 2. `δ_i | Σ ∝ exp(−c_ν (Σ⁻¹)_ii δ / 2) · δ^{(ν+q−1)/2} · π_i(δ)`
//! 3. `B | Σ, Y ~ MN(B̃, X_λ⁻¹, Σ)` on kept iterations only.
//!
//! Matrix-F sweep: `Σ | Y, Δ̄ ~ IW(ν + q + n − 1, S_Y + Δ̄)`, then
//! `Δ̄ | Σ ~ W(ν + ν*_q + q − 1, (Σ⁻¹ + Ψ⁻¹)⁻¹)`.
//!
//! Step 2 is a Gamma draw when `π_i` is Gamma, and a slice-sampling
//! transition otherwise. The DSIW chain forms `Σ` explicitly only on kept
//! iterations; discarded iterations carry the precision diagonal alone.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matrix_rows, spectral_norm, Matrix, PdMatrix};
use crate::model::SufficientStats;
use crate::priors::{DsiwPrior, MatrixFPrior, MixingDensity, Prior};
use crate::randmat::{self, InverseWishartDraw, RngStream, SliceDraw};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
    #[serde(default)]
    pub sample_b: bool,
}

impl ChainConfig {
    pub fn new(iterations: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            thin,
            seed,
            stream_id: 0,
            sample_b: false,
        }
    }

    pub fn kept(&self) -> usize {
        if self.thin == 0 || self.burn_in >= self.iterations {
            return 0;
        }
        (self.iterations - self.burn_in) / self.thin
    }

    /// Iterations are numbered from 1.
    pub fn is_kept(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::ParameterOutOfRange("thin must be at least 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::ParameterOutOfRange(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.kept() == 0 {
            return Err(Error::ParameterOutOfRange("chain keeps no draws".into()));
        }
        Ok(())
    }
}

/// How the DSIW scales are updated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaUpdate {
    /// Closed-form Gamma draw for Gamma mixing, slice sampling otherwise.
    #[default]
    Auto,
    Slice,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    #[default]
    SigmaFirst,
    ScaleFirst,
}

/// Knobs used by tests and diagnostics; the defaults are the production
/// sampler.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerOptions {
    /// Never update `Δ` / `Δ̄`; it stays at its initial value.
    pub freeze_scale: bool,
    pub initial_delta: Option<Vec<f64>>,
    pub initial_delta_bar: Option<PdMatrix>,
    pub delta_update: DeltaUpdate,
    pub sweep_order: SweepOrder,
}

/// Full conditional of one DSIW scale `δ_i`, up to normalisation:
/// `exp(−rate·δ) · δ^{exponent} · π_i(δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaConditional {
    /// `(ν + q − 1)/2`.
    pub exponent: f64,
    /// `c_ν (Σ⁻¹)_ii / 2`.
    pub rate: f64,
    pub mixing: MixingDensity,
}

impl DeltaConditional {
    pub fn new(prior: &DsiwPrior, coordinate: usize, precision_ii: f64) -> Self {
        Self {
            exponent: (prior.nu + prior.q() as f64 - 1.0) / 2.0,
            rate: prior.c_nu * precision_ii / 2.0,
            mixing: prior.mixing[coordinate],
        }
    }

    pub fn ln_density(&self, delta: f64) -> f64 {
        -self.rate * delta + self.exponent * delta.ln() + self.mixing.ln_pdf(delta)
    }

    /// `(shape, scale)` of the exact Gamma conditional under Gamma mixing.
    pub fn conjugate(&self) -> Option<(f64, f64)> {
        match self.mixing {
            MixingDensity::Gamma { shape, scale } => {
                Some((shape + self.exponent, 1.0 / (1.0 / scale + self.rate)))
            }
            _ => None,
        }
    }

    pub fn sample_conjugate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let (shape, scale) = self
            .conjugate()
            .ok_or_else(|| Error::Precondition("closed-form update needs Gamma mixing".into()))?;
        randmat::gamma(shape, scale, rng)
    }

    pub fn sample_slice<R: Rng + ?Sized>(&self, current: f64, rng: &mut R) -> Result<SliceDraw> {
        randmat::slice_sample(|d| self.ln_density(d), current, None, rng)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub conjugate_updates: u64,
    pub slice_updates: u64,
    pub slice_expansions: u64,
    pub slice_evaluations: u64,
}

/// Kept draws of the scale variable.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleDraws {
    Diagonal(Vec<Vec<f64>>),
    Matrix(Vec<PdMatrix>),
}

impl ScaleDraws {
    pub fn len(&self) -> usize {
        match self {
            ScaleDraws::Diagonal(v) => v.len(),
            ScaleDraws::Matrix(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draw `k` as a dense matrix (diagonal for DSIW).
    pub fn as_matrix(&self, k: usize) -> Matrix {
        match self {
            ScaleDraws::Diagonal(v) => {
                Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(&v[k]))
            }
            ScaleDraws::Matrix(v) => v[k].as_matrix().clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub config: ChainConfig,
    /// 1-based iteration index of each kept draw.
    pub iterations: Vec<usize>,
    pub sigma: Vec<PdMatrix>,
    pub scale: ScaleDraws,
    /// Present when `config.sample_b`.
    pub b: Option<Vec<Matrix>>,
    pub diagnostics: ChainDiagnostics,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn q(&self) -> usize {
        self.sigma.first().map_or(0, PdMatrix::dim)
    }
}

fn check_dims(stats: &SufficientStats, q: usize, cfg: &ChainConfig) -> Result<()> {
    cfg.validate()?;
    if stats.q != q {
        return Err(Error::DimensionMismatch(format!(
            "data has q = {}, prior has q = {q}",
            stats.q
        )));
    }
    if cfg.sample_b && stats.b_tilde.is_none() {
        return Err(Error::Precondition("sample_b needs a design matrix".into()));
    }
    Ok(())
}

fn initial_sigma(stats: &SufficientStats) -> PdMatrix {
    PdMatrix::new(stats.s_y.as_matrix() / stats.n as f64)
        .unwrap_or_else(|_| PdMatrix::identity(stats.q))
}

/// Draw of `B | Σ ~ MN(B̃, X_λ⁻¹, Σ)` as `B̃ + L_λ⁻ᵀ Z L_Σᵀ`.
fn sample_b<R: Rng + ?Sized>(
    stats: &SufficientStats,
    sigma: &PdMatrix,
    rng: &mut R,
) -> Result<Matrix> {
    let (Some(b_tilde), Some(x_lambda)) = (&stats.b_tilde, &stats.x_lambda) else {
        return Err(Error::Precondition("sample_b needs a design matrix".into()));
    };
    let mut z = randmat::std_normal_matrix(b_tilde.nrows(), b_tilde.ncols(), rng)?;
    x_lambda.factor().tr_solve_lower_triangular_mut(&mut z);
    Ok(b_tilde + z * sigma.factor().transpose())
}

fn initial_delta(prior: &DsiwPrior, opts: &SamplerOptions) -> Result<Vec<f64>> {
    if let Some(d) = &opts.initial_delta {
        if d.len() != prior.q() {
            return Err(Error::DimensionMismatch(format!(
                "initial delta has {} entries, q = {}",
                d.len(),
                prior.q()
            )));
        }
        if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::ParameterOutOfRange(
                "initial delta entries must be positive".into(),
            ));
        }
        return Ok(d.clone());
    }
    // 1 unless the mixing support excludes it.
    Ok(prior
        .mixing
        .iter()
        .map(|m| {
            let (lo, hi) = m.support();
            if (lo..=hi).contains(&1.0) && lo < 1.0 {
                1.0
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect())
}

pub fn gibbs_dsiw(
    stats: &SufficientStats,
    prior: &DsiwPrior,
    cfg: &ChainConfig,
) -> Result<PosteriorSamples> {
    gibbs_dsiw_with(stats, prior, cfg, &SamplerOptions::default())
}

pub fn gibbs_dsiw_with(
    stats: &SufficientStats,
    prior: &DsiwPrior,
    cfg: &ChainConfig,
    opts: &SamplerOptions,
) -> Result<PosteriorSamples> {
    prior.validate()?;
    let q = prior.q();
    check_dims(stats, q, cfg)?;
    let mut rng = RngStream::new(cfg.seed, cfg.stream_id);
    let df = prior.nu + (q + stats.n) as f64 - 1.0;
    let s_y = stats.s_y.as_matrix();

    let mut delta = initial_delta(prior, opts)?;
    let mut precision_diag = initial_sigma(stats).inverse_diagonal();
    let mut diagnostics = ChainDiagnostics::default();
    let kept = cfg.kept();
    let mut iterations = Vec::with_capacity(kept);
    let mut sigmas = Vec::with_capacity(kept);
    let mut deltas = Vec::with_capacity(kept);
    let mut bs = cfg.sample_b.then(|| Vec::with_capacity(kept));

    let update_delta = |precision_diag: &[f64],
                        delta: &mut [f64],
                        diag: &mut ChainDiagnostics,
                        rng: &mut RngStream| {
        if opts.freeze_scale {
            return Ok(());
        }
        for (i, d) in delta.iter_mut().enumerate() {
            let cond = DeltaConditional::new(prior, i, precision_diag[i]);
            if opts.delta_update == DeltaUpdate::Auto && cond.conjugate().is_some() {
                *d = cond.sample_conjugate(rng)?;
                diag.conjugate_updates += 1;
            } else {
                let draw = cond.sample_slice(*d, rng)?;
                *d = draw.value;
                diag.slice_updates += 1;
                diag.slice_expansions += draw.expansions as u64;
                diag.slice_evaluations += draw.evaluations as u64;
            }
        }
        Ok::<(), Error>(())
    };

    for t in 1..=cfg.iterations {
        let mut step = || -> Result<Option<PdMatrix>> {
            if opts.sweep_order == SweepOrder::ScaleFirst {
                update_delta(&precision_diag, &mut delta, &mut diagnostics, &mut rng)?;
            }
            let mut scale = s_y.clone();
            for (i, d) in delta.iter().enumerate() {
                scale[(i, i)] += prior.c_nu * d;
            }
            let draw = InverseWishartDraw::sample(df, &PdMatrix::new(scale)?, &mut rng)?;
            precision_diag = draw.precision_diagonal();
            if opts.sweep_order == SweepOrder::SigmaFirst {
                update_delta(&precision_diag, &mut delta, &mut diagnostics, &mut rng)?;
            }
            if cfg.is_kept(t) {
                Ok(Some(draw.covariance()?))
            } else {
                Ok(None)
            }
        };
        let sigma = step().map_err(|e| e.at_iteration(t))?;
        if let Some(sigma) = sigma {
            if let Some(bs) = bs.as_mut() {
                bs.push(sample_b(stats, &sigma, &mut rng).map_err(|e| e.at_iteration(t))?);
            }
            iterations.push(t);
            sigmas.push(sigma);
            deltas.push(delta.clone());
        }
    }

    Ok(PosteriorSamples {
        config: *cfg,
        iterations,
        sigma: sigmas,
        scale: ScaleDraws::Diagonal(deltas),
        b: bs,
        diagnostics,
    })
}

/// `W(df, P⁻¹)` draw for a precision-form scale `P = L_P L_Pᵀ`:
/// `(L_P⁻ᵀ A)(L_P⁻ᵀ A)ᵀ` with Bartlett factor `A`.
fn wishart_precision_param<R: Rng + ?Sized>(
    df: f64,
    precision: &PdMatrix,
    rng: &mut R,
) -> Result<PdMatrix> {
    let mut root = randmat::bartlett_factor(df, precision.dim(), rng)?;
    precision.factor().tr_solve_lower_triangular_mut(&mut root);
    PdMatrix::new(&root * root.transpose())
}

pub fn gibbs_matrixf(
    stats: &SufficientStats,
    prior: &MatrixFPrior,
    cfg: &ChainConfig,
) -> Result<PosteriorSamples> {
    gibbs_matrixf_with(stats, prior, cfg, &SamplerOptions::default())
}

pub fn gibbs_matrixf_with(
    stats: &SufficientStats,
    prior: &MatrixFPrior,
    cfg: &ChainConfig,
    opts: &SamplerOptions,
) -> Result<PosteriorSamples> {
    prior.validate()?;
    let q = prior.q();
    check_dims(stats, q, cfg)?;
    let mut rng = RngStream::new(cfg.seed, cfg.stream_id);
    let df_sigma = prior.nu + (q + stats.n) as f64 - 1.0;
    let df_scale = prior.nu + prior.nu_q_star + q as f64 - 1.0;
    if !(df_scale > q as f64 - 1.0) {
        return Err(Error::DegreesOfFreedomTooSmall {
            df: df_scale,
            dim: q,
        });
    }
    let psi_inv = prior.psi.inverse();
    let s_y = stats.s_y.as_matrix();

    let mut delta_bar = match &opts.initial_delta_bar {
        Some(d) if d.dim() != q => {
            return Err(Error::DimensionMismatch(format!(
                "initial Delta-bar is {0}x{0}, q = {q}",
                d.dim()
            )))
        }
        Some(d) => d.clone(),
        None => PdMatrix::identity(q),
    };
    let mut precision = initial_sigma(stats).inverse();
    let kept = cfg.kept();
    let mut iterations = Vec::with_capacity(kept);
    let mut sigmas = Vec::with_capacity(kept);
    let mut scales = Vec::with_capacity(kept);
    let mut bs = cfg.sample_b.then(|| Vec::with_capacity(kept));

    let update_scale = |precision: &Matrix, rng: &mut RngStream| -> Result<PdMatrix> {
        wishart_precision_param(df_scale, &PdMatrix::new(precision + &psi_inv)?, rng)
    };

    for t in 1..=cfg.iterations {
        let mut step = || -> Result<Option<PdMatrix>> {
            if opts.sweep_order == SweepOrder::ScaleFirst && !opts.freeze_scale {
                delta_bar = update_scale(&precision, &mut rng)?;
            }
            let scale = PdMatrix::new(s_y + delta_bar.as_matrix())?;
            let draw = InverseWishartDraw::sample(df_sigma, &scale, &mut rng)?;
            precision = draw.precision();
            if opts.sweep_order == SweepOrder::SigmaFirst && !opts.freeze_scale {
                delta_bar = update_scale(&precision, &mut rng)?;
            }
            if cfg.is_kept(t) {
                Ok(Some(draw.covariance()?))
            } else {
                Ok(None)
            }
        };
        let sigma = step().map_err(|e| e.at_iteration(t))?;
        if let Some(sigma) = sigma {
            if let Some(bs) = bs.as_mut() {
                bs.push(sample_b(stats, &sigma, &mut rng).map_err(|e| e.at_iteration(t))?);
            }
            iterations.push(t);
            sigmas.push(sigma);
            scales.push(delta_bar.clone());
        }
    }

    Ok(PosteriorSamples {
        config: *cfg,
        iterations,
        sigma: sigmas,
        scale: ScaleDraws::Matrix(scales),
        b: bs,
        diagnostics: ChainDiagnostics::default(),
    })
}

pub fn run_chain(
    stats: &SufficientStats,
    prior: &Prior,
    cfg: &ChainConfig,
) -> Result<PosteriorSamples> {
    run_chain_with(stats, prior, cfg, &SamplerOptions::default())
}

pub fn run_chain_with(
    stats: &SufficientStats,
    prior: &Prior,
    cfg: &ChainConfig,
    opts: &SamplerOptions,
) -> Result<PosteriorSamples> {
    match prior {
        Prior::Dsiw(p) => gibbs_dsiw_with(stats, p, cfg, opts),
        Prior::MatrixF(p) => gibbs_matrixf_with(stats, p, cfg, opts),
    }
}

/// `E[Σ | scale, Y]` for one kept scale draw: `(S_Y + c·scale)/(n + ν − 2)`.
pub fn conditional_mean(stats: &SufficientStats, prior: &Prior, scale: &Matrix) -> Matrix {
    let (c, nu) = match prior {
        Prior::Dsiw(p) => (p.c_nu, p.nu),
        Prior::MatrixF(p) => (1.0, p.nu),
    };
    (stats.s_y.as_matrix() + scale * c) / (stats.n as f64 + nu - 2.0)
}

/// Posterior mean of `Σ`, either as the plain average of kept draws or as
/// the average of the conditional means given each kept scale draw.
pub fn posterior_mean_sigma(
    samples: &PosteriorSamples,
    stats: &SufficientStats,
    prior: &Prior,
    rao_blackwell: bool,
) -> Result<PdMatrix> {
    if samples.is_empty() {
        return Err(Error::EmptyChain);
    }
    let q = stats.q;
    let mut acc = Matrix::zeros(q, q);
    if rao_blackwell {
        if samples.scale.len() != samples.len() {
            return Err(Error::DimensionMismatch(
                "scale draws do not match Sigma draws".into(),
            ));
        }
        for k in 0..samples.scale.len() {
            acc += conditional_mean(stats, prior, &samples.scale.as_matrix(k));
        }
    } else {
        for s in &samples.sigma {
            if s.dim() != q {
                return Err(Error::DimensionMismatch(format!(
                    "draw is {0}x{0}, q = {q}",
                    s.dim()
                )));
            }
            acc += s.as_matrix();
        }
    }
    PdMatrix::new(acc / samples.len() as f64)
}

/// Fraction of kept draws with `‖Σ⁽ⁱ⁾ − Σ0‖₂ > threshold`.
pub fn tail_probability(
    samples: &PosteriorSamples,
    sigma0: &PdMatrix,
    threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyChain);
    }
    let mut hits = 0usize;
    for s in &samples.sigma {
        if s.dim() != sigma0.dim() {
            return Err(Error::DimensionMismatch(format!(
                "draw is {0}x{0}, Sigma0 is {1}x{1}",
                s.dim(),
                sigma0.dim()
            )));
        }
        if spectral_norm(&(s.as_matrix() - sigma0.as_matrix())) > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-entry summaries of the kept `Σ` draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub kept: usize,
    #[serde(serialize_with = "ser_matrix")]
    pub posterior_mean: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub draw_mean: Matrix,
    /// Half the width of the central 95% interval of the kept draws.
    #[serde(serialize_with = "ser_matrix")]
    pub ci95_half_width: Matrix,
    #[serde(serialize_with = "ser_matrix")]
    pub ess: Matrix,
    pub diagnostics: ChainDiagnostics,
}

fn ser_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

/// `posterior_mean` is the Rao–Blackwell estimate; `draw_mean` the plain
/// average.
pub fn summarize(
    samples: &PosteriorSamples,
    stats: &SufficientStats,
    prior: &Prior,
) -> Result<PosteriorSummary> {
    let posterior_mean = posterior_mean_sigma(samples, stats, prior, true)?.into_matrix();
    let q = stats.q;
    let mut draw_mean = Matrix::zeros(q, q);
    let mut half = Matrix::zeros(q, q);
    let mut ess = Matrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let mut xs: Vec<f64> = samples
                .sigma
                .iter()
                .map(|s| s.as_matrix()[(i, j)])
                .collect();
            let m = stats::mean(&xs);
            let e = stats::effective_sample_size(&xs);
            xs.sort_by(f64::total_cmp);
            let h = 0.5 * (stats::quantile_sorted(&xs, 0.975) - stats::quantile_sorted(&xs, 0.025));
            for (a, b) in [(i, j), (j, i)] {
                draw_mean[(a, b)] = m;
                half[(a, b)] = h;
                ess[(a, b)] = e;
            }
        }
    }
    Ok(PosteriorSummary {
        kept: samples.len(),
        posterior_mean,
        draw_mean,
        ci95_half_width: half,
        ess,
        diagnostics: samples.diagnostics.clone(),
    })
}

/// Chain dump: `iter`, the upper triangle of `Σ` row by row, then
/// `delta_1..delta_q` or the upper triangle of `Δ̄`.
pub fn write_chain_csv<W: Write>(samples: &PosteriorSamples, out: W) -> Result<()> {
    let q = samples.q();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string()];
    for i in 1..=q {
        for j in i..=q {
            header.push(format!("sigma_{i}_{j}"));
        }
    }
    match &samples.scale {
        ScaleDraws::Diagonal(_) => header.extend((1..=q).map(|i| format!("delta_{i}"))),
        ScaleDraws::Matrix(_) => {
            for i in 1..=q {
                for j in i..=q {
                    header.push(format!("delta_bar_{i}_{j}"));
                }
            }
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    let upper = |m: &Matrix, row: &mut Vec<String>| {
        for i in 0..q {
            for j in i..q {
                row.push(format!("{}", m[(i, j)]));
            }
        }
    };
    for (k, t) in samples.iterations.iter().enumerate() {
        let mut row = vec![t.to_string()];
        upper(samples.sigma[k].as_matrix(), &mut row);
        match &samples.scale {
            ScaleDraws::Diagonal(d) => row.extend(d[k].iter().map(|v| format!("{v}"))),
            ScaleDraws::Matrix(d) => upper(d[k].as_matrix(), &mut row),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}
