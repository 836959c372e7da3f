//! Monte Carlo checks of the random-matrix facts and algebraic identities
//! the contraction results rest on. Each check is a pure function of its
//! parameters and seed; trials run in parallel on derived streams.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{self, ChainConfig, PosteriorSamples};
use crate::linalg::{
    extreme_singular_values, schur_det_identity_check, spectral_norm, Matrix, PdMatrix,
};
use crate::model::{compute_stats, woodbury_check, Dataset, SufficientStats};
use crate::priors::Prior;
use crate::randmat::{self, RngStream};
use crate::stats;

/// Envelope constant for the singular-value checks.
pub const DEFAULT_ENVELOPE_C: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub trials: usize,
    pub pass_fraction: f64,
    pub nominal_bound: f64,
    /// `None` for report-only checks.
    pub required_pass_fraction: Option<f64>,
    pub details: BTreeMap<String, f64>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.required_pass_fraction
            .is_none_or(|r| self.pass_fraction >= r)
    }
}

fn trial_rng(seed: u64, check: u64, trial: usize) -> RngStream {
    RngStream::for_task(seed, &[check, trial as u64])
}

fn fraction(passes: &[bool]) -> f64 {
    passes.iter().filter(|p| **p).count() as f64 / passes.len() as f64
}

fn need_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::ParameterOutOfRange("need at least one trial".into()));
    }
    Ok(())
}

/// Singular values of `(n+q)×q` Gaussian `A/√n` against
/// `[(1 + c√(q/n))^{−1/2}, (1 − c√(q/n))^{−1/2}]`.
pub fn check_gaussian_singular_values(
    n: usize,
    q: usize,
    trials: usize,
    c: f64,
    seed: u64,
) -> Result<CheckReport> {
    need_trials(trials)?;
    if q == 0 || q >= n {
        return Err(Error::ParameterOutOfRange(format!(
            "need 1 <= q < n, got q = {q}, n = {n}"
        )));
    }
    let r = c * (q as f64 / n as f64).sqrt();
    let lower = (1.0 + r).powf(-0.5);
    let upper = if r < 1.0 {
        (1.0 - r).powf(-0.5)
    } else {
        f64::INFINITY
    };
    let results: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 1, t);
            let a = randmat::std_normal_matrix(n + q, q, &mut rng)? / (n as f64).sqrt();
            Ok(extreme_singular_values(&a))
        })
        .collect();
    let svs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = svs
        .iter()
        .map(|&(lo, hi)| lo >= lower && hi <= upper)
        .collect();
    let nominal = 1.0 - 2.0 * (-(q as f64) / 2.0).exp();
    Ok(CheckReport {
        check_name: "gaussian_singular_values".into(),
        trials,
        pass_fraction: fraction(&passes),
        nominal_bound: nominal,
        required_pass_fraction: Some(nominal.clamp(0.0, 0.95)),
        details: BTreeMap::from([
            ("envelope_lower".into(), lower),
            ("envelope_upper".into(), upper),
            (
                "mean_smin".into(),
                stats::mean(&svs.iter().map(|s| s.0).collect::<Vec<_>>()),
            ),
            (
                "mean_smax".into(),
                stats::mean(&svs.iter().map(|s| s.1).collect::<Vec<_>>()),
            ),
        ]),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    /// `(n−p)×q` i.i.d. Rademacher entries.
    #[default]
    Rademacher,
    /// `(n−p)×q` i.i.d. standard normal entries.
    Gaussian,
    /// `n×q` Rademacher rows with `p` random Gaussian directions projected out.
    Projected,
}

/// Singular values of isotropic sub-Gaussian rows over `√(n−p)` against
/// `[(1 − c√(q/n))^{1/2}, (1 + c√(q/n))^{1/2}]`.
pub fn check_subgaussian_singular_values(
    n: usize,
    p: usize,
    q: usize,
    trials: usize,
    c: f64,
    mode: RowMode,
    seed: u64,
) -> Result<CheckReport> {
    need_trials(trials)?;
    if q == 0 || n <= p + q {
        return Err(Error::ParameterOutOfRange(format!(
            "need p + q < n, got p = {p}, q = {q}, n = {n}"
        )));
    }
    let r = c * (q as f64 / n as f64).sqrt();
    let lower = (1.0 - r).max(0.0).sqrt();
    let upper = (1.0 + r).sqrt();
    let m = n - p;
    let rademacher = |rows: usize, rng: &mut RngStream| {
        use rand::Rng;
        Matrix::from_fn(
            rows,
            q,
            |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 },
        )
    };
    let results: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 2, t);
            let a = match mode {
                RowMode::Rademacher => rademacher(m, &mut rng),
                RowMode::Gaussian => randmat::std_normal_matrix(m, q, &mut rng)?,
                RowMode::Projected => {
                    let a = rademacher(n, &mut rng);
                    if p == 0 {
                        a
                    } else {
                        let x = randmat::std_normal_matrix(n, p, &mut rng)?;
                        let gram = PdMatrix::new(x.transpose() * &x)?;
                        let coef = gram.solve(&(x.transpose() * &a))?;
                        &a - x * coef
                    }
                }
            };
            Ok(extreme_singular_values(&(a / (m as f64).sqrt())))
        })
        .collect();
    let svs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = svs
        .iter()
        .map(|&(lo, hi)| lo >= lower && hi <= upper)
        .collect();
    let nominal = 1.0 - 2.0 * (-(q as f64) / 2.0).exp();
    Ok(CheckReport {
        check_name: format!(
            "subgaussian_singular_values_{}",
            serde_json::to_value(mode).unwrap().as_str().unwrap()
        ),
        trials,
        pass_fraction: fraction(&passes),
        nominal_bound: nominal,
        required_pass_fraction: Some(nominal.clamp(0.0, 0.95)),
        details: BTreeMap::from([
            ("envelope_lower".into(), lower),
            ("envelope_upper".into(), upper),
            (
                "mean_smin".into(),
                stats::mean(&svs.iter().map(|s| s.0).collect::<Vec<_>>()),
            ),
            (
                "mean_smax".into(),
                stats::mean(&svs.iter().map(|s| s.1).collect::<Vec<_>>()),
            ),
        ]),
    })
}

/// `q = round(γn)` draws of `χ²_n/n`; a trial passes when the largest and
/// smallest both sit within `6√(ln q / n)` of 1.
pub fn check_chisq_extremes(n: usize, gamma: f64, trials: usize, seed: u64) -> Result<CheckReport> {
    need_trials(trials)?;
    if !(gamma > 0.0 && gamma <= 1.0) || n == 0 {
        return Err(Error::ParameterOutOfRange(format!(
            "need gamma in (0, 1] and n >= 1, got {gamma}, {n}"
        )));
    }
    let q = ((gamma * n as f64).round() as usize).max(1);
    // ln q vanishes at q = 1, so the envelope uses at least ln 2.
    let envelope = 6.0 * ((q.max(2) as f64).ln() / n as f64).sqrt();
    let results: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 3, t);
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for _ in 0..q {
                let x = randmat::chi_square(n as f64, &mut rng)? / n as f64;
                hi = hi.max(x);
                lo = lo.min(x);
            }
            Ok((hi - 1.0, 1.0 - lo))
        })
        .collect();
    let devs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = devs
        .iter()
        .map(|&(up, down)| up <= envelope && down <= envelope)
        .collect();
    Ok(CheckReport {
        check_name: "chisq_extremes".into(),
        trials,
        pass_fraction: fraction(&passes),
        nominal_bound: envelope,
        required_pass_fraction: Some(0.9),
        details: BTreeMap::from([
            ("q".into(), q as f64),
            (
                "mean_max_deviation".into(),
                stats::mean(&devs.iter().map(|d| d.0).collect::<Vec<_>>()),
            ),
            (
                "mean_min_deviation".into(),
                stats::mean(&devs.iter().map(|d| d.1).collect::<Vec<_>>()),
            ),
        ]),
    })
}

/// Limit of `‖YᵀY/(n−1) − I‖₂` for `n×⌊γn⌋` Gaussian `Y`.
pub fn bai_yin_limit(gamma: f64) -> f64 {
    gamma + 2.0 * gamma.sqrt()
}

/// Bai–Yin tolerance and the sample size from which it is asserted.
pub const BAI_YIN_TOLERANCE: f64 = 0.1;
pub const BAI_YIN_MIN_N: usize = 2000;

/// Per trial `|‖YᵀY/(n−1) − I‖₂ − (γ + 2√γ)|`; asserted only for
/// `n ≥ 2000`.
pub fn check_bai_yin(n: usize, gamma: f64, trials: usize, seed: u64) -> Result<CheckReport> {
    need_trials(trials)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::ParameterOutOfRange(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let q = (gamma * n as f64).floor() as usize;
    if q == 0 || n < 2 {
        return Err(Error::ParameterOutOfRange(format!(
            "floor(gamma n) = 0 at n = {n}"
        )));
    }
    let limit = bai_yin_limit(gamma);
    let results: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 4, t);
            let y = randmat::std_normal_matrix(n, q, &mut rng)?;
            let s = y.tr_mul(&y) / (n - 1) as f64 - Matrix::identity(q, q);
            Ok((spectral_norm(&s) - limit).abs())
        })
        .collect();
    let devs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let passes: Vec<bool> = devs.iter().map(|d| *d <= BAI_YIN_TOLERANCE).collect();
    Ok(CheckReport {
        check_name: "bai_yin".into(),
        trials,
        pass_fraction: fraction(&passes),
        nominal_bound: BAI_YIN_TOLERANCE,
        required_pass_fraction: (n >= BAI_YIN_MIN_N).then_some(0.9),
        details: BTreeMap::from([
            ("limit".into(), limit),
            ("mean_deviation".into(), stats::mean(&devs)),
            (
                "max_deviation".into(),
                devs.iter().cloned().fold(0.0, f64::max),
            ),
        ]),
    })
}

/// With `ν = 1` the posterior mean of `Σ` is `(S_Y + c·E[Δ|Y])/(n − 1)`.
/// Runs one chain on standard Gaussian data and compares, per entry, the
/// plain average of the `Σ` draws against that formula evaluated at the
/// average scale draw, within 4 batch-means standard errors.
pub fn check_posterior_mean_formula(
    n: usize,
    q: usize,
    prior: &Prior,
    chain: &ChainConfig,
    seed: u64,
) -> Result<CheckReport> {
    if prior.nu() != 1.0 {
        return Err(Error::Precondition(format!(
            "posterior mean formula needs nu = 1, got {}",
            prior.nu()
        )));
    }
    if prior.q() != q {
        return Err(Error::DimensionMismatch(format!(
            "prior has q = {}, requested q = {q}",
            prior.q()
        )));
    }
    let mut rng = trial_rng(seed, 5, 0);
    let y = randmat::std_normal_matrix(n, q, &mut rng)?;
    let stats = compute_stats(&Dataset::iid(y)?, 0.0)?;
    let cfg = ChainConfig {
        seed,
        stream_id: crate::randmat::derive_stream_id(seed, &[5, 1]),
        ..*chain
    };
    let samples = gibbs::run_chain(&stats, prior, &cfg)?;
    let (passes, worst) = formula_agreement(&samples, &stats, prior);
    Ok(CheckReport {
        check_name: "posterior_mean_formula".into(),
        trials: passes.len(),
        pass_fraction: fraction(&passes),
        nominal_bound: 4.0,
        required_pass_fraction: Some(1.0),
        details: BTreeMap::from([
            ("kept".into(), samples.len() as f64),
            ("max_abs_z".into(), worst),
        ]),
    })
}

fn formula_agreement(
    samples: &PosteriorSamples,
    stats: &SufficientStats,
    prior: &Prior,
) -> (Vec<bool>, f64) {
    let q = stats.q;
    let formula: Vec<Matrix> = (0..samples.len())
        .map(|k| gibbs::conditional_mean(stats, prior, &samples.scale.as_matrix(k)))
        .collect();
    let mut passes = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..q {
        for j in i..q {
            let diffs: Vec<f64> = samples
                .sigma
                .iter()
                .zip(&formula)
                .map(|(s, f)| s.as_matrix()[(i, j)] - f[(i, j)])
                .collect();
            let se = stats::batch_means_se(&diffs, 40);
            let z = if se > 0.0 {
                stats::mean(&diffs).abs() / se
            } else {
                0.0
            };
            worst = worst.max(z);
            passes.push(z <= 4.0);
        }
    }
    (passes, worst)
}

pub const IDENTITY_INSTANCES: usize = 500;

/// Woodbury form of `S_Y` and the Schur determinant identity on
/// `instances` random problems each.
pub fn check_identities_with(instances: usize, seed: u64) -> Result<CheckReport> {
    need_trials(instances)?;
    let woodbury: Vec<Result<bool>> = (0..instances)
        .into_par_iter()
        .map(|t| {
            use rand::Rng;
            let mut rng = trial_rng(seed, 6, t);
            let p = rng.random_range(1..=5usize);
            let q = rng.random_range(1..=5usize);
            let n = rng.random_range(p + q + 2..=40usize);
            let lambda = randmat::lognormal(0.0, 1.5, &mut rng)?;
            let x = randmat::std_normal_matrix(n, p, &mut rng)?;
            let y = randmat::std_normal_matrix(n, q, &mut rng)?;
            woodbury_check(&compute_stats(&Dataset::new(y, Some(x))?, lambda)?)
        })
        .collect();
    let schur: Vec<Result<bool>> = (0..instances)
        .into_par_iter()
        .map(|t| {
            use rand::Rng;
            let mut rng = trial_rng(seed, 7, t);
            let q = rng.random_range(2..=10usize);
            let s = randmat::wishart(q as f64 + 2.0, &PdMatrix::identity(q), &mut rng)?;
            let delta1 = randmat::lognormal(0.0, 1.0, &mut rng)?;
            let rest = (1..q)
                .map(|_| randmat::lognormal(0.0, 1.0, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            schur_det_identity_check(&s, delta1, &rest)
        })
        .collect();
    let w = woodbury.into_iter().collect::<Result<Vec<_>>>()?;
    let s = schur.into_iter().collect::<Result<Vec<_>>>()?;
    let all: Vec<bool> = w.iter().chain(&s).copied().collect();
    Ok(CheckReport {
        check_name: "identities".into(),
        trials: all.len(),
        pass_fraction: fraction(&all),
        nominal_bound: 1.0,
        required_pass_fraction: Some(1.0),
        details: BTreeMap::from([
            ("woodbury_pass_fraction".into(), fraction(&w)),
            ("schur_pass_fraction".into(), fraction(&s)),
        ]),
    })
}

pub fn check_identities(seed: u64) -> Result<CheckReport> {
    check_identities_with(IDENTITY_INSTANCES, seed)
}

/// Report-only: mean of `‖B̂_LS − B0‖₂·(n/q)^{1/4}` per sample size for
/// Gaussian regressions with standard normal `B0` and identity noise.
/// A stable sequence across `n` is the expected behaviour.
pub fn check_least_squares_deviation(
    n_grid: &[usize],
    p: usize,
    q: usize,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    need_trials(trials)?;
    if n_grid.is_empty() || n_grid.iter().any(|&n| n <= p + q) || p == 0 || q == 0 {
        return Err(Error::ParameterOutOfRange(
            "need p, q >= 1 and every n > p + q".into(),
        ));
    }
    let mut details = BTreeMap::new();
    for (k, &n) in n_grid.iter().enumerate() {
        let results: Vec<Result<f64>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = RngStream::for_task(seed, &[8, k as u64, t as u64]);
                let (d, truth) = crate::experiments::generate_regression_data(
                    n,
                    p,
                    q,
                    1.0,
                    &PdMatrix::identity(q),
                    &mut rng,
                )?;
                let stats = compute_stats(&d, 0.0)?;
                let b_ls = stats.b_ls.ok_or(Error::SingularDesign)?;
                let b0 = truth.b0.expect("regression data carries B0");
                Ok(spectral_norm(&(b_ls - b0)) * (n as f64 / q as f64).powf(0.25))
            })
            .collect();
        let vals = results.into_iter().collect::<Result<Vec<_>>>()?;
        details.insert(format!("scaled_deviation_n{n}"), stats::mean(&vals));
    }
    Ok(CheckReport {
        check_name: "least_squares_deviation".into(),
        trials: trials * n_grid.len(),
        pass_fraction: 1.0,
        nominal_bound: f64::NAN,
        required_pass_fraction: None,
        details,
    })
}
