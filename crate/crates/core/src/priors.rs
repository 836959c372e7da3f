//! Hyperparameters and mixing densities for the two covariance prior
//! families:
//!
//! * DSIW: `Σ | Δ ~ IW(ν + q − 1, c_ν·Δ)` with `Δ = diag(δ₁…δ_q)` and
//!   independent `δ_i ~ π_i`.
//! * matrix-F: `Σ | Δ̄ ~ IW(ν + q − 1, Δ̄)` with `Δ̄ ~ W(ν*_q, Ψ)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::PdMatrix;
use crate::randmat;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior density `π_i` of one diagonal scale `δ_i`. Every family is
/// supported on the positive reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixingDensity {
    /// Shape/scale parameterisation, mean `shape · scale`.
    Gamma {
        shape: f64,
        scale: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// `N(mu, sigma²)` restricted to `(0, ∞)`.
    TruncatedNormalPositive {
        mu: f64,
        sigma: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl MixingDensity {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MixingDensity::Gamma { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
            MixingDensity::LogNormal { mu, sigma }
            | MixingDensity::TruncatedNormalPositive { mu, sigma } => {
                mu.is_finite() && sigma > 0.0 && sigma.is_finite()
            }
            MixingDensity::Uniform { lo, hi } => lo >= 0.0 && hi > lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ParameterOutOfRange(format!(
                "invalid mixing density {self:?}"
            )))
        }
    }

    /// Log density for already-validated parameters; `−∞` off the support.
    pub(crate) fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            MixingDensity::Gamma { shape, scale } => {
                (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
            }
            MixingDensity::LogNormal { mu, sigma } => {
                let z = (x.ln() - mu) / sigma;
                -x.ln() - sigma.ln() - LN_SQRT_2PI - 0.5 * z * z
            }
            MixingDensity::TruncatedNormalPositive { mu, sigma } => {
                let z = (x - mu) / sigma;
                let mass = Normal::standard().sf(-mu / sigma);
                -sigma.ln() - LN_SQRT_2PI - 0.5 * z * z - mass.ln()
            }
            MixingDensity::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            MixingDensity::Gamma { shape, scale } => randmat::gamma(shape, scale, rng),
            MixingDensity::LogNormal { mu, sigma } => randmat::lognormal(mu, sigma, rng),
            MixingDensity::TruncatedNormalPositive { mu, sigma } => {
                randmat::truncated_normal_positive(mu, sigma, rng)
            }
            MixingDensity::Uniform { lo, hi } => randmat::uniform(lo, hi, rng),
        }
    }

    /// Closed support interval.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            MixingDensity::Uniform { lo, hi } => (lo, hi),
            _ => (0.0, f64::INFINITY),
        }
    }

    /// A point beyond which the density is non-increasing.
    pub fn tail_start(&self) -> f64 {
        match *self {
            MixingDensity::Gamma { shape, scale } => ((shape - 1.0) * scale).max(0.0),
            MixingDensity::LogNormal { mu, sigma } => (mu - sigma * sigma).exp(),
            MixingDensity::TruncatedNormalPositive { mu, .. } => mu.max(0.0),
            MixingDensity::Uniform { lo, .. } => lo,
        }
    }
}

pub fn log_mixing_density(spec: &MixingDensity, x: f64) -> Result<f64> {
    spec.validate()?;
    if x.is_nan() {
        return Err(Error::ParameterOutOfRange("x is NaN".into()));
    }
    Ok(spec.ln_pdf(x))
}

/// Whether the density is non-increasing on a `grid_size`-point log grid
/// over `[k, 10⁶·k]`.
pub fn check_tail_monotone(spec: &MixingDensity, k: f64, grid_size: usize) -> bool {
    if !(k > 0.0) || spec.validate().is_err() {
        return false;
    }
    let grid_size = grid_size.max(2);
    let step = 1e6f64.ln() / (grid_size - 1) as f64;
    let mut prev = spec.ln_pdf(k);
    for i in 1..grid_size {
        let cur = spec.ln_pdf(k * (step * i as f64).exp());
        if cur > prev + 1e-12 * prev.abs().max(1.0) {
            return false;
        }
        prev = cur;
    }
    true
}

const TAIL_GRID: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsiwPrior {
    pub nu: f64,
    pub c_nu: f64,
    pub mixing: Vec<MixingDensity>,
}

impl DsiwPrior {
    pub fn new(nu: f64, c_nu: f64, mixing: Vec<MixingDensity>) -> Result<Self> {
        let prior = Self { nu, c_nu, mixing };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::ParameterOutOfRange(format!(
                "nu must be positive, got {}",
                self.nu
            )));
        }
        if !(self.c_nu > 0.0) || !self.c_nu.is_finite() {
            return Err(Error::ParameterOutOfRange(format!(
                "c_nu must be positive, got {}",
                self.c_nu
            )));
        }
        if self.mixing.is_empty() {
            return Err(Error::Dimension(
                "DSIW prior needs one mixing density per response".into(),
            ));
        }
        for m in &self.mixing {
            m.validate()?;
            let k = m.tail_start().max(1e-12) * (1.0 + 1e-9);
            if !check_tail_monotone(m, k, TAIL_GRID) {
                return Err(Error::ParameterOutOfRange(format!(
                    "{m:?} has no monotone tail"
                )));
            }
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.mixing.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFPrior {
    pub nu: f64,
    pub nu_q_star: f64,
    pub psi: PdMatrix,
}

impl MatrixFPrior {
    pub fn new(nu: f64, nu_q_star: f64, psi: PdMatrix) -> Result<Self> {
        let prior = Self { nu, nu_q_star, psi };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::ParameterOutOfRange(format!(
                "nu must be positive, got {}",
                self.nu
            )));
        }
        let q = self.psi.dim();
        if !(self.nu_q_star > q as f64 - 1.0) || !self.nu_q_star.is_finite() {
            return Err(Error::DegreesOfFreedomTooSmall {
                df: self.nu_q_star,
                dim: q,
            });
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.psi.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Dsiw(DsiwPrior),
    MatrixF(MatrixFPrior),
}

impl Prior {
    pub fn nu(&self) -> f64 {
        match self {
            Prior::Dsiw(p) => p.nu,
            Prior::MatrixF(p) => p.nu,
        }
    }

    pub fn q(&self) -> usize {
        match self {
            Prior::Dsiw(p) => p.q(),
            Prior::MatrixF(p) => p.q(),
        }
    }
}

/// Named prior configurations from the literature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PriorPreset {
    #[serde(rename = "IG_DSIW")]
    IgDsiw,
    #[serde(rename = "LN_DSIW")]
    LnDsiw,
    #[serde(rename = "TN_DSIW")]
    TnDsiw,
    #[serde(rename = "U_DSIW")]
    UDsiw,
    #[serde(rename = "MATRIX_F")]
    MatrixF,
}

impl PriorPreset {
    pub const ALL: [PriorPreset; 5] = [
        PriorPreset::IgDsiw,
        PriorPreset::LnDsiw,
        PriorPreset::TnDsiw,
        PriorPreset::UDsiw,
        PriorPreset::MatrixF,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PriorPreset::IgDsiw => "IG_DSIW",
            PriorPreset::LnDsiw => "LN_DSIW",
            PriorPreset::TnDsiw => "TN_DSIW",
            PriorPreset::UDsiw => "U_DSIW",
            PriorPreset::MatrixF => "MATRIX_F",
        }
    }
}

impl fmt::Display for PriorPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        PriorPreset::ALL
            .into_iter()
            .find(|p| p.as_str() == key)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Default half-t scale `A_i` of the IG-DSIW mixing density.
pub const DEFAULT_HALF_T_SCALE: f64 = 10.0;
pub const DEFAULT_TN_SIGMA: f64 = 10.0;
pub const DEFAULT_UNIFORM_UPPER: f64 = 100.0;

/// Optional replacements for preset hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetOverrides {
    pub nu: Option<f64>,
    pub c_nu: Option<f64>,
    /// IG-DSIW scale `A_i` (mixing is `Gamma(1/2, A_i²)`).
    pub half_t_scale: Option<f64>,
    /// Replaces the mixing density of every coordinate.
    pub mixing: Option<MixingDensity>,
    pub nu_q_star: Option<f64>,
    pub psi: Option<PdMatrix>,
}

/// Builds a named preset for `q` responses.
///
/// | preset   | ν | c_ν | π_i                         |
/// |----------|---|-----|-----------------------------|
/// | IG_DSIW  | 2 | 2ν  | Gamma(½, A²), A = 10        |
/// | LN_DSIW  | 2 | 1   | LogNormal(0, 1)             |
/// | TN_DSIW  | 2 | 1   | N⁺(0, 10²)                  |
/// | U_DSIW   | 2 | 1   | Uniform(0, 100)             |
///
/// MATRIX_F uses ν = 1, ν*_q = q, Ψ = I_q.
pub fn preset(name: PriorPreset, q: usize, overrides: &PresetOverrides) -> Result<Prior> {
    if q == 0 {
        return Err(Error::Dimension("q must be at least 1".into()));
    }
    if name == PriorPreset::MatrixF {
        let psi = overrides
            .psi
            .clone()
            .unwrap_or_else(|| PdMatrix::identity(q));
        if psi.dim() != q {
            return Err(Error::DimensionMismatch(format!(
                "Psi is {0}x{0}, q = {q}",
                psi.dim()
            )));
        }
        return Ok(Prior::MatrixF(MatrixFPrior::new(
            overrides.nu.unwrap_or(1.0),
            overrides.nu_q_star.unwrap_or(q as f64),
            psi,
        )?));
    }
    let nu = overrides.nu.unwrap_or(2.0);
    let (c_nu, mixing) = match name {
        PriorPreset::IgDsiw => {
            let a = overrides.half_t_scale.unwrap_or(DEFAULT_HALF_T_SCALE);
            (
                2.0 * nu,
                MixingDensity::Gamma {
                    shape: 0.5,
                    scale: a * a,
                },
            )
        }
        PriorPreset::LnDsiw => (
            1.0,
            MixingDensity::LogNormal {
                mu: 0.0,
                sigma: 1.0,
            },
        ),
        PriorPreset::TnDsiw => (
            1.0,
            MixingDensity::TruncatedNormalPositive {
                mu: 0.0,
                sigma: DEFAULT_TN_SIGMA,
            },
        ),
        PriorPreset::UDsiw => (
            1.0,
            MixingDensity::Uniform {
                lo: 0.0,
                hi: DEFAULT_UNIFORM_UPPER,
            },
        ),
        PriorPreset::MatrixF => unreachable!(),
    };
    let c_nu = overrides.c_nu.unwrap_or(c_nu);
    let mixing = overrides.mixing.unwrap_or(mixing);
    Ok(Prior::Dsiw(DsiwPrior::new(nu, c_nu, vec![mixing; q])?))
}

/// Preset by name, e.g. `"IG_DSIW"`.
pub fn preset_by_name(name: &str, q: usize, overrides: &PresetOverrides) -> Result<Prior> {
    preset(name.parse()?, q, overrides)
}
