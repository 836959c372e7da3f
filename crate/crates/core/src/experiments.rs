//! Simulation studies: posterior contraction when `q_n/n → 0` and the
//! non-vanishing error of the posterior mean when `q_n/n → γ > 0`.
//!
//! A plan expands into independent tasks over `(prior, n, replicate)`. Every
//! task derives its own random streams from the master seed and its indices,
//! so results do not depend on how tasks are scheduled. All priors at the
//! same `(n, replicate)` see the same dataset.

use std::io::{Read, Write};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{self, ChainConfig};
use crate::linalg::{spectral_norm, Matrix, PdMatrix};
use crate::model::{Dataset, TrueParams};
use crate::priors::{preset, PresetOverrides, PriorPreset};
use crate::randmat::{self, derive_stream_id, RngStream};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sigma0Spec {
    Identity {},
    /// Entries `rho^{|i−j|}`.
    Toeplitz {
        rho: f64,
    },
    /// `U·diag(λ)·Uᵀ` with Haar `U` and `λ_i ~ Uniform(lo, hi)`.
    Spectral {
        lo: f64,
        hi: f64,
    },
}

impl Sigma0Spec {
    pub const TOEPLITZ: Sigma0Spec = Sigma0Spec::Toeplitz { rho: 0.9 };
    pub const SPECTRAL: Sigma0Spec = Sigma0Spec::Spectral { lo: 1.0, hi: 2.0 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Sigma0Spec::Identity {} => Ok(()),
            Sigma0Spec::Toeplitz { rho } if rho > 0.0 && rho < 1.0 => Ok(()),
            Sigma0Spec::Spectral { lo, hi } if lo > 0.0 && hi >= lo && hi.is_finite() => Ok(()),
            s => Err(Error::ParameterOutOfRange(format!(
                "invalid Sigma0 spec {s:?}"
            ))),
        }
    }

    /// Short label used in file names and plot titles.
    pub fn label(&self) -> String {
        match *self {
            Sigma0Spec::Identity {} => "identity".into(),
            Sigma0Spec::Toeplitz { rho } => format!("toeplitz-{rho}"),
            Sigma0Spec::Spectral { lo, hi } => format!("spectral-{lo}-{hi}"),
        }
    }
}

/// Dimension growth `n ↦ q_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QSchedule {
    /// `q_n = max(1, ⌈n^exponent⌉)`.
    #[serde(rename = "power")]
    Power(f64),
    /// `q_n = round(γ·n)`.
    #[serde(rename = "gamma")]
    Linear(f64),
}

impl QSchedule {
    pub fn q_for(&self, n: usize) -> usize {
        match *self {
            // The small slack keeps exact powers such as √2500 from rounding up.
            QSchedule::Power(e) => ((n as f64).powf(e) - 1e-9).ceil().max(1.0) as usize,
            QSchedule::Linear(g) => (g * n as f64).round() as usize,
        }
    }

    pub fn validate(&self, n_grid: &[usize]) -> Result<()> {
        match *self {
            QSchedule::Power(e) if !(e > 0.0 && e < 1.0) => {
                return Err(Error::Plan(format!(
                    "power exponent must lie in (0, 1), got {e}"
                )))
            }
            QSchedule::Linear(g) if !(g > 0.0) || !g.is_finite() => {
                return Err(Error::Plan(format!("gamma must be positive, got {g}")))
            }
            _ => {}
        }
        for &n in n_grid {
            let q = self.q_for(n);
            if q < 1 {
                return Err(Error::Plan(format!("q_n = 0 at n = {n}")));
            }
            if q >= n {
                return Err(Error::Plan(format!("q_n = {q} is not below n = {n}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorDist {
    #[default]
    #[serde(rename = "gaussian")]
    Gaussian,
    /// `Σ0^{1/2}·z` with i.i.d. Rademacher `z`.
    #[serde(rename = "rademacher")]
    ScaledRademacher,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    #[default]
    Consistency,
    Inconsistency,
}

fn default_m() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub kind: StudyKind,
    pub n_grid: Vec<usize>,
    pub q_schedule: QSchedule,
    pub sigma0: Sigma0Spec,
    pub priors: Vec<PriorPreset>,
    pub replicates: usize,
    pub chain: ChainConfig,
    /// Tail threshold is `m·√(q_n/n)`.
    #[serde(rename = "M", default = "default_m")]
    pub m: f64,
    #[serde(rename = "seed")]
    pub master_seed: u64,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub error_dist: ErrorDist,
    /// Report per-row task time. Off by default so tables are byte-stable.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Posterior mean from conditional means (true) or from raw draws.
    #[serde(default = "default_true")]
    pub rao_blackwell: bool,
}

impl ExperimentPlan {
    /// A plan with `M = 2`, Gaussian errors and default execution knobs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: StudyKind,
        n_grid: Vec<usize>,
        q_schedule: QSchedule,
        sigma0: Sigma0Spec,
        priors: Vec<PriorPreset>,
        replicates: usize,
        chain: ChainConfig,
        master_seed: u64,
    ) -> Self {
        Self {
            kind,
            n_grid,
            q_schedule,
            sigma0,
            priors,
            replicates,
            chain,
            m: default_m(),
            master_seed,
            workers: 0,
            error_dist: ErrorDist::Gaussian,
            record_wall_time: false,
            rao_blackwell: true,
        }
    }

    pub fn with_m(mut self, m: f64) -> Self {
        self.m = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::Plan("n_grid is empty".into()));
        }
        if self.n_grid[0] < 2 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan(
                "n_grid must be strictly ascending with n >= 2".into(),
            ));
        }
        if self.priors.is_empty() {
            return Err(Error::Plan("no priors given".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Plan("replicates must be at least 1".into()));
        }
        if !(self.m > 0.0) || !self.m.is_finite() {
            return Err(Error::Plan(format!("M must be positive, got {}", self.m)));
        }
        self.chain
            .validate()
            .map_err(|e| Error::Plan(e.to_string()))?;
        self.sigma0
            .validate()
            .map_err(|e| Error::Plan(e.to_string()))?;
        self.q_schedule.validate(&self.n_grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub prior_name: String,
    pub n: usize,
    pub q_n: usize,
    pub replicates_done: usize,
    pub mean_tail_prob: f64,
    pub mean_rel_error: f64,
    pub se_tail_prob: f64,
    pub se_rel_error: f64,
    pub wall_time_s: f64,
}

pub const METRIC_HEADER: [&str; 9] = [
    "prior_name",
    "n",
    "q_n",
    "replicates_done",
    "mean_tail_prob",
    "mean_rel_error",
    "se_tail_prob",
    "se_rel_error",
    "wall_time_s",
];

pub fn make_sigma0<R: Rng + ?Sized>(spec: &Sigma0Spec, q: usize, rng: &mut R) -> Result<PdMatrix> {
    spec.validate()?;
    if q == 0 {
        return Err(Error::ParameterOutOfRange("q must be at least 1".into()));
    }
    match *spec {
        Sigma0Spec::Identity {} => Ok(PdMatrix::identity(q)),
        Sigma0Spec::Toeplitz { rho } => {
            PdMatrix::new(Matrix::from_fn(q, q, |i, j| rho.powi(i.abs_diff(j) as i32)))
        }
        Sigma0Spec::Spectral { lo, hi } => {
            let u = haar_orthogonal(q, rng)?;
            let eig: Vec<f64> = (0..q)
                .map(|_| {
                    if hi > lo {
                        randmat::uniform(lo, hi, rng)
                    } else {
                        Ok(lo)
                    }
                })
                .collect::<Result<_>>()?;
            let scaled = Matrix::from_fn(q, q, |i, j| u[(i, j)] * eig[j]);
            PdMatrix::new(scaled * u.transpose())
        }
    }
}

/// Q factor of a Gaussian matrix with the signs of `R`'s diagonal folded in,
/// which makes it Haar distributed.
pub fn haar_orthogonal<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Result<Matrix> {
    let qr = randmat::std_normal_matrix(q, q, rng)?.qr();
    let r = qr.r();
    let mut u = qr.q();
    for j in 0..q {
        if r[(j, j)] < 0.0 {
            u.column_mut(j).neg_mut();
        }
    }
    Ok(u)
}

/// Symmetric square root through the eigendecomposition.
fn sqrt_pd(m: &PdMatrix) -> Matrix {
    let eig = m.as_matrix().clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let q = m.dim();
    let scaled = Matrix::from_fn(q, q, |i, j| v[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt());
    crate::linalg::symmetrize_unchecked(scaled * v.transpose())
}

/// `n` rows `Σ0^{1/2}·z_i`; `z_i` standard normal or Rademacher.
pub fn generate_iid_data<R: Rng + ?Sized>(
    n: usize,
    sigma0: &PdMatrix,
    error_dist: ErrorDist,
    rng: &mut R,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::ParameterOutOfRange(format!("need n >= 2, got {n}")));
    }
    let z = draw_noise(n, sigma0.dim(), error_dist, rng)?;
    Dataset::iid(z * sqrt_pd(sigma0))
}

fn draw_noise<R: Rng + ?Sized>(
    n: usize,
    q: usize,
    error_dist: ErrorDist,
    rng: &mut R,
) -> Result<Matrix> {
    match error_dist {
        ErrorDist::Gaussian => randmat::std_normal_matrix(n, q, rng),
        ErrorDist::ScaledRademacher => Ok(Matrix::from_fn(n, q, |_, _| {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        })),
    }
}

/// `Y = X·B0 + E` with standard normal `X`, `B0` entries `N(0, b0_scale²)`
/// and Gaussian rows of `E` with covariance `sigma0`.
pub fn generate_regression_data<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    q: usize,
    b0_scale: f64,
    sigma0: &PdMatrix,
    rng: &mut R,
) -> Result<(Dataset, TrueParams)> {
    if p == 0 || n <= p {
        return Err(Error::ParameterOutOfRange(format!(
            "need 1 <= p < n, got p = {p}, n = {n}"
        )));
    }
    if sigma0.dim() != q {
        return Err(Error::ParameterOutOfRange(format!(
            "Sigma0 is {0}x{0}, q = {q}",
            sigma0.dim()
        )));
    }
    if !(b0_scale >= 0.0) || !b0_scale.is_finite() {
        return Err(Error::ParameterOutOfRange(format!(
            "b0_scale must be >= 0, got {b0_scale}"
        )));
    }
    let x = randmat::std_normal_matrix(n, p, rng)?;
    let b0 = randmat::std_normal_matrix(p, q, rng)? * b0_scale;
    let e = randmat::std_normal_matrix(n, q, rng)? * sigma0.factor().transpose();
    let y = &x * &b0 + e;
    let truth = TrueParams {
        b0: Some(b0),
        sigma0: sigma0.clone(),
        k_sigma: TrueParams::eigenvalue_bound(sigma0),
        sigma0_subg: 1.0,
    };
    Ok((Dataset::new(y, Some(x))?, truth))
}

// Stream-path tags.
const DATA_STREAM: u64 = 0;
const CHAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy)]
struct Task {
    prior_idx: usize,
    n_idx: usize,
    replicate: usize,
}

#[derive(Debug, Clone, Copy)]
struct TaskOutcome {
    tail_prob: f64,
    rel_error: f64,
    seconds: f64,
}

fn run_task(plan: &ExperimentPlan, task: Task) -> Result<TaskOutcome> {
    let start = Instant::now();
    let n = plan.n_grid[task.n_idx];
    let q = plan.q_schedule.q_for(n);
    let mut data_rng = RngStream::for_task(
        plan.master_seed,
        &[DATA_STREAM, task.n_idx as u64, task.replicate as u64],
    );
    let sigma0 = make_sigma0(&plan.sigma0, q, &mut data_rng)?;
    let data = generate_iid_data(n, &sigma0, plan.error_dist, &mut data_rng)?;
    let stats = crate::model::compute_stats(&data, 0.0)?;

    let prior = preset(plan.priors[task.prior_idx], q, &PresetOverrides::default())?;
    let cfg = ChainConfig {
        seed: plan.master_seed,
        stream_id: derive_stream_id(
            plan.master_seed,
            &[
                CHAIN_STREAM,
                task.prior_idx as u64,
                task.n_idx as u64,
                task.replicate as u64,
            ],
        ),
        sample_b: false,
        ..plan.chain
    };
    let samples = gibbs::run_chain(&stats, &prior, &cfg)?;
    let threshold = plan.m * (q as f64 / n as f64).sqrt();
    let tail_prob = gibbs::tail_probability(&samples, &sigma0, threshold)?;
    let estimate = gibbs::posterior_mean_sigma(&samples, &stats, &prior, plan.rao_blackwell)?;
    let rel_error = spectral_norm(&(estimate.as_matrix() - sigma0.as_matrix()))
        / spectral_norm(sigma0.as_matrix());
    Ok(TaskOutcome {
        tail_prob,
        rel_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn execute(plan: &ExperimentPlan) -> Result<Vec<MetricRow>> {
    plan.validate()?;
    let mut tasks = Vec::new();
    for prior_idx in 0..plan.priors.len() {
        for n_idx in 0..plan.n_grid.len() {
            for replicate in 0..plan.replicates {
                tasks.push(Task {
                    prior_idx,
                    n_idx,
                    replicate,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers)
        .build()
        .map_err(|e| Error::Plan(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<TaskOutcome>> =
        pool.install(|| tasks.par_iter().map(|t| run_task(plan, *t)).collect());

    let mut rows = Vec::with_capacity(plan.priors.len() * plan.n_grid.len());
    for (chunk_idx, chunk) in outcomes.chunks(plan.replicates).enumerate() {
        let prior = plan.priors[chunk_idx / plan.n_grid.len()];
        let n = plan.n_grid[chunk_idx % plan.n_grid.len()];
        let mut tail = Vec::new();
        let mut rel = Vec::new();
        let mut seconds = 0.0;
        for (rep, outcome) in chunk.iter().enumerate() {
            match outcome {
                Ok(o) => {
                    tail.push(o.tail_prob);
                    rel.push(o.rel_error);
                    seconds += o.seconds;
                }
                Err(e) => log::warn!("{prior} n={n} replicate {rep} failed: {e}"),
            }
        }
        rows.push(MetricRow {
            prior_name: prior.to_string(),
            n,
            q_n: plan.q_schedule.q_for(n),
            replicates_done: tail.len(),
            mean_tail_prob: stats::mean(&tail),
            mean_rel_error: stats::mean(&rel),
            se_tail_prob: stats::standard_error(&tail),
            se_rel_error: stats::standard_error(&rel),
            wall_time_s: if plan.record_wall_time { seconds } else { 0.0 },
        });
    }
    Ok(rows)
}

/// Requires a power schedule.
pub fn run_consistency(plan: &ExperimentPlan) -> Result<Vec<MetricRow>> {
    if !matches!(plan.q_schedule, QSchedule::Power(_)) {
        return Err(Error::Plan(
            "consistency study needs a power q schedule".into(),
        ));
    }
    execute(plan)
}

/// Requires a linear schedule and identity `Σ0`.
pub fn run_inconsistency(plan: &ExperimentPlan) -> Result<Vec<MetricRow>> {
    if !matches!(plan.q_schedule, QSchedule::Linear(_)) {
        return Err(Error::Plan(
            "inconsistency study needs a linear (gamma) q schedule".into(),
        ));
    }
    if plan.sigma0 != (Sigma0Spec::Identity {}) {
        return Err(Error::Plan(
            "inconsistency study needs Sigma0 = identity".into(),
        ));
    }
    execute(plan)
}

/// Dispatches on `plan.kind`.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<MetricRow>> {
    match plan.kind {
        StudyKind::Consistency => run_consistency(plan),
        StudyKind::Inconsistency => run_inconsistency(plan),
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.prior_name.clone(),
            r.n.to_string(),
            r.q_n.to_string(),
            r.replicates_done.to_string(),
            r.mean_tail_prob.to_string(),
            r.mean_rel_error.to_string(),
            r.se_tail_prob.to_string(),
            r.se_rel_error.to_string(),
            r.wall_time_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRIC_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", METRIC_HEADER.join(",")),
        });
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e: csv::Error| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Least-squares slope of `ln mean_rel_error` on `ln √(q_n/n)` over rows
/// of a single prior.
pub fn contraction_slope(rows: &[MetricRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_rel_error > 0.0)
        .map(|r| {
            (
                (r.q_n as f64 / r.n as f64).sqrt().ln(),
                r.mean_rel_error.ln(),
            )
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigvals_sym;
    use approx::assert_relative_eq;

    fn smoke_plan() -> ExperimentPlan {
        ExperimentPlan::new(
            StudyKind::Consistency,
            vec![50],
            QSchedule::Power(0.2),
            Sigma0Spec::Identity {},
            PriorPreset::ALL.to_vec(),
            1,
            ChainConfig::new(20, 10, 1, 0),
            3,
        )
    }

    #[test]
    fn q_schedules() {
        assert_eq!(QSchedule::Power(0.5).q_for(50), 8);
        assert_eq!(QSchedule::Power(0.5).q_for(2000), 45);
        assert_eq!(QSchedule::Power(0.5).q_for(2500), 50);
        assert_eq!(QSchedule::Power(0.25).q_for(1), 1);
        assert_eq!(QSchedule::Linear(0.1).q_for(1000), 100);
        assert_eq!(QSchedule::Linear(0.075).q_for(200), 15);
        assert!(QSchedule::Linear(0.001).validate(&[200]).is_err());
        assert!(QSchedule::Power(1.0).validate(&[200]).is_err());
    }

    #[test]
    fn sigma0_forms() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(
            make_sigma0(&Sigma0Spec::Identity {}, 4, &mut rng).unwrap(),
            PdMatrix::identity(4)
        );
        let t = make_sigma0(&Sigma0Spec::TOEPLITZ, 3, &mut rng).unwrap();
        assert_relative_eq!(t.as_matrix()[(0, 2)], 0.81, epsilon = 1e-15);
        let s = make_sigma0(&Sigma0Spec::SPECTRAL, 10, &mut rng).unwrap();
        let ev = eigvals_sym(s.as_matrix());
        assert!(ev[0] >= 1.0 - 1e-10 && ev[9] <= 2.0 + 1e-10);
        assert!(TrueParams::eigenvalue_bound(&s) >= 0.5);
        let u = haar_orthogonal(10, &mut rng).unwrap();
        assert!((u.transpose() * &u - Matrix::identity(10, 10)).abs().max() < 1e-10);
        assert!(make_sigma0(&Sigma0Spec::Toeplitz { rho: 1.0 }, 3, &mut rng).is_err());
    }

    #[test]
    fn haar_first_column_is_uniform_on_sphere() {
        // For Haar U, U[0,0]² ~ Beta(1/2, (q−1)/2); its mean is 1/q.
        let mut rng = RngStream::new(2, 0);
        let q = 4;
        let xs: Vec<f64> = (0..20_000)
            .map(|_| haar_orthogonal(q, &mut rng).unwrap()[(0, 0)])
            .collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((stats::mean(&sq) - 0.25).abs() <= 4.0 * stats::standard_error(&sq));
        // sign symmetry
        assert!(stats::mean(&xs).abs() <= 4.0 * stats::standard_error(&xs));
    }

    #[test]
    fn iid_data_covariance() {
        let mut rng = RngStream::new(3, 0);
        let s0 = PdMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])).unwrap();
        let d = generate_iid_data(100_000, &s0, ErrorDist::Gaussian, &mut rng).unwrap();
        let y = d.y();
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let prods: Vec<f64> = (0..y.nrows()).map(|r| y[(r, i)] * y[(r, j)]).collect();
            let se = stats::standard_error(&prods);
            assert!(
                (stats::mean(&prods) - s0.as_matrix()[(i, j)]).abs() <= 5.0 * se,
                "({i},{j})"
            );
        }
        let r = generate_iid_data(
            1000,
            &PdMatrix::identity(3),
            ErrorDist::ScaledRademacher,
            &mut rng,
        )
        .unwrap();
        assert!(r.y().iter().all(|v| (v.abs() - 1.0).abs() < 1e-12));
        let a = generate_iid_data(10, &s0, ErrorDist::Gaussian, &mut RngStream::new(4, 4)).unwrap();
        let b = generate_iid_data(10, &s0, ErrorDist::Gaussian, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regression_data() {
        let mut rng = RngStream::new(5, 0);
        let (d, truth) =
            generate_regression_data(2000, 20, 3, 0.0, &PdMatrix::identity(3), &mut rng).unwrap();
        assert_eq!(truth.b0.as_ref().unwrap().abs().max(), 0.0);
        let x = d.x().unwrap();
        let ev = eigvals_sym(&(x.transpose() * x / 2000.0));
        assert!(ev[0] > 0.5 && ev[19] < 1.7, "{ev:?}");
        let stats = crate::model::compute_stats(&d, 1.0).unwrap();
        assert!(stats.b_ls.unwrap().abs().max() < 0.15);
        assert!(
            generate_regression_data(10, 10, 2, 1.0, &PdMatrix::identity(2), &mut rng).is_err()
        );
    }

    #[test]
    fn smoke_plan_emits_a_row_per_prior() {
        let rows = run_consistency(&smoke_plan()).unwrap();
        assert_eq!(rows.len(), 5);
        for (r, p) in rows.iter().zip(PriorPreset::ALL) {
            assert_eq!(r.prior_name, p.as_str());
            assert_eq!((r.n, r.q_n, r.replicates_done), (50, 3, 1));
            assert!((0.0..=1.0).contains(&r.mean_tail_prob));
            assert!(r.mean_rel_error >= 0.0);
            assert_eq!(r.se_tail_prob, 0.0);
            assert_eq!(r.wall_time_s, 0.0);
        }
    }

    #[test]
    fn plan_results_do_not_depend_on_worker_count() {
        let mut plan = smoke_plan();
        plan.n_grid = vec![30, 60];
        plan.replicates = 3;
        plan.workers = 1;
        let a = run_consistency(&plan).unwrap();
        plan.workers = 3;
        let b = run_consistency(&plan).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert_eq!(r.replicates_done, 3);
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = smoke_plan();
        p.priors.clear();
        assert!(matches!(run_consistency(&p), Err(Error::Plan(_))));
        let mut p = smoke_plan();
        p.q_schedule = QSchedule::Linear(0.1);
        assert!(matches!(run_consistency(&p), Err(Error::Plan(_))));
        let p = smoke_plan();
        assert!(matches!(run_inconsistency(&p), Err(Error::Plan(_))));
        let mut p = smoke_plan();
        p.q_schedule = QSchedule::Linear(0.1);
        p.sigma0 = Sigma0Spec::TOEPLITZ;
        assert!(matches!(run_inconsistency(&p), Err(Error::Plan(_))));
        let mut p = smoke_plan();
        p.n_grid = vec![50, 40];
        assert!(p.validate().is_err());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![MetricRow {
            prior_name: "IG_DSIW".into(),
            n: 50,
            q_n: 8,
            replicates_done: 20,
            mean_tail_prob: 0.1,
            mean_rel_error: 1.0 / 3.0,
            se_tail_prob: 0.0,
            se_rel_error: 1e-17,
            wall_time_s: 0.0,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "prior_name,n,q_n,replicates_done,mean_tail_prob,mean_rel_error,se_tail_prob,se_rel_error,wall_time_s\n"
        ));
        assert!(text.contains("0.3333333333333333"));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
        assert!(read_metrics_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn plan_json_schema() {
        let json = r#"{
            "kind": "inconsistency",
            "n_grid": [200, 400],
            "q_schedule": {"gamma": 0.1},
            "sigma0": {"identity": {}},
            "priors": ["IG_DSIW", "MATRIX_F"],
            "replicates": 2,
            "chain": {"iterations": 100, "burn_in": 50, "thin": 5},
            "M": 2.0,
            "seed": 7,
            "workers": 2,
            "error_dist": "rademacher"
        }"#;
        let plan: ExperimentPlan = serde_json::from_str(json).unwrap();
        assert_eq!(plan.kind, StudyKind::Inconsistency);
        assert_eq!(plan.q_schedule, QSchedule::Linear(0.1));
        assert_eq!(plan.error_dist, ErrorDist::ScaledRademacher);
        assert!(plan.rao_blackwell);
        let back: ExperimentPlan =
            serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
        let typo = json.replace("\"replicates\"", "\"replicate\"");
        assert!(serde_json::from_str::<ExperimentPlan>(&typo).is_err());
        let toe: Sigma0Spec = serde_json::from_str(r#"{"toeplitz": {"rho": 0.9}}"#).unwrap();
        assert_eq!(toe, Sigma0Spec::TOEPLITZ);
        let pw: QSchedule = serde_json::from_str(r#"{"power": 0.5}"#).unwrap();
        assert_eq!(pw, QSchedule::Power(0.5));
    }

    #[test]
    fn slope_of_exact_rate_is_one() {
        let rows: Vec<MetricRow> = [100usize, 400, 1600]
            .iter()
            .map(|&n| {
                let q = QSchedule::Power(0.5).q_for(n);
                MetricRow {
                    prior_name: "X".into(),
                    n,
                    q_n: q,
                    replicates_done: 1,
                    mean_tail_prob: 0.0,
                    mean_rel_error: 3.0 * (q as f64 / n as f64).sqrt(),
                    se_tail_prob: 0.0,
                    se_rel_error: 0.0,
                    wall_time_s: 0.0,
                }
            })
            .collect();
        assert_relative_eq!(contraction_slope(&rows).unwrap(), 1.0, epsilon = 1e-12);
        assert!(contraction_slope(&rows[..1]).is_none());
    }
}
