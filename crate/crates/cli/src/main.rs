mod svg;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use covpost::experiments::{
    self, ErrorDist, ExperimentPlan, MetricRow, QSchedule, Sigma0Spec, StudyKind,
};
use covpost::gibbs::{self, ChainConfig};
use covpost::model::{compute_stats, Dataset};
use covpost::priors::{preset, PresetOverrides, PriorPreset};
use covpost::randmat::RngStream;
use covpost::verify::{self, CheckReport, RowMode};

#[derive(Parser)]
#[command(
    name = "covpost",
    version,
    about = "Covariance posteriors under scale-mixed inverse-Wishart and matrix-F priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an i.i.d. dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Run a Gibbs sampler on a dataset and write a posterior summary.
    Fit(FitArgs),
    /// Run a consistency or inconsistency study from a JSON plan.
    Experiment(ExperimentArgs),
    /// Run the random-matrix and identity checks.
    Verify(VerifyArgs),
    /// Re-render a metrics CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sigma0Kind {
    Identity,
    Toeplitz,
    Spectral,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Gaussian,
    Rademacher,
}

impl From<NoiseKind> for ErrorDist {
    fn from(k: NoiseKind) -> Self {
        match k {
            NoiseKind::Gaussian => ErrorDist::Gaussian,
            NoiseKind::Rademacher => ErrorDist::ScaledRademacher,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    q: usize,
    #[arg(long, value_enum, default_value = "identity")]
    sigma0: Sigma0Kind,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    eig_lo: f64,
    #[arg(long, default_value_t = 2.0)]
    eig_hi: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseKind,
    #[arg(long, env = "COVPOST_SEED", default_value_t = 1)]
    seed: u64,
    /// Output CSV; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV with columns y1..yq and optionally x1..xp.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "IG_DSIW")]
    prior: String,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    c_nu: Option<f64>,
    #[arg(long)]
    half_t_scale: Option<f64>,
    #[arg(long)]
    nu_q_star: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    /// Ridge penalty on the regression coefficients.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Also draw the regression coefficients on kept iterations.
    #[arg(long)]
    sample_b: bool,
    #[arg(long, env = "COVPOST_SEED", default_value_t = 1)]
    seed: u64,
    /// Summary JSON path.
    #[arg(long, short)]
    out: PathBuf,
    /// Optional CSV dump of every kept draw.
    #[arg(long)]
    chain_dump: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON plan file.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Used when the plan has no "seed".
    #[arg(long, env = "COVPOST_SEED", default_value_t = 1)]
    seed: u64,
    /// Overrides the plan's worker count.
    #[arg(long, env = "COVPOST_WORKERS")]
    workers: Option<usize>,
    /// Record per-row task time in the table.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    log_x: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller problem sizes for a fast run.
    #[arg(long)]
    quick: bool,
    /// Envelope constant of the singular-value checks.
    #[arg(long, default_value_t = verify::DEFAULT_ENVELOPE_C)]
    envelope_c: f64,
    #[arg(long, env = "COVPOST_SEED", default_value_t = 1)]
    seed: u64,
    /// Report JSON; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Metric {
    TailProb,
    RelError,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, value_enum, default_value = "rel-error")]
    metric: Metric,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    log_x: bool,
    #[arg(long, short)]
    out: PathBuf,
}

/// Failure caused by the caller's input rather than by the program.
#[derive(Debug)]
struct UserInput(String);

impl std::fmt::Display for UserInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserInput {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UserInput(msg.into()))
}

/// Library errors that describe bad input.
fn is_input_error(e: &covpost::Error) -> bool {
    use covpost::Error as E;
    matches!(
        e,
        E::Parse { .. }
            | E::Plan(_)
            | E::UnknownPreset(_)
            | E::ParameterOutOfRange(_)
            | E::DimensionMismatch(_)
            | E::Dimension(_)
            | E::DegreesOfFreedomTooSmall { .. }
            | E::NonFinite
            | E::Precondition(_)
            | E::SingularDesign
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserInput>() || cause.is::<serde_json::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<covpost::Error>() {
            return if is_input_error(e) { 2 } else { 1 };
        }
    }
    1
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| user(format!("cannot open {}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    if a.q == 0 || a.n < 2 {
        return Err(user("need n >= 2 and q >= 1"));
    }
    let spec = match a.sigma0 {
        Sigma0Kind::Identity => Sigma0Spec::Identity {},
        Sigma0Kind::Toeplitz => Sigma0Spec::Toeplitz { rho: a.rho },
        Sigma0Kind::Spectral => Sigma0Spec::Spectral {
            lo: a.eig_lo,
            hi: a.eig_hi,
        },
    };
    let mut rng = RngStream::new(a.seed, 0);
    let sigma0 = experiments::make_sigma0(&spec, a.q, &mut rng)?;
    let data = experiments::generate_iid_data(a.n, &sigma0, a.noise.into(), &mut rng)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            data.write_csv(&mut w)?;
            w.flush()?;
        }
        None => data.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct FitReport<'a> {
    prior: &'a str,
    n: usize,
    q: usize,
    p: usize,
    seed: u64,
    chain: ChainConfig,
    #[serde(flatten)]
    summary: gibbs::PosteriorSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    b_mean: Option<Vec<Vec<f64>>>,
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let data = Dataset::read_csv(open(&a.data)?)
        .with_context(|| format!("reading {}", a.data.display()))?;
    let name: PriorPreset = a.prior.parse()?;
    let overrides = PresetOverrides {
        nu: a.nu,
        c_nu: a.c_nu,
        half_t_scale: a.half_t_scale,
        nu_q_star: a.nu_q_star,
        ..Default::default()
    };
    let prior = preset(name, data.q(), &overrides)?;
    let stats = compute_stats(&data, a.lambda)?;
    let chain = ChainConfig {
        sample_b: a.sample_b,
        ..ChainConfig::new(a.iterations, a.burn_in, a.thin, a.seed)
    };
    let samples = gibbs::run_chain(&stats, &prior, &chain)?;
    let b_mean = samples.b.as_ref().map(|bs| {
        let mut acc = bs[0].clone() * 0.0;
        for b in bs {
            acc += b;
        }
        covpost::linalg::matrix_rows(&(acc / bs.len() as f64))
    });
    let report = FitReport {
        prior: name.as_str(),
        n: data.n(),
        q: data.q(),
        p: data.p(),
        seed: a.seed,
        chain,
        summary: gibbs::summarize(&samples, &stats, &prior)?,
        b_mean,
    };
    write_json(&report, Some(&a.out))?;
    if let Some(path) = &a.chain_dump {
        let mut w = create(path)?;
        gibbs::write_chain_csv(&samples, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn load_plan(
    path: &Path,
    seed: u64,
    workers: Option<usize>,
    timing: bool,
) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path)
        .map_err(|e| user(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| user("plan must be a JSON object"))?;
    obj.entry("seed").or_insert(seed.into());
    let mut plan: ExperimentPlan = serde_json::from_value(value)
        .with_context(|| format!("invalid plan {}", path.display()))?;
    if let Some(w) = workers {
        plan.workers = w;
    }
    plan.record_wall_time |= timing;
    plan.validate()?;
    Ok(plan)
}

fn schedule_label(s: &QSchedule) -> String {
    match s {
        QSchedule::Power(e) => format!("power-{e}"),
        QSchedule::Linear(g) => format!("gamma-{g}"),
    }
}

fn chart(rows: &[MetricRow], metric: Metric, title: String, log_x: bool) -> svg::Chart {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.prior_name.as_str()) {
            names.push(&r.prior_name);
        }
    }
    let series = names
        .iter()
        .map(|name| svg::Series {
            name: name.to_string(),
            points: rows
                .iter()
                .filter(|r| r.prior_name == *name)
                .map(|r| {
                    let y = match metric {
                        Metric::TailProb => r.mean_tail_prob,
                        Metric::RelError => r.mean_rel_error,
                    };
                    (r.n as f64, y)
                })
                .collect(),
        })
        .collect();
    svg::Chart {
        title,
        x_label: "sample size n".into(),
        y_label: match metric {
            Metric::TailProb => "mean posterior tail probability".into(),
            Metric::RelError => "mean relative error of posterior mean".into(),
        },
        log_x,
        series,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let plan = load_plan(&a.plan, a.seed, a.workers, a.timing)?;
    let rows = experiments::run_plan(&plan)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let mut w = create(&a.out_dir.join("metrics.csv"))?;
    experiments::write_metrics_csv(&rows, &mut w)?;
    w.flush()?;
    write_json(&plan, Some(&a.out_dir.join("plan.json")))?;

    let kind = match plan.kind {
        StudyKind::Consistency => "consistency",
        StudyKind::Inconsistency => "inconsistency",
    };
    let cell = format!(
        "{}_{}",
        plan.sigma0.label(),
        schedule_label(&plan.q_schedule)
    );
    for (metric, stem) in [
        (Metric::TailProb, "tail_prob"),
        (Metric::RelError, "rel_error"),
    ] {
        let title = format!(
            "{kind}: {} , {}",
            plan.sigma0.label(),
            schedule_label(&plan.q_schedule)
        );
        let svg = chart(&rows, metric, title, a.log_x).render();
        write_text(&a.out_dir.join(format!("{kind}_{cell}_{stem}.svg")), &svg)?;
    }
    let failed: usize = rows
        .iter()
        .map(|r| plan.replicates - r.replicates_done)
        .sum();
    if failed > 0 {
        log::warn!("{failed} task(s) failed and were excluded; see replicates_done");
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyOutput {
    all_passed: bool,
    reports: Vec<CheckReport>,
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    if a.envelope_c.is_nan() || a.envelope_c <= 0.0 {
        return Err(user("envelope constant must be positive"));
    }
    let (sv_n, sv_q, sv_trials) = if a.quick {
        (400, 8, 40)
    } else {
        (2000, 40, 200)
    };
    let (by_n, by_trials) = if a.quick { (2000, 4) } else { (4000, 20) };
    let (chi_n, chi_trials) = if a.quick { (2000, 20) } else { (5000, 50) };
    let chain = if a.quick {
        ChainConfig::new(3000, 500, 1, 0)
    } else {
        ChainConfig::new(12_000, 2_000, 1, 0)
    };
    let c = a.envelope_c;
    let nu1 = PresetOverrides {
        nu: Some(1.0),
        ..Default::default()
    };
    let seed = a.seed;
    let mut reports = vec![
        verify::check_identities(seed)?,
        verify::check_gaussian_singular_values(sv_n, sv_q, sv_trials, c, seed)?,
    ];
    for mode in [RowMode::Rademacher, RowMode::Gaussian, RowMode::Projected] {
        reports.push(verify::check_subgaussian_singular_values(
            sv_n, 10, sv_q, sv_trials, c, mode, seed,
        )?);
    }
    reports.push(verify::check_bai_yin(by_n, 0.1, by_trials, seed)?);
    reports.push(verify::check_chisq_extremes(chi_n, 0.5, chi_trials, seed)?);
    for name in [PriorPreset::IgDsiw, PriorPreset::MatrixF] {
        let prior = preset(name, 5, &nu1)?;
        let mut r = verify::check_posterior_mean_formula(200, 5, &prior, &chain, seed)?;
        r.check_name = format!("{}_{}", r.check_name, name.as_str().to_ascii_lowercase());
        reports.push(r);
    }
    reports.push(verify::check_least_squares_deviation(
        &[200, 800, 3200],
        5,
        4,
        20,
        seed,
    )?);
    let all_passed = reports.iter().all(CheckReport::passed);
    for r in &reports {
        eprintln!(
            "{:<45} {} pass_fraction={:.3}",
            r.check_name,
            match (r.required_pass_fraction, r.passed()) {
                (None, _) => "report",
                (Some(_), true) => "pass  ",
                (Some(_), false) => "FAIL  ",
            },
            r.pass_fraction
        );
    }
    write_json(
        &VerifyOutput {
            all_passed,
            reports,
        },
        a.out.as_deref(),
    )?;
    Ok(all_passed)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let rows = experiments::read_metrics_csv(open(&a.metrics)?)
        .with_context(|| format!("reading {}", a.metrics.display()))?;
    if rows.is_empty() {
        bail!(UserInput(format!("{} has no rows", a.metrics.display())));
    }
    let title = a.title.unwrap_or_else(|| a.metrics.display().to_string());
    write_text(&a.out, &chart(&rows, a.metric, title, a.log_x).render())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Experiment(a) => cmd_experiment(a)?,
        Command::Verify(a) => {
            if !cmd_verify(a)? {
                eprintln!("error: at least one check failed");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Plot(a) => cmd_plot(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
