use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn covpost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covpost"))
        .args(args)
        .env_remove("COVPOST_SEED")
        .env_remove("COVPOST_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = covpost(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn json(p: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn without_generator(svg: &str) -> String {
    svg.lines()
        .filter(|l| !l.starts_with("<!-- generator"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn fit_args<'a>(data: &'a str, out: &'a str, dump: &'a str) -> Vec<&'a str> {
    vec![
        "fit",
        "--data",
        data,
        "--prior",
        "IG_DSIW",
        "--iterations",
        "600",
        "--burn-in",
        "200",
        "--thin",
        "2",
        "--seed",
        "5",
        "--out",
        out,
        "--chain-dump",
        dump,
    ]
}

#[test]
fn simulate_then_fit_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "data.csv");
    ok(&[
        "simulate", "--n", "60", "--q", "2", "--seed", "3", "--out", &data,
    ]);
    let header = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "y1,y2");

    let (s1, d1) = (path(&dir, "s1.json"), path(&dir, "d1.csv"));
    ok(&fit_args(&data, &s1, &d1));
    let summary = json(&s1);
    let mean = summary["posterior_mean"].as_array().unwrap();
    assert_eq!(mean.len(), 2);
    assert_eq!(mean[0].as_array().unwrap().len(), 2);
    assert_eq!(summary["kept"], 200);
    assert_eq!(summary["ci95_half_width"].as_array().unwrap().len(), 2);
    assert_eq!(summary["ess"].as_array().unwrap().len(), 2);
    // 200 kept draws plus a header
    assert_eq!(fs::read_to_string(&d1).unwrap().lines().count(), 201);

    let (s2, d2) = (path(&dir, "s2.json"), path(&dir, "d2.csv"));
    ok(&fit_args(&data, &s2, &d2));
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    assert_eq!(fs::read(&d1).unwrap(), fs::read(&d2).unwrap());
}

#[test]
fn simulate_is_reproducible_and_reads_seed_from_env() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (
        path(&dir, "a.csv"),
        path(&dir, "b.csv"),
        path(&dir, "c.csv"),
    );
    ok(&[
        "simulate", "--n", "20", "--q", "3", "--seed", "9", "--out", &a,
    ]);
    ok(&[
        "simulate", "--n", "20", "--q", "3", "--seed", "9", "--out", &b,
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let out = Command::new(env!("CARGO_BIN_EXE_covpost"))
        .args(["simulate", "--n", "20", "--q", "3", "--out", &c])
        .env("COVPOST_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn toeplitz_data_has_toeplitz_covariance() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "t.csv");
    ok(&[
        "simulate", "--n", "20000", "--q", "3", "--sigma0", "toeplitz", "--rho", "0.9", "--seed",
        "1", "--out", &data,
    ]);
    let text = fs::read_to_string(&data).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let n = rows.len() as f64;
    let cov = |i: usize, j: usize| rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / n;
    for (i, j) in [(0, 0), (0, 1), (0, 2), (1, 2)] {
        let want = 0.9f64.powi((i as i32 - j as i32).abs());
        assert!(
            (cov(i, j) - want).abs() < 0.05,
            "entry ({i},{j}): {} vs {want}",
            cov(i, j)
        );
    }
}

#[test]
fn malformed_csv_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "bad.csv");
    fs::write(&data, "y1,y2\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = covpost(&["fit", "--data", &data, "--out", &path(&dir, "s.json")]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 3"), "{msg}");

    let out = covpost(&[
        "fit",
        "--data",
        &path(&dir, "missing.csv"),
        "--out",
        &path(&dir, "s.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let good = path(&dir, "good.csv");
    ok(&["simulate", "--n", "10", "--q", "2", "--out", &good]);
    let out = covpost(&[
        "fit",
        "--data",
        &good,
        "--prior",
        "NOPE",
        "--out",
        &path(&dir, "s.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

const SMOKE_PLAN: &str = r#"{
  "kind": "consistency",
  "n_grid": [40, 160, 640],
  "q_schedule": {"power": 0.5},
  "sigma0": {"identity": {}},
  "priors": ["IG_DSIW", "MATRIX_F"],
  "replicates": 3,
  "chain": {"iterations": 300, "burn_in": 100, "thin": 2},
  "seed": 11,
  "workers": 1
}"#;

fn run_experiment(plan: &Path, out: &Path) {
    ok(&[
        "experiment",
        "--plan",
        plan.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn experiment_writes_table_and_charts_deterministically() {
    let dir = TempDir::new().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(&plan, SMOKE_PLAN).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&plan, &a);
    run_experiment(&plan, &b);

    let table = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(table, fs::read_to_string(b.join("metrics.csv")).unwrap());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (prior, err) = (col("prior_name"), col("mean_rel_error"));
    for name in ["IG_DSIW", "MATRIX_F"] {
        let errs: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[prior] == name)
            .map(|f| f[err].parse().unwrap())
            .collect();
        assert!(errs[2] < errs[0], "{name}: {errs:?}");
    }

    let mut svgs: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".svg"))
        .collect();
    svgs.sort();
    assert_eq!(svgs.len(), 2);
    for f in &svgs {
        let x = fs::read_to_string(a.join(f)).unwrap();
        let y = fs::read_to_string(b.join(f)).unwrap();
        assert_eq!(without_generator(&x), without_generator(&y));
        assert_eq!(x.matches("<polyline").count(), 2);
    }
    // relative error polylines trend downward, which is upward in SVG y
    let rel =
        fs::read_to_string(a.join(svgs.iter().find(|f| f.contains("rel_error")).unwrap())).unwrap();
    for line in rel.lines().filter(|l| l.starts_with("<polyline")) {
        let pts = line
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>");
        let ys: Vec<f64> = pts
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(ys.last().unwrap() > ys.first().unwrap());
    }

    let sidecar = json(a.join("plan.json").to_str().unwrap());
    assert_eq!(sidecar["seed"], 11);

    let replot = path(&dir, "replot.svg");
    ok(&[
        "plot",
        "--metrics",
        a.join("metrics.csv").to_str().unwrap(),
        "--metric",
        "tail-prob",
        "--log-x",
        "--out",
        &replot,
    ]);
    assert_eq!(
        fs::read_to_string(&replot)
            .unwrap()
            .matches("<polyline")
            .count(),
        2
    );
}

#[test]
fn bad_plans_are_user_errors() {
    let dir = TempDir::new().unwrap();
    let plan = dir.path().join("plan.json");
    let out_dir = path(&dir, "out");
    let cases = [
        SMOKE_PLAN.replace(r#"["IG_DSIW", "MATRIX_F"]"#, "[]"),
        SMOKE_PLAN.replace(r#""workers": 1"#, r#""workers": 1, "wrokers": 2"#),
        SMOKE_PLAN.replace(r#""IG_DSIW""#, r#""NOT_A_PRIOR""#),
        "not json".to_string(),
    ];
    for text in cases {
        fs::write(&plan, &text).unwrap();
        let out = covpost(&[
            "experiment",
            "--plan",
            plan.to_str().unwrap(),
            "--out-dir",
            &out_dir,
        ]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{text}\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(!Path::new(&out_dir).join("metrics.csv").exists());
}

#[test]
fn quick_verify_passes_and_impossible_envelope_fails() {
    let dir = TempDir::new().unwrap();
    let report = path(&dir, "verify.json");
    ok(&["verify", "--quick", "--seed", "2", "--out", &report]);
    let v = json(&report);
    assert_eq!(v["all_passed"], true);
    for r in v["reports"].as_array().unwrap() {
        assert!(r["check_name"].is_string());
        assert!(r["pass_fraction"].as_f64().unwrap() >= 0.0);
    }

    let out = covpost(&[
        "verify",
        "--quick",
        "--seed",
        "2",
        "--envelope-c",
        "0.01",
        "--out",
        &report,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&report)["all_passed"], false);
}
