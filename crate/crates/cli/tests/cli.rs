use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_regimeclust"));
    c.env("REGIMECLUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn simulate(dir: &Path, scenario: &str, n: usize, seed: u64) {
    let out = run(&["simulate", "--scenario", scenario, "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_the_dataset_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("pw");
    simulate(&d, "piecewise", 60, 1);
    let curves = lines(&d.join("curves.csv"));
    assert_eq!(curves.len(), 60);
    assert!(curves.iter().all(|l| l.split(',').count() == 100));
    assert_eq!(lines(&d.join("truth.csv")).len(), 60);
    assert_eq!(lines(&d.join("states.csv")).len(), 60);
    assert_eq!(lines(&d.join("time.csv"))[0].split(',').count(), 100);

    let w = tmp.path().join("wf");
    simulate(&w, "waveform", 9, 2);
    assert!(lines(&w.join("curves.csv")).iter().all(|l| l.split(',').count() == 21));
    let truth = lines(&w.join("truth.csv"));
    for c in ["0", "1", "2"] {
        assert_eq!(truth.iter().filter(|l| *l == c).count(), 3);
    }
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, "switchlike", 6, 9);
    simulate(&b, "switchlike", 6, 9);
    for f in ["curves.csv", "time.csv", "truth.csv", "states.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--scenario", "sine", "--n", "5", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn fit_writes_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    simulate(&d, "piecewise", 30, 3);
    let o = tmp.path().join("fit");
    let out = run(&[
        "fit", "--input", p(&d.join("curves.csv")), "--time", p(&d.join("time.csv")),
        "--truth", p(&d.join("truth.csv")), "--model", "mixhmmr", "--clusters", "3",
        "--regimes", "3", "--degree", "0", "--runs", "3", "--out", p(&o),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&o.join("labels.csv")).len(), 30);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["outputs"].as_array().unwrap();
    assert_eq!(files.len(), 7);
    for f in files {
        let path = o.join(f.as_str().unwrap());
        assert!(fs::metadata(&path).unwrap().len() > 0, "{}", path.display());
    }
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["degeneracy_events"], 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("report.json")).unwrap()).unwrap();
    assert!(report["misclassification_rate"].as_f64().unwrap() <= 0.05);
}

#[test]
fn conflicting_flags_are_rejected_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    simulate(&d, "piecewise", 12, 3);
    let o = tmp.path().join("fit");
    let out = run(&[
        "fit", "--input", p(&d.join("curves.csv")), "--model", "kmeans", "--clusters", "3",
        "--regimes", "2", "--out", p(&o),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--regimes"));
    assert!(!o.exists());

    let out = run(&["fit", "--input", p(&d.join("curves.csv")), "--model", "mixhmmr", "--clusters", "3", "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!o.exists());
}

#[test]
fn malformed_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("bad.csv");
    fs::write(&f, "1,2,3\n4,5\n").unwrap();
    let o = tmp.path().join("fit");
    let out = run(&["fit", "--input", p(&f), "--model", "kmeans", "--clusters", "1", "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
    assert!(!o.exists());
}

#[test]
fn overflowing_data_is_a_fit_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("huge.csv");
    fs::write(&f, "1e300,-1e300,1e300\n-1e300,1e300,-1e300\n1e300,1e300,-1e300\n").unwrap();
    let out = run(&[
        "fit", "--input", p(&f), "--model", "mixreg", "--clusters", "1", "--degree", "1",
        "--out", p(&tmp.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_cluster_regression_mean_is_the_ols_quadratic() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("c.csv");
    // Two noisy copies of a quadratic on t = 0..6.
    let rows: Vec<String> = (0..2)
        .map(|i| {
            (0..7)
                .map(|j| {
                    let t = j as f64;
                    let noise = if (i + j) % 2 == 0 { 0.3 } else { -0.2 };
                    (1.0 - 0.5 * t + 0.25 * t * t + noise).to_string()
                })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    fs::write(&f, rows.join("\n") + "\n").unwrap();
    let o = tmp.path().join("fit");
    let out = run(&["fit", "--input", p(&f), "--model", "mixreg", "--clusters", "1", "--degree", "2", "--out", p(&o)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let means: Vec<f64> = lines(&o.join("means.csv"))[0].split(',').map(|v| v.parse().unwrap()).collect();

    // Oracle: quadratic least squares on the pooled points via 3x3 Cramer.
    let data: Vec<Vec<f64>> = rows.iter().map(|r| r.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    let mut s = [0.0f64; 5];
    let mut b = [0.0f64; 3];
    for row in &data {
        for (j, y) in row.iter().enumerate() {
            let t = j as f64;
            for (k, sk) in s.iter_mut().enumerate() {
                *sk += t.powi(k as i32);
            }
            for (k, bk) in b.iter_mut().enumerate() {
                *bk += y * t.powi(k as i32);
            }
        }
    }
    let m = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    let coef: Vec<f64> = (0..3)
        .map(|c| {
            let mut mc = m;
            for r in 0..3 {
                mc[r][c] = b[r];
            }
            det(mc) / d
        })
        .collect();
    for (j, v) in means.iter().enumerate() {
        let t = j as f64;
        let ols = coef[0] + coef[1] * t + coef[2] * t * t;
        assert!((v - ols).abs() < 1e-9, "t={t}: {v} vs {ols}");
    }
}

#[test]
fn fit_is_reproducible_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    simulate(&d, "waveform", 30, 4);
    let fit = |name: &str| {
        let o = tmp.path().join(name);
        let out = run(&[
            "fit", "--input", p(&d.join("curves.csv")), "--clusters", "3", "--regimes", "2",
            "--degree", "3", "--runs", "3", "--seed", "17", "--out", p(&o),
        ]);
        assert!(out.status.success());
        fs::read(o.join("labels.csv")).unwrap()
    };
    assert_eq!(fit("a"), fit("b"));
}

#[test]
fn evaluate_reports_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = tmp.path().join("truth.csv");
    let pred = tmp.path().join("pred.csv");
    fs::write(&truth, "0\n0\n1\n1\n2\n2\n").unwrap();
    fs::write(&pred, "0\n0\n1\n1\n2\n2\n").unwrap();
    let out = run(&["evaluate", "--pred", p(&pred), "--truth", p(&truth)]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["misclassification_rate"], 0.0);

    fs::write(&pred, "2\n2\n0\n0\n1\n1\n").unwrap();
    let o = tmp.path().join("eval");
    let out = run(&["evaluate", "--pred", p(&pred), "--truth", p(&truth), "--out", p(&o)]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(v["misclassification_rate"], 0.0);

    fs::write(&pred, "0\n1\n").unwrap();
    let out = run(&["evaluate", "--pred", p(&pred), "--truth", p(&truth)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_fit_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    simulate(&d, "piecewise", 60, 12);
    let o = tmp.path().join("fit");
    let out = run(&[
        "fit", "--input", p(&d.join("curves.csv")), "--time", p(&d.join("time.csv")), "--clusters", "3",
        "--regimes", "3", "--degree", "0", "--threads", "1", "--out", p(&o),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "evaluate", "--pred", p(&o.join("labels.csv")), "--truth", p(&d.join("truth.csv")),
        "--input", p(&d.join("curves.csv")), "--means", p(&o.join("means.csv")),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["misclassification_rate"].as_f64().unwrap() <= 0.05);
    assert!(v["intra_cluster_inertia"].as_f64().unwrap() > 0.0);
}

#[test]
fn select_table_shape_and_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("data");
    simulate(&d, "piecewise", 15, 2);
    let o = tmp.path().join("sel");
    let out = run(&[
        "select", "--input", p(&d.join("curves.csv")), "--gmax", "1", "--kmax", "1", "--pmin", "1",
        "--pmax", "1", "--runs", "2", "--out", p(&o),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = lines(&o.join("selection.csv"));
    assert_eq!(table.len(), 2);
    let cells: Vec<&str> = table[1].split(',').collect();
    assert_eq!(&cells[..3], &["1", "1", "1"]);
    // (G-1) + GK + G(2K-1) + GK(p+1) + GK with G = K = p = 1.
    assert_eq!(cells[4], "5");
    assert_eq!(cells[8], "1");

    let big = tmp.path().join("big");
    let out = run(&[
        "select", "--input", p(&d.join("curves.csv")), "--gmax", "10", "--kmax", "10", "--pmax", "3",
        "--out", p(&big),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max-cells"));
    assert!(!big.exists());
}

#[test]
fn help_exits_cleanly_and_bad_flags_do_not() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(1));
}
