use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn coral(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coral"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn fixtures() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    assert!(coral(&["gen-fixtures", "--out", "fx"], tmp.path()).status.success());
    tmp
}

#[test]
fn help_documents_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let top = coral(&["--help"], dir.path());
    assert!(top.status.success());
    let text = String::from_utf8(top.stdout).unwrap();
    for cmd in ["sim", "fit-homography", "fit-planes", "benchmark", "gen-fixtures"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
    for (cmd, needles) in [
        ("sim", &["--seed", "--threads", "300 sim", "0.5,1.0,1.5", "0,0.2,0.4,0.6", "[default: 10]"][..]),
        ("fit-homography", &["0.5 fit-homography", "100 fit-homography", "20 fit-homography", "[default: 4]"][..]),
        ("fit-planes", &["5000 fit-planes", "9 fit-planes", "[default: 500]", "[default: 0.05]"][..]),
    ] {
        let out = coral(&[cmd, "--help"], dir.path());
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in ["--lambda", "--beta", "--gamma", "--proposals", "--inner-iters", "--max-outer", "--method", "--out"] {
            assert!(text.contains(flag), "{cmd}: {flag}");
        }
        for n in needles {
            assert!(text.contains(n), "{cmd} --help lacks {n:?}");
        }
    }
}

#[test]
fn exact_homography_fixture_has_zero_me_under_both_methods() {
    let tmp = fixtures();
    for method in ["coral", "ransac"] {
        let out = coral(
            &["fit-homography", "fx/single_homography.csv", "--method", method, "--out", method],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let s = json(tmp.path().join(method).join("summary.json"));
        assert_eq!(s["schema_version"], 1);
        assert_eq!(s["me"], 0.0);
        assert_eq!(s["models"], 1);
        assert_eq!(s["method"], method);
        let labels = json(tmp.path().join(method).join("labels.json"));
        assert_eq!(labels["schema_version"], 1);
        assert!(labels["labels"].as_array().unwrap().iter().all(|l| l == 0));
        let models = json(tmp.path().join(method).join("models.json"));
        assert_eq!(models["models"][0]["h"].as_array().unwrap().len(), 9);
        let trace = std::fs::read_to_string(tmp.path().join(method).join("energy_trace.csv")).unwrap();
        assert!(trace.starts_with("iteration,data,smoothness,label_cost,total\n"));
    }
}

#[test]
fn input_errors_exit_two() {
    let tmp = fixtures();
    let dir = tmp.path();
    let missing = coral(&["fit-homography", "no_such.csv"], dir);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no_such.csv"));

    std::fs::write(dir.join("bad.pgm"), "P2\n2 2\n255\n1 2 3\n").unwrap();
    let bad = coral(&["fit-planes", "--depth", "bad.pgm", "--image", "fx/wedge/image.pgm"], dir);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bad.pgm"));

    std::fs::write(dir.join("c.toml"), "lambda = 1.0\nbogus = 2\n").unwrap();
    let unknown = coral(&["fit-homography", "fx/single_homography.csv", "--config", "c.toml"], dir);
    assert_eq!(unknown.status.code(), Some(2));

    let negative = coral(&["fit-homography", "fx/single_homography.csv", "--beta=-1"], dir);
    assert_eq!(negative.status.code(), Some(2));
    let method = coral(&["fit-homography", "fx/single_homography.csv", "--method", "pearl"], dir);
    assert_eq!(method.status.code(), Some(2));

    std::fs::write(dir.join("nan.csv"), "# 640 480\n1,2,3,4,0\n1,NaN,3,4,0\n").unwrap();
    let nan = coral(&["fit-homography", "nan.csv", "--out", "nan"], dir);
    assert_eq!(nan.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&nan.stderr).contains("line 3"));
    assert!(!dir.join("nan").exists());
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let tmp = fixtures();
    let dir = tmp.path();
    std::fs::write(dir.join("c.toml"), "beta = 250.0\nlambda = 0.25\nout = \"from_config\"\n").unwrap();
    let out = coral(
        &["fit-homography", "fx/single_homography.csv", "--config", "c.toml", "--lambda", "0.75"],
        dir,
    );
    assert!(out.status.success());
    let s = json(dir.join("from_config/summary.json"));
    assert_eq!(s["params"]["beta"], 250.0);
    assert_eq!(s["params"]["lambda"], 0.75);
    assert_eq!(s["params"]["gamma"], 20.0);
}

#[test]
fn sim_row_count_and_repeatability() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = |out: &'static str| {
        vec![
            "sim", "--sweep", "noise", "--sigmas", "0.5,1.0,1.5", "--trials", "2", "--points-per-plane", "30",
            "--seed", "7", "--out", out,
        ]
    };
    assert!(coral(&args("a"), dir).status.success());
    assert!(coral(&args("b"), dir).status.success());
    let csv = std::fs::read_to_string(dir.join("a/sweep.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(dir.join("b/sweep.csv")).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sweep,method,sweep_value,trial,me");
    assert_eq!(lines.len(), 1 + 3 * 2 * 2);
    let s = json(dir.join("a/summary.json"));
    assert_eq!(s["cells"].as_array().unwrap().len(), 6);
    assert_eq!(s["defaults"]["homography"]["beta"], 100.0);
    assert_eq!(s["defaults"]["planes"]["beta"], 5000.0);
    assert_eq!(s["defaults"]["sim"]["beta"], 300.0);
}

#[test]
fn plane_fit_with_huge_gamma_has_no_outliers() {
    let tmp = fixtures();
    let out = coral(
        &[
            "fit-planes", "--depth", "fx/wedge/depth.pgm", "--image", "fx/wedge/image.pgm", "--labels",
            "fx/wedge/labels.pgm", "--gamma", "1e9", "--proposals", "60", "--inner-iters", "200", "--out", "p",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(tmp.path().join("p/summary.json"));
    assert_eq!(s["outliers"], 0);
    assert_eq!(s["models"], 2);
    assert!(s["me"].as_f64().unwrap() < 0.05);
    let labels = std::fs::read_to_string(tmp.path().join("p/labels.pgm")).unwrap();
    assert!(labels.starts_with("P2\n# offset 1\n80 60\n"));
}
