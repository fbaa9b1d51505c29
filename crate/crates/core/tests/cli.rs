use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use thames_mix::cli::{parse_csv, CSV_HEADER, EXIT_DATA, EXIT_USAGE};
use thames_mix::oracle::exact_marglik_bruteforce;

fn thames(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thames"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_toy(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("toy.csv");
    let out = thames(&[
        "simulate",
        "--scenario",
        "toy",
        "--g",
        "2",
        "--rho",
        "0.5",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    data
}

#[test]
fn simulate_writes_data_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_toy(dir.path());
    let ds = parse_csv(&fs::read_to_string(&data).unwrap(), None).unwrap();
    assert_eq!((ds.n(), ds.d()), (10, 1));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.with_extension("json")).unwrap()).unwrap();
    let exact = side["log_z_exact"].as_array().unwrap();
    assert_eq!(exact.len(), 3);
    let z2 = exact[1][1].as_f64().unwrap();
    assert_eq!(z2, exact_marglik_bruteforce(&ds.column(0), 2).unwrap());
}

#[test]
fn estimate_is_deterministic_and_writes_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_toy(dir.path());
    let run = |out: &Path| {
        let o = thames(&[
            "estimate",
            "--data",
            s(&data),
            "--model",
            "toy",
            "--g-range",
            "1:3",
            "--iters",
            "3000",
            "--burnin",
            "1000",
            "--seed",
            "4",
            "--out",
            s(out),
            "--dot",
            "--json",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("results.csv")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(lines.filter(|l| l.ends_with(",ok,thames")).count(), 3);
    for f in [
        "result_G2.json",
        "orderings_G2.csv",
        "perms_G2.csv",
        "overlap_G3.dot",
        "delta_G3.dot",
    ] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }
}

#[test]
fn oracle_reports_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_toy(dir.path());
    let out = dir.path().join("o");
    let o = thames(&[
        "oracle",
        "--data",
        s(&data),
        "--model",
        "toy",
        "--g",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("oracle.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.contains("oracle-bruteforce"), "{row}");
    let ds = parse_csv(&fs::read_to_string(&data).unwrap(), None).unwrap();
    let want = exact_marglik_bruteforce(&ds.column(0), 2).unwrap();
    let got: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(got, want);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_toy(dir.path());
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("c");
    fs::write(
        &cfg,
        serde_json::json!({"data": data, "model": "toy", "g": 3, "iters": 1200, "burnin": 200, "out": out}).to_string(),
    )
    .unwrap();
    let o = thames(&["estimate", "--config", s(&cfg), "--g", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("2,"));

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(
        thames(&["estimate", "--config", s(&cfg)]).status.code(),
        Some(EXIT_USAGE)
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        thames(&["estimate", "--nonsense"]).status.code(),
        Some(EXIT_USAGE)
    );
    let missing = dir.path().join("none.csv");
    assert_eq!(
        thames(&["estimate", "--data", s(&missing), "--g", "2"])
            .status
            .code(),
        Some(EXIT_DATA)
    );

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x\n1.0\nabc\n").unwrap();
    let o = thames(&[
        "estimate",
        "--data",
        s(&bad),
        "--g",
        "2",
        "--model",
        "toy",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_DATA));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row") && err.contains("col"), "{err}");

    let data = simulate_toy(dir.path());
    let o = thames(&[
        "oracle",
        "--data",
        s(&data),
        "--model",
        "uni-hier",
        "--g",
        "2",
        "--out",
        s(&dir.path().join("y")),
    ]);
    assert_eq!(o.status.code(), Some(EXIT_USAGE));
}
