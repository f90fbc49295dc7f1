use std::path::Path;
use std::process::{Command, Output};

fn optspace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optspace"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--m", "60", "--n", "50", "--r-true", "2", "--p", "0.6", "--seed", "7", "--out", "inst"];
    args.extend_from_slice(extra);
    let out = optspace(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_complete_recovers_noiseless_matrix() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    for f in ["truth.mtx", "noise.mtx", "observed.mtx", "meta.txt"] {
        assert!(dir.path().join("inst").join(f).exists(), "{f}");
    }
    let out = optspace(
        dir.path(),
        &["complete", "--input", "inst/observed.mtx", "--rank", "2", "--truth", "inst/truth.mtx", "--out", "fit"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let err: f64 = value(&text, "rel_fro_error").unwrap().parse().unwrap();
    assert!(err < 1e-6, "{text}");
    for f in ["X.mtx", "S.mtx", "Y.mtx", "manifest.txt", "trace.csv"] {
        assert!(dir.path().join("fit").join(f).exists(), "{f}");
    }
}

#[test]
fn complete_with_lambda_grid_needs_seed() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--sigma2", "0.001"]);
    let base = ["complete", "--input", "inst/observed.mtx", "--rank", "2", "--out", "fit", "--lambda", "0,1"];
    assert_eq!(optspace(dir.path(), &base).status.code(), Some(5));
    let mut seeded = base.to_vec();
    seeded.extend(["--seed", "3"]);
    let out = optspace(dir.path(), &seeded);
    assert!(out.status.success());
    assert!(value(&stdout(&out), "lambda").is_some());
}

#[test]
fn theory_prints_pairs_and_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = optspace(dir.path(), &["theory", "--signal", "1.4142135623730951", "--sigma2", "1", "--p", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let z: f64 = value(&text, "z_1").unwrap().parse().unwrap();
    assert!((z - 3.0 / 2f64.sqrt()).abs() < 1e-12);
    let rel: f64 = value(&text, "rel_mse").unwrap().parse().unwrap();
    assert!((rel - 0.75).abs() < 1e-12);
    let lines: Vec<&str> = text.lines().collect();
    let header = lines[lines.len() - 2].split(',').count();
    assert_eq!(header, lines[lines.len() - 1].split(',').count());
    assert!(lines[lines.len() - 2].starts_with("k,rel_mse"));
}

#[test]
fn theory_below_threshold_has_no_shrinkage() {
    let dir = tempfile::tempdir().unwrap();
    let out = optspace(dir.path(), &["theory", "--signal", "0.5", "--sigma2", "1", "--p", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(value(&text, "k"), Some("0"));
    assert_eq!(value(&text, "t_star"), Some("nan"));
}

#[test]
fn sweep_is_byte_identical_and_flags_override_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.cfg"),
        "kind=sweep_rank\nm=30\nn=30\nr_true=2\nrank_used=1..2\np=0.6\nsnr=1\nreplicates=2\nseed=5\nlambda=0\nlambda=auto\n",
    )
    .unwrap();
    for out in ["a.csv", "b.csv"] {
        let o = optspace(dir.path(), &["sweep", "--config", "c.cfg", "--sigma2", "0.01", "--output", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(text.lines().skip(1).all(|l| l.contains("sigma2=0.01")));
    for companion in ["a.summary.csv", "a.timings.csv", "a.gp"] {
        assert!(dir.path().join(companion).exists(), "{companion}");
    }
}

#[test]
fn sweep_without_output_streams_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = optspace(
        dir.path(),
        &["sweep", "--kind", "single_run", "--m", "20", "--n", "20", "--r-true", "1", "--p", "1", "--sigma2", "0", "--replicates", "1", "--seed", "1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn select_lambda_prints_table_and_choice() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--sigma2", "0.001"]);
    let out = optspace(
        dir.path(),
        &["select-lambda", "--input", "inst/observed.mtx", "--rank", "2", "--lambda", "0,0.5,50", "--seed", "4"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("lambda,holdout_mse,error\n"));
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    assert_eq!(value(&text, "lambda_star"), Some("0"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // Usage.
    assert_eq!(optspace(p, &["synth", "--m", "5"]).status.code(), Some(2));
    assert_eq!(optspace(p, &["theory", "--signal", "1", "--sigma2", "1", "--p", "1", "--bogus"]).status.code(), Some(2));
    // I/O.
    assert_eq!(
        optspace(p, &["complete", "--input", "missing.mtx", "--rank", "1", "--out", "o"]).status.code(),
        Some(3)
    );
    // Malformed file.
    std::fs::write(p.join("bad.cfg"), "no equals sign here\n").unwrap();
    assert_eq!(optspace(p, &["sweep", "--config", "bad.cfg"]).status.code(), Some(4));
    std::fs::write(p.join("bad.mtx"), "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 x 3\n").unwrap();
    assert_eq!(
        optspace(p, &["complete", "--input", "bad.mtx", "--rank", "1", "--out", "o"]).status.code(),
        Some(4)
    );
    // Invalid values.
    assert_eq!(optspace(p, &["theory", "--signal", "1", "--sigma2", "1", "--p", "2"]).status.code(), Some(5));
    assert_eq!(
        optspace(p, &["synth", "--m", "4", "--n", "4", "--r-true", "9", "--p", "0.5", "--seed", "1", "--out", "x"])
            .status
            .code(),
        Some(5)
    );
    // Stochastic sweeps need a seed.
    assert_eq!(
        optspace(p, &["sweep", "--kind", "single_run", "--m", "5", "--n", "5", "--p", "1", "--sigma2", "0"]).status.code(),
        Some(5)
    );
}

#[test]
fn strict_complete_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--sigma2", "0.01"]);
    let out = optspace(
        dir.path(),
        &["complete", "--input", "inst/observed.mtx", "--rank", "2", "--max-iters", "1", "--strict", "--out", "fit"],
    );
    assert_eq!(out.status.code(), Some(6));
}
