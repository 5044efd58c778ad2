//! Black-box tests over the installed binary: every subcommand, the exit
//! code contract, and byte-level reproducibility of file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_extremile"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "expected success, got {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[Vec<f64>]) -> PathBuf {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Deterministic uniform draws without pulling in a full RNG: a splitmix64
/// stream mapped to (0, 1).
fn uniforms(seed: u64, count: usize) -> Vec<f64> {
    let mut state = seed;
    (0..count)
        .map(|_| {
            state = state.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn noiseless_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let u = uniforms(seed, 2 * n);
    (0..n)
        .map(|i| {
            let (x1, x2) = (u[2 * i], u[2 * i + 1]);
            vec![x1, x2, 1.0 + 2.0 * x1 + 3.0 * x2]
        })
        .collect()
}

#[test]
fn extremile_of_one_two_three_at_median_is_two() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "v.csv", "v", &[vec![1.0], vec![2.0], vec![3.0]]);
    let out = run(&["extremile", "--input", input.to_str().unwrap(), "--taus", "0.5"]);
    let json = stdout_json(&out);
    assert_eq!(json["estimates"][0]["extremile"], 2.0);
    assert_eq!(json["n"], 3);
}

#[test]
fn extremile_negation_mirrors_the_order() {
    let dir = TempDir::new().unwrap();
    let vals = uniforms(7, 40);
    let pos: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
    let neg: Vec<Vec<f64>> = vals.iter().map(|&v| vec![-v]).collect();
    let p = write_csv(dir.path(), "p.csv", "v", &pos);
    let m = write_csv(dir.path(), "m.csv", "v", &neg);
    let a = stdout_json(&run(&["extremile", "--input", p.to_str().unwrap(), "--taus", "0.3"]));
    let b = stdout_json(&run(&["extremile", "--input", m.to_str().unwrap(), "--taus", "0.7"]));
    let xi_pos = a["estimates"][0]["extremile"].as_f64().unwrap();
    let xi_neg = b["estimates"][0]["extremile"].as_f64().unwrap();
    assert!(
        (xi_neg + xi_pos).abs() < 1e-12,
        "negation symmetry broken: {xi_pos} vs {xi_neg}"
    );
}

#[test]
fn malformed_csv_reports_the_line_and_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "x,y\n1.0,2.0\noops,3.0\n").unwrap();
    let out_path = dir.path().join("out.json");
    let out = run(&[
        "fit",
        "--input",
        path.to_str().unwrap(),
        "--taus",
        "0.5",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_text(&out);
    assert!(err.contains("line 3"), "stderr: {err}");
    assert!(err.contains("oops"), "stderr: {err}");
    assert!(!out_path.exists(), "no partial output on failure");
}

#[test]
fn fit_recovers_a_noiseless_linear_model() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "lin.csv", "x1,x2,y", &noiseless_rows(80, 11));
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.1,0.5,0.9",
    ]);
    let json = stdout_json(&out);
    let estimates = json["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 3);
    for est in estimates {
        let beta: Vec<f64> =
            est["beta"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        for (b, truth) in beta.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - truth).abs() < 1e-6, "beta {beta:?} at tau {}", est["tau"]);
        }
    }
    assert_eq!(json["names"].as_array().unwrap().len(), 3);
    assert_eq!(json["names"][0], "(intercept)");
}

#[test]
fn fit_with_se_is_reproducible_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let mut rows = noiseless_rows(60, 3);
    let noise = uniforms(99, rows.len());
    for (row, z) in rows.iter_mut().zip(noise) {
        let y = row[2] + (z - 0.5);
        row[2] = y;
    }
    let input = write_csv(dir.path(), "noisy.csv", "x1,x2,y", &rows);
    let out1 = dir.path().join("a.json");
    let out2 = dir.path().join("b.json");
    for out in [&out1, &out2] {
        let res = run(&[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--taus",
            "0.5,0.9",
            "--se",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", stderr_text(&res));
    }
    let a = fs::read(&out1).unwrap();
    let b = fs::read(&out2).unwrap();
    assert_eq!(a, b, "repeated runs differ");
    let json: Value = serde_json::from_slice(&a).unwrap();
    for est in json["estimates"].as_array().unwrap() {
        for se in est["se"].as_array().unwrap() {
            assert!(se.as_f64().unwrap() > 0.0, "nonpositive se");
        }
    }
    assert!(out1.with_extension("json.manifest.json").exists() || {
        // The sidecar replaces the final extension segment.
        let manifest = dir.path().join("a.manifest.json");
        manifest.exists()
    });
}

#[test]
fn collinear_design_exits_3_and_names_columns() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = noiseless_rows(40, 5)
        .into_iter()
        .map(|r| vec![r[0], r[0], r[2]])
        .collect();
    let input = write_csv(dir.path(), "dup.csv", "x1,x1copy,y", &rows);
    let out = run(&["fit", "--input", input.to_str().unwrap(), "--taus", "0.5"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_text(&out);
    assert!(err.contains("collinear"), "stderr: {err}");
    assert!(err.contains("x1copy"), "stderr: {err}");
}

#[test]
fn fit_ssl_with_empty_pool_matches_fit() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "lab.csv", "x1,x2,y", &noiseless_rows(50, 21));
    let pool = dir.path().join("pool.csv");
    fs::write(&pool, "x1,x2\n").unwrap();
    let plain = stdout_json(&run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.3,0.8",
    ]));
    let ssl = stdout_json(&run(&[
        "fit-ssl",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.3,0.8",
        "--unlabeled",
        pool.to_str().unwrap(),
    ]));
    assert_eq!(plain["estimates"], ssl["estimates"]);
    assert_eq!(ssl["mode"], "semi-supervised");
}

#[test]
fn fit_ssl_with_constant_features_matches_fit() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "lab.csv", "x1,x2,y", &noiseless_rows(50, 22));
    let pool_rows: Vec<Vec<f64>> =
        noiseless_rows(120, 23).into_iter().map(|r| vec![r[0], r[1]]).collect();
    let pool = write_csv(dir.path(), "pool.csv", "x1,x2", &pool_rows);
    let plain = stdout_json(&run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.5",
    ]));
    let ssl = stdout_json(&run(&[
        "fit-ssl",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.5",
        "--unlabeled",
        pool.to_str().unwrap(),
        "--zmap",
        "constant",
    ]));
    let a: Vec<f64> = plain["estimates"][0]["beta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let b: Vec<f64> = ssl["estimates"][0]["beta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn fit_ssl_rejects_a_mismatched_pool_schema() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "lab.csv", "x1,x2,y", &noiseless_rows(50, 24));
    let pool_rows: Vec<Vec<f64>> =
        noiseless_rows(30, 25).into_iter().map(|r| vec![r[0], r[1]]).collect();
    let pool = write_csv(dir.path(), "pool.csv", "x1,z9", &pool_rows);
    let out = run(&[
        "fit-ssl",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.5",
        "--unlabeled",
        pool.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_text(&out);
    assert!(err.contains("z9"), "stderr: {err}");
}

#[test]
fn ordinary_recovers_a_noiseless_model_at_the_median() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "lin.csv", "x1,x2,y", &noiseless_rows(60, 31));
    let out = run(&["ordinary", "--input", input.to_str().unwrap(), "--tau", "0.5"]);
    let json = stdout_json(&out);
    let beta: Vec<f64> = json["beta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (b, truth) in beta.iter().zip([1.0, 2.0, 3.0]) {
        assert!((b - truth).abs() < 1e-10, "beta {beta:?}");
    }
    assert_eq!(json["bandwidths"].as_array().unwrap().len(), 2);
}

#[test]
fn ordinary_warns_on_tiny_samples_but_succeeds() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "tiny.csv", "x1,y", &[
        vec![0.1, 1.0],
        vec![0.5, 2.0],
        vec![0.9, 3.5],
    ]);
    let out = run(&["ordinary", "--input", input.to_str().unwrap(), "--tau", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    let err = stderr_text(&out);
    assert!(err.contains("warning"), "stderr: {err}");
}

fn sim_config(dir: &Path) -> PathBuf {
    let path = dir.join("sim.json");
    fs::write(
        &path,
        r#"{"design":"model-a","n":60,"taus":[0.1,0.9],"reps":3,"base_seed":5,
            "methods":["supervised","ordinary"],"center_draws":10000}"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_reproducible_outputs() {
    let dir = TempDir::new().unwrap();
    let config = sim_config(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let res = run(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", stderr_text(&res));
    }
    for name in ["summary.json", "reps.csv", "table.txt", "manifest.json"] {
        assert!(out1.join(name).exists(), "{name} missing");
    }
    assert_eq!(
        fs::read(out1.join("summary.json")).unwrap(),
        fs::read(out2.join("summary.json")).unwrap()
    );
    assert_eq!(
        fs::read(out1.join("reps.csv")).unwrap(),
        fs::read(out2.join("reps.csv")).unwrap()
    );
}

#[test]
fn simulate_is_thread_count_invariant() {
    let dir = TempDir::new().unwrap();
    let config = sim_config(dir.path());
    let mut outs = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("t{threads}"));
        let res = bin()
            .args([
                "simulate",
                "--config",
                config.to_str().unwrap(),
                "--output-dir",
                out.to_str().unwrap(),
            ])
            .env("EXTREMILE_THREADS", threads)
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", stderr_text(&res));
        outs.push(fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(outs[0], outs[1], "summary depends on the thread count");
}

#[test]
fn simulate_rejects_unknown_config_fields_without_writing() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"design":"model-a","bogus":1}"#).unwrap();
    let out_dir = dir.path().join("never");
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(!out_dir.exists(), "output dir created despite config error");
}

#[test]
fn invalid_thread_env_exits_5() {
    let out = bin()
        .args(["extremile", "--input", "/nonexistent.csv", "--taus", "0.5"])
        .env("EXTREMILE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn usage_errors_exit_5_and_version_exits_0() {
    let none = run(&[]);
    assert_eq!(none.status.code(), Some(5));
    let version = run(&["--version"]);
    assert_eq!(version.status.code(), Some(0));
}

#[test]
fn manifest_records_the_input_digest() {
    let dir = TempDir::new().unwrap();
    let input = write_csv(dir.path(), "v.csv", "v", &[vec![1.0], vec![2.0], vec![4.0]]);
    let out_path = dir.path().join("res.json");
    let res = run(&[
        "extremile",
        "--input",
        input.to_str().unwrap(),
        "--taus",
        "0.5",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let manifest_path = dir.path().join("res.json.manifest.json");
    assert!(manifest_path.exists(), "manifest sidecar missing");
    let manifest: Value = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    let digest = manifest["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(
        manifest["inputs"][0]["bytes"].as_u64().unwrap(),
        fs::metadata(&input).unwrap().len()
    );
}

/// End-to-end semi-supervised workflow on synthetic stand-in data: with a
/// large unlabeled pool the semi-supervised standard errors should beat the
/// supervised ones for most coefficients.
#[test]
fn acceptance_8_ssl_standard_errors_beat_sl_for_most_coefficients() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(814);
    let gen = extremile::simlab::gen_model_b(
        300,
        1200,
        extremile::simlab::ErrorLaw::Normal,
        extremile::simlab::PairConvention::UpperTriangle,
        &mut rng,
    )
    .unwrap();
    let header = "x1,x2,x3,x4,y";
    let x = gen.labeled.x();
    let y = gen.labeled.y();
    let labeled_rows: Vec<Vec<f64>> = (0..x.nrows())
        .map(|i| vec![x[[i, 1]], x[[i, 2]], x[[i, 3]], x[[i, 4]], y[i]])
        .collect();
    let labeled = write_csv(dir.path(), "labeled.csv", header, &labeled_rows);
    let pool_rows: Vec<Vec<f64>> = (0..gen.unlabeled.nrows())
        .map(|i| {
            vec![
                gen.unlabeled[[i, 1]],
                gen.unlabeled[[i, 2]],
                gen.unlabeled[[i, 3]],
                gen.unlabeled[[i, 4]],
            ]
        })
        .collect();
    let pool = write_csv(dir.path(), "pool.csv", "x1,x2,x3,x4", &pool_rows);
    let taus = "0.1,0.3,0.5,0.7,0.9";
    let sl = stdout_json(&run(&[
        "fit",
        "--input",
        labeled.to_str().unwrap(),
        "--taus",
        taus,
        "--se",
    ]));
    let ssl = stdout_json(&run(&[
        "fit-ssl",
        "--input",
        labeled.to_str().unwrap(),
        "--taus",
        taus,
        "--unlabeled",
        pool.to_str().unwrap(),
        "--se",
    ]));
    let mut better = 0usize;
    let mut total = 0usize;
    for (a, b) in sl["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .zip(ssl["estimates"].as_array().unwrap())
    {
        let sa = a["se"].as_array().unwrap();
        let sb = b["se"].as_array().unwrap();
        for (x, z) in sa.iter().zip(sb) {
            total += 1;
            if z.as_f64().unwrap() <= x.as_f64().unwrap() {
                better += 1;
            }
        }
    }
    assert_eq!(ssl["n_unlabeled"], 1200);
    if better * 2 <= total {
        panic!("ACCEPTANCE 8: FAIL - semi-supervised se smaller in only {better}/{total} cells");
    }
    println!("ACCEPTANCE 8: PASS - semi-supervised se smaller in {better}/{total} coefficient cells");
}
