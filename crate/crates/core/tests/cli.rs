use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vblink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vblink")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    read(dir.join("manifest.txt"))
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    vblink(&args)
}

const STANDARD: [&str; 12] = [
    "--k", "100", "--db-sizes", "300,300", "--fields", "5", "--cardinality", "10", "--distortion", "0.02", "--seed", "7",
];

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn synth_writes_databases_and_truth() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data");
    let run = synth(&out, &STANDARD);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for db in ["db1.csv", "db2.csv"] {
        let text = read(out.join(db));
        assert_eq!(text.lines().count(), 301);
        assert_eq!(text.lines().next().unwrap(), "f1,f2,f3,f4,f5");
    }
    for f in ["truth.csv", "latent_values.csv", "noise.csv", "schema.tsv", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(read(out.join("truth.csv")).lines().count(), 601);
    assert_eq!(manifest_value(&out, "seed").as_deref(), Some("7"));
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(&a, &STANDARD)), 0);
    assert_eq!(code(&synth(&b, &STANDARD)), 0);
    let strip = |fs: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        fs.into_iter().filter(|(n, _)| n != "manifest.txt").collect()
    };
    assert_eq!(strip(files(&a)), strip(files(&b)));
}

#[test]
fn synth_rejects_bad_values() {
    let tmp = TempDir::new().unwrap();
    let mut args = STANDARD.to_vec();
    args[9] = "1.5";
    assert_eq!(code(&synth(&tmp.path().join("x"), &args)), 2);
    let small = [
        "--k", "5", "--small-cluster-max", "3", "--db-sizes", "10", "--fields", "2", "--cardinality", "3", "--distortion", "0.1",
    ];
    assert_eq!(code(&synth(&tmp.path().join("y"), &small)), 2);
    assert_eq!(code(&synth(&tmp.path().join("z"), &small[2..])), 0);
}

#[test]
fn synth_accepts_config_file_with_flag_override() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.cfg");
    fs::write(&config, "k=10\ndb-sizes=20,20\nfields=3\ncardinality=4\ndistortion=0.1\nseed=1\n").unwrap();
    let out = tmp.path().join("o");
    let run = synth(&out, &["--config", config.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(manifest_value(&out, "seed").as_deref(), Some("9"));
    assert_eq!(manifest_value(&out, "k").as_deref(), Some("10"));
}

fn fit_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut args: Vec<String> = vec!["fit".into(), "--out".into(), out.display().to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    args.push("--schema".into());
    args.push(data.join("schema.tsv").display().to_string());
    args.push(data.join("db1.csv").display().to_string());
    args.push(data.join("db2.csv").display().to_string());
    args
}

fn run_fit(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let args = fit_args(data, out, extra);
    vblink(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn fit_then_eval_recovers_entities() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, &STANDARD)), 0);
    let out = tmp.path().join("fit");
    let run = run_fit(&data, &out, &["--k", "600", "--alpha", "0.1", "--seed", "1"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["linkage.csv", "lambda.csv", "elbo_trace.csv", "state.ckpt", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(manifest_value(&out, "k").as_deref(), Some("600"));

    let trace = read(out.join("elbo_trace.csv"));
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("sweep,elbo"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!values.is_empty());
    for w in values.windows(2) {
        assert!(w[1] - w[0] >= -1e-9 * w[1].abs());
    }

    let linkage = read(out.join("linkage.csv"));
    assert_eq!(linkage.lines().next(), Some("db,record,entity,max_prob"));
    assert_eq!(linkage.lines().count(), 601);

    let scored = tmp.path().join("score");
    let run = vblink(&[
        "eval",
        "--out",
        scored.to_str().unwrap(),
        out.join("linkage.csv").to_str().unwrap(),
        data.join("truth.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let printed = stdout(&run);
    for key in [
        "pairwise_precision",
        "pairwise_recall",
        "pairwise_f1",
        "true_entity_count",
        "estimated_entity_count",
    ] {
        assert!(printed.contains(key), "{key} not printed");
    }
    let score: serde_json::Value = serde_json::from_str(&read(scored.join("score.json"))).unwrap();
    assert!(score["pairwise_f1"].as_f64().unwrap() >= 0.9);
}

#[test]
fn fit_outputs_do_not_depend_on_workers() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let small = [
        "--k", "30", "--db-sizes", "50,40", "--fields", "4", "--cardinality", "6", "--distortion", "0.05", "--seed", "3",
    ];
    assert_eq!(code(&synth(&data, &small)), 0);
    let (one, four) = (tmp.path().join("w1"), tmp.path().join("w4"));
    assert_eq!(code(&run_fit(&data, &one, &["--k", "40", "--workers", "1"])), 0);
    assert_eq!(code(&run_fit(&data, &four, &["--k", "40", "--workers", "4"])), 0);
    for f in ["linkage.csv", "lambda.csv", "elbo_trace.csv", "state.ckpt"] {
        assert_eq!(fs::read(one.join(f)).unwrap(), fs::read(four.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn fit_rerun_from_manifest_reproduces_outputs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let small = [
        "--k", "10", "--db-sizes", "20,20", "--fields", "3", "--cardinality", "5", "--distortion", "0.05", "--seed", "4",
    ];
    assert_eq!(code(&synth(&data, &small)), 0);
    let first = tmp.path().join("first");
    assert_eq!(code(&run_fit(&data, &first, &["--seed", "5"])), 0);
    assert_eq!(manifest_value(&first, "k").as_deref(), Some("40"));

    let second = tmp.path().join("second");
    let manifest = first.join("manifest.txt");
    let run = vblink(&["fit", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["linkage.csv", "lambda.csv", "elbo_trace.csv", "state.ckpt"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

fn write_two_records(dir: &Path) -> [String; 1] {
    fs::create_dir_all(dir).unwrap();
    let db = dir.join("db1.csv");
    fs::write(&db, "x\n1\n1\n").unwrap();
    fs::write(dir.join("schema.tsv"), "x\t1,2\n").unwrap();
    [db.display().to_string()]
}

#[test]
fn fit_single_entity_gives_closed_form_elbo() {
    let tmp = TempDir::new().unwrap();
    let [db] = write_two_records(&tmp.path().join("in"));
    let schema = tmp.path().join("in/schema.tsv");
    let out = tmp.path().join("out");
    let run = vblink(&[
        "fit",
        "--k",
        "1",
        "--alpha",
        "1",
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        &db,
    ]);
    assert_eq!(code(&run), 0);
    let trace = read(out.join("elbo_trace.csv"));
    let last: f64 = trace.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - (1.0f64 / 3.0).ln()).abs() <= 1e-10);
}

#[test]
fn fit_reports_non_convergence() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let small = [
        "--k", "10", "--db-sizes", "30", "--fields", "3", "--cardinality", "5", "--distortion", "0.2", "--seed", "4",
    ];
    assert_eq!(code(&synth(&data, &small)), 0);
    let out = tmp.path().join("out");
    let run = vblink(&[
        "fit",
        "--max-sweeps",
        "1",
        "--tol",
        "1e-300",
        "--out",
        out.to_str().unwrap(),
        data.join("db1.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 4);
    assert_eq!(read(out.join("elbo_trace.csv")).lines().count(), 2);
}

#[test]
fn fit_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let [db] = write_two_records(&tmp.path().join("in"));
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&vblink(&["fit", "--out", out, "--k", "0", &db])), 2);
    assert_eq!(code(&vblink(&["fit", "--out", out, "--alpha", "-1", &db])), 2);
    assert_eq!(code(&vblink(&["fit", "--out", out, "--workers", "0", &db])), 2);
    assert_eq!(code(&vblink(&["fit", "--out", out, "/nonexistent/db.csv"])), 2);
    assert_eq!(code(&vblink(&["fit", "--out", out, "--bogus", &db])), 2);
}

#[test]
fn fit_with_alpha_file() {
    let tmp = TempDir::new().unwrap();
    let [db] = write_two_records(&tmp.path().join("in"));
    let alpha = tmp.path().join("alpha.tsv");
    fs::write(&alpha, "x\t1\n").unwrap();
    let schema = tmp.path().join("in/schema.tsv");
    let out = tmp.path().join("out");
    let run = vblink(&[
        "fit",
        "--k",
        "1",
        "--alpha-file",
        alpha.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        &db,
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let last: f64 = read(out.join("elbo_trace.csv")).lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - (1.0f64 / 3.0).ln()).abs() <= 1e-10);

    fs::write(&alpha, "x\t1,2,3\n").unwrap();
    let run = vblink(&[
        "fit",
        "--alpha-file",
        alpha.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        &db,
    ]);
    assert_eq!(code(&run), 2);
}

fn eval_files(dir: &Path, linkage: &str, truth: &str) -> (String, String) {
    fs::create_dir_all(dir).unwrap();
    let (l, t) = (dir.join("linkage.csv"), dir.join("truth.csv"));
    fs::write(&l, linkage).unwrap();
    fs::write(&t, truth).unwrap();
    (l.display().to_string(), t.display().to_string())
}

#[test]
fn eval_scores_and_rejects_mismatches() {
    let tmp = TempDir::new().unwrap();
    let truth = "db,record,entity\n1,1,1\n1,2,1\n2,1,2\n";
    let (l, t) = eval_files(tmp.path(), "db,record,entity,max_prob\n1,1,4,1\n1,2,4,1\n2,1,9,1\n", truth);
    let run = vblink(&["eval", &l, &t]);
    assert_eq!(code(&run), 0);
    assert!(stdout(&run).contains("pairwise_f1: 1\n"));

    let merged = tmp.path().join("merged");
    let (l, t) = eval_files(&merged, "db,record,entity,max_prob\n1,1,1,1\n1,2,1,1\n2,1,1,1\n", truth);
    let run = vblink(&["eval", "--out", merged.to_str().unwrap(), &l, &t]);
    assert_eq!(code(&run), 0);
    assert!(stdout(&run).contains("pairwise_f1: 0.5\n"));
    assert!(merged.join("score.json").exists());

    let short = tmp.path().join("short");
    let (l, t) = eval_files(&short, "db,record,entity,max_prob\n1,1,1,1\n", truth);
    assert_eq!(code(&vblink(&["eval", &l, &t])), 2);
    assert_eq!(code(&vblink(&["eval", &l, "/nonexistent/truth.csv"])), 2);
}

#[test]
fn oracle_check_reports_bound() {
    let tmp = TempDir::new().unwrap();
    let [db] = write_two_records(&tmp.path().join("in"));
    let schema = tmp.path().join("in/schema.tsv");
    let schema = schema.to_str().unwrap();
    let run = vblink(&["oracle-check", "--k", "2", "--alpha", "1", "--schema", schema, &db]);
    assert_eq!(code(&run), 0);
    let text = stdout(&run);
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    };
    assert!((value("log evidence:") - (7.0f64 / 24.0).ln()).abs() <= 1e-12);
    assert!(value("gap:") >= 0.0);
    assert!(text.contains("max cocluster discrepancy:"));

    let run = vblink(&["oracle-check", "--k", "1", "--alpha", "1", "--schema", schema, &db]);
    assert_eq!(code(&run), 0);
    let text = stdout(&run);
    let gap: f64 = text.lines().find_map(|l| l.strip_prefix("gap:")).unwrap().trim().parse().unwrap();
    assert!(gap.abs() <= 1e-10);
}

#[test]
fn oracle_check_refuses_large_instances() {
    let tmp = TempDir::new().unwrap();
    let db = tmp.path().join("db1.csv");
    let mut text = String::from("x\n");
    for i in 0..30 {
        text.push_str(&format!("{}\n", i % 2));
    }
    fs::write(&db, text).unwrap();
    let run = vblink(&["oracle-check", "--k", "4", db.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("size error"));
}
