use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use zsl_core::io::save_feature_matrix;
use zsl_core::FeatureMatrix;

fn zsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = zsl(args);
    assert!(out.status.success(), "zsl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(kind: &str, dir: &Path) {
    ok(&["synth", "--kind", kind, "--out", p(dir)]);
}

/// Two seen classes whose class names share one embedding.
fn degenerate(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("embeddings.txt"), "a 1 0\nb 1 0\nthing 0 1\n").unwrap();
    fs::write(
        dir.join("classes.jsonl"),
        "{\"class_id\":\"A\",\"lemmas\":[\"a\"],\"definition\":\"a\",\"parent\":null}\n\
         {\"class_id\":\"B\",\"lemmas\":[\"b\"],\"definition\":\"b\",\"parent\":null}\n",
    )
    .unwrap();
    let x = FeatureMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0], vec!["A".into(), "B".into()]).unwrap();
    save_feature_matrix(&x, &dir.join("train.zf")).unwrap();
}

fn data_flags(d: &Path) -> Vec<String> {
    vec![
        "--embeddings".into(),
        d.join("embeddings.txt").display().to_string(),
        "--classes".into(),
        d.join("classes.jsonl").display().to_string(),
        "--features".into(),
        d.join("train.zf").display().to_string(),
    ]
}

/// `zsl <command> <data flags> <extra>`
fn args<'a>(command: &'a str, base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    std::iter::once(command).chain(base.iter().map(String::as_str)).chain(extra.iter().copied()).collect()
}

#[test]
fn missing_bundle_dir_is_input_error() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("no_such_bundles");
    let out = zsl(&["visualness", "--bundles", p(&missing), "--out", p(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_bundles"), "{}", stderr(&out));
}

#[test]
fn unknown_method_is_input_error() {
    let t = tempfile::tempdir().unwrap();
    synth("recovery", &t.path().join("d"));
    let base = data_flags(&t.path().join("d"));
    let out_dir = t.path().join("o");
    let out = zsl(&args("build", &base, &["--method", "Def_magic", "--out", p(&out_dir)]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_system_is_computation_error() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    degenerate(&d);
    let base = data_flags(&d);
    let o = t.path().join("o");
    let out = zsl(&args("train", &base, &["--method", "Classname", "--lambda", "0", "--out", p(&o)]));
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn missing_required_flag_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    synth("recovery", &t.path().join("d"));
    let base = data_flags(&t.path().join("d"));
    let o = t.path().join("o");
    let out = zsl(&args("train", &base, &["--method", "Classname", "--out", p(&o)]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--lambda"));
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("recovery", &d);
    let cfg = t.path().join("run.json");
    fs::write(
        &cfg,
        format!(
            "{{\"embeddings\":{:?},\"classes\":{:?},\"features\":{:?},\"method\":\"Classname\",\"lambda\":5.0}}",
            p(&d.join("embeddings.txt")),
            p(&d.join("classes.jsonl")),
            p(&d.join("train.zf"))
        ),
    )
    .unwrap();
    let o = t.path().join("o");
    ok(&["train", "--config", p(&cfg), "--lambda", "0.01", "--out", p(&o)]);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["lambda"], 0.01);
    assert_eq!(written["method"], "Classname");
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["lambda"], 0.01);
}

#[test]
fn histogram_counts_every_word() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("planted", &d);
    let o = t.path().join("o");
    ok(&["visualness", "--bundles", p(&d.join("bundles")), "--bins", "7", "--out", p(&o)]);
    let words = fs::read_dir(d.join("bundles")).unwrap().count();
    let hist = fs::read_to_string(o.join("visualness_hist.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("bucket_lo,bucket_hi,count"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    let total: usize = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, words);
}

#[test]
fn ignored_parameters_warn() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("recovery", &d);
    let base = data_flags(&d);
    let o = t.path().join("o");
    let out = ok(&args("build", &base, &["--method", "Def_average", "--tau", "5", "--out", p(&o)]));
    let err = stderr(&out);
    assert!(err.contains("warning") && err.contains("--tau"), "{err}");
}

#[test]
fn eval_reports_requested_columns() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("recovery", &d);
    let base = data_flags(&d);
    let m = t.path().join("m");
    ok(&args("train", &base, &["--method", "Classname", "--lambda", "0.001", "--out", p(&m)]));
    let e = t.path().join("e");
    ok(&[
        "eval",
        "--model",
        p(&m),
        "--test-features",
        p(&d.join("test.zf")),
        "--topk",
        "1,5,10",
        "--out",
        p(&e),
    ]);
    let csv = fs::read_to_string(e.join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[header.len() - 3..], ["top1", "top5", "top10"]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let acc: Vec<f64> = row[row.len() - 3..].iter().map(|v| v.parse().unwrap()).collect();
    assert!(acc[0] <= acc[1] && acc[1] <= acc[2] && acc[2] <= 1.0);
    assert!(acc[0] > 0.9);

    // 10 unseen candidates, so k = 11 cannot be ranked
    let out = zsl(&["eval", "--model", p(&m), "--test-features", p(&d.join("test.zf")), "--topk", "11", "--out", p(&e)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attention_log_is_non_increasing() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("planted", &d);
    let base = data_flags(&d);
    let o = t.path().join("o");
    ok(&args("attention", &base, &["--lambda", "0.001", "--out", p(&o)]));
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("attention.json")).unwrap()).unwrap();
    let log: Vec<f64> = model["training_log"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    // initial loss plus one entry per epoch, 50 epochs by default
    assert_eq!(log.len(), 51);
    assert!(log.windows(2).all(|w| w[1] <= w[0]), "{log:?}");
    assert!(log[50] < log[0]);
}

#[test]
fn build_requires_attention_model() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    synth("planted", &d);
    let base = data_flags(&d);
    let o = t.path().join("o");
    let out = zsl(&args("build", &base, &["--method", "Def_attention", "--out", p(&o)]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--attention"));
}
