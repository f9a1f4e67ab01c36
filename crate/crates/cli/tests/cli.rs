use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lpsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lpsr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    entries.sort();
    entries
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(lpsr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lpsr(&["synth", "--n", "x", "--out", "d"]).status.code(), Some(1));
    assert_eq!(lpsr(&[]).status.code(), Some(1));
    for sub in ["synth", "degrade", "train-ocr", "train-sr", "eval", "infer", "report", "run-exp"] {
        let out = lpsr(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--seed"), "{sub}");
    }
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = lpsr(&["infer", "--checkpoint", p(&missing), "--in", "a.png", "--out", "b.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--n", "12", "--mix", "0.5", "--seed", "7", "--out", p(d)]);
    }
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 13);
    assert_eq!(da, db);
}

#[test]
fn pipeline_with_identity_model() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (corpus, data, ocr, ident) = (t.join("corpus"), t.join("data"), t.join("ocr.ckpt"), t.join("id.ckpt"));
    ok(&["synth", "--n", "20", "--seed", "1", "--out", p(&corpus)]);
    ok(&[
        "degrade",
        "--corpus",
        p(&corpus),
        "--out",
        p(&data),
        "--intervals",
        "0.25:0.50,0.50:0.75",
        "--split",
        "0.5,0.25,0.25",
        "--seed",
        "2",
    ]);
    ok(&["train-ocr", "--corpus", p(&corpus), "--out", p(&ocr), "--epochs", "1", "--seed", "3"]);
    ok(&["export-identity", "--out", p(&ident)]);

    let e1 = t.join("eval1");
    let e2 = t.join("eval2");
    for e in [&e1, &e2] {
        ok(&["eval", "--checkpoint", p(&ident), "--data", p(&data), "--ocr", p(&ocr), "--out", p(e)]);
    }
    assert_eq!(dir_bytes(&e1), dir_bytes(&e2));

    // The identity model reproduces the no-SR rows exactly.
    let rows = fs::read_to_string(e1.join("recognition.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("method,subset,layout,tier,n,correct,percent"));
    let body: Vec<&str> = lines.collect();
    // 2 methods x (2 intervals + union) x 3 layouts x 3 tiers
    assert_eq!(body.len(), 2 * 3 * 3 * 3);
    let strip_method = |l: &&str| l.split_once(',').unwrap().1.to_string();
    let no_sr: Vec<String> = body.iter().filter(|l| l.starts_with("no_sr,")).map(strip_method).collect();
    let sr: Vec<String> = body.iter().filter(|l| l.starts_with("sr,")).map(strip_method).collect();
    assert_eq!(no_sr, sr);

    let rep = t.join("rep");
    ok(&[
        "report",
        "--eval",
        p(&e1.join("eval.json")),
        "--out",
        p(&rep),
        "--strips",
        "2",
        "--checkpoint",
        p(&ident),
        "--seed",
        "4",
    ]);
    let strips: Vec<_> = fs::read_dir(rep.join("strips")).unwrap().collect();
    assert_eq!(strips.len(), 2);
    assert_eq!(
        fs::read(rep.join("recognition.csv")).unwrap(),
        fs::read(e1.join("recognition.csv")).unwrap()
    );
    let out = lpsr(&["report", "--eval", p(&e1.join("eval.json")), "--out", p(&rep), "--strips", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_sr_and_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (corpus, data, ocr, run) = (t.join("corpus"), t.join("data"), t.join("ocr.ckpt"), t.join("run"));
    ok(&["synth", "--n", "8", "--seed", "5", "--out", p(&corpus)]);
    ok(&[
        "degrade",
        "--corpus",
        p(&corpus),
        "--out",
        p(&data),
        "--intervals",
        "0.50:0.75",
        "--split",
        "0.5,0.25,0.25",
    ]);
    ok(&["train-ocr", "--corpus", p(&corpus), "--out", p(&ocr), "--epochs", "1"]);
    let cfg = t.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"channels": 8, "num_rcb": 1, "units_per_rcb": 1, "recon_blocks": 1},
            "train": {"max_epochs": 1, "batch_size": 4}}"#,
    )
    .unwrap();
    ok(&[
        "train-sr",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--ocr",
        p(&ocr),
        "--out",
        p(&run),
        "--seed",
        "6",
    ]);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let sr = t.join("sr.png");
    let lr = corpus.join("plate_00000.png");
    ok(&["infer", "--checkpoint", p(&run.join("model.ckpt")), "--in", p(&lr), "--out", p(&sr)]);
    let img = lpsr::ImageTensor::load_png(&sr).unwrap();
    assert_eq!(img.shape(), (3, 60, 120));

    let bad = t.join("bad.json");
    fs::write(&bad, r#"{"model": {"channels": 6}}"#).unwrap();
    let out = lpsr(&["train-sr", "--data", p(&data), "--config", p(&bad), "--ocr", p(&ocr), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(2));
}
