// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn olakit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olakit"))
        .args(args)
        .env_remove("OLAKIT_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = olakit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file below `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Two related models with planted tags, 8 texts each.
fn corpus() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("alpha");
    let b = dir.path().join("beta");
    let common = ["--texts", "8", "--tags", "3", "--logit-scale", "1.0", "--seed", "5"];
    let mut args = vec!["synth", "--out", p(&a), "--model", "alpha"];
    args.extend(common);
    ok(&args);
    let mut args = vec!["synth", "--out", p(&b), "--model", "beta", "--noise", "0.2"];
    args.extend(common);
    ok(&args);
    (dir, a, b)
}

#[test]
fn decompose_writes_every_order_plus_rollout_deterministically() {
    let (dir, a, _) = corpus();
    let out = dir.path().join("maps");
    ok(&["decompose", "--orders", "1,2,3", "--in", p(&a), "--out", p(&out)]);
    let first = snapshot(&out);
    assert_eq!(first.len(), 8 * 4);
    for text in 0..8 {
        for order in ["1", "2", "3", "rollout"] {
            assert!(out.join(format!("alpha_t{text:04}_{order}.olat")).exists());
        }
    }
    ok(&["decompose", "--orders", "1,2,3", "--in", p(&a), "--out", p(&out), "--jobs", "1"]);
    assert_eq!(snapshot(&out), first);
    let v = ok(&["validate", "--in", p(&out)]);
    assert_eq!(String::from_utf8_lossy(&v.stdout).lines().count(), 32);
}

#[test]
fn order_beyond_layer_count_is_a_validation_failure() {
    let (dir, a, _) = corpus();
    let out = dir.path().join("maps");
    let r = olakit(&["decompose", "--orders", "99", "--in", p(&a), "--out", p(&out)]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("order exceeds layer count"));
    assert!(!out.exists());
}

#[test]
fn retrieve_reports_hits_and_ignores_worker_count() {
    let (dir, a, b) = corpus();
    let maps = dir.path().join("maps");
    ok(&["decompose", "--in", p(&a), "--out", p(&maps)]);
    let report = dir.path().join("report.tsv");
    let run = |jobs: &str| {
        ok(&[
            "retrieve", "--source", p(&maps), "--target", p(&b), "--order", "1", "--k", "1,5", "--target-size", "20",
            "--jobs", jobs, "--out", p(&report),
        ])
    };
    let one = run("1");
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(String::from_utf8_lossy(&one.stdout), text);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("source_model\ttarget_model\torder\thits@1\thits@5\tM"));
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(&row[..3], ["alpha", "beta", "1"]);
    assert_eq!(row[5], "8");
    let hits1: f64 = row[3].parse().unwrap();
    let hits5: f64 = row[4].parse().unwrap();
    assert!(hits1 <= hits5 && hits5 <= 1.0);
    assert!(hits1 > 0.5, "related models should retrieve: {hits1}");
    let four = run("4");
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn classify_reports_accuracy() {
    let (_dir, a, b) = corpus();
    let out = ok(&["classify", "--train", p(&a), "--test", p(&b), "--k", "1", "--target-size", "16"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let acc: f64 = text.lines().next().unwrap().strip_prefix("accuracy\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(text.contains("num_test\t8"));
}

#[test]
fn probe_transfer_round_trip_leaves_inputs_untouched() {
    let (dir, a, b) = corpus();
    let before_a = snapshot(&a);
    let before_b = snapshot(&b);
    let params = dir.path().join("probe").join("pos.olat");
    let labels = a.join("labels.tsv");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# shared\ntarget_size = 16\nepochs = 9\nlabels = {}\n[probe-train]\nhidden = 8\nlr = 0.02\n", p(&labels)),
    )
    .unwrap();
    ok(&[
        "--config", p(&cfg), "probe-train", "--task", "pos", "--in", p(&a), "--epochs", "4", "--out", p(&params),
    ]);
    let log = std::fs::read_to_string(dir.path().join("probe").join("pos.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4, "flag overrides the file's epochs:\n{log}");

    let metrics = dir.path().join("metrics.tsv");
    ok(&[
        "probe-eval", "--params", p(&params), "--target", p(&b), "--labels", p(&labels), "--assert-frozen", "--out",
        p(&metrics),
    ]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("task\tpos\naccuracy\t"), "{text}");
    assert!(text.contains("support\t"));

    // Retraining with the same seed reproduces the parameters exactly.
    let again = dir.path().join("again.olat");
    ok(&[
        "--config", p(&cfg), "probe-train", "--task", "pos", "--in", p(&a), "--epochs", "4", "--out", p(&again),
    ]);
    assert_eq!(std::fs::read(&params).unwrap(), std::fs::read(&again).unwrap());

    assert_eq!(snapshot(&a), before_a);
    assert_eq!(snapshot(&b), before_b);
}

#[test]
fn tampered_parameters_are_rejected() {
    let (dir, a, b) = corpus();
    let params = dir.path().join("p.olat");
    let labels = a.join("labels.tsv");
    ok(&[
        "probe-train", "--task", "pos", "--in", p(&a), "--labels", p(&labels), "--epochs", "1", "--hidden", "4",
        "--target-size", "16", "--out", p(&params),
    ]);
    let mut bytes = std::fs::read(&params).unwrap();
    let last = bytes.len() - 9;
    bytes[last] ^= 0x40;
    std::fs::write(&params, bytes).unwrap();
    let r = olakit(&["probe-eval", "--params", p(&params), "--target", p(&b), "--labels", p(&labels)]);
    assert_eq!(code(&r), 1, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn task_without_labels_is_a_validation_failure() {
    let (_dir, a, _) = corpus();
    let labels = a.join("labels.tsv");
    let r = olakit(&["probe-train", "--task", "ner", "--in", p(&a), "--labels", p(&labels), "--out", "x.olat"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn render_writes_scaled_grayscale_pngs() {
    let (dir, a, _) = corpus();
    let out = dir.path().join("png");
    ok(&[
        "render", "--in", p(&a.join("alpha_t0000.olat")), "--out", p(&out), "--orders", "1,rollout", "--scale", "3",
        "--zero-max-row",
    ]);
    let files: Vec<_> = snapshot(&out).into_keys().collect();
    assert_eq!(files.len(), 2);
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&files[0]).unwrap()));
    let info = decoder.read_info().unwrap().info().clone();
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    assert_eq!(info.width % 3, 0);
    assert_eq!(info.width, info.height);
}

#[test]
fn contribution_maps_for_projected_traces() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t");
    let out = dir.path().join("c");
    ok(&[
        "synth", "--out", p(&traces), "--texts", "2", "--hidden-dim", "8", "--head-dim", "4", "--arch", "gemma",
    ]);
    ok(&["contrib", "--in", p(&traces), "--out", p(&out)]);
    assert_eq!(snapshot(&out).len(), 2);
    ok(&["validate", "--in", p(&out)]);
    // Traces without projections cannot yield contribution maps.
    let plain = dir.path().join("plain");
    ok(&["synth", "--out", p(&plain), "--texts", "1"]);
    assert_eq!(code(&olakit(&["contrib", "--in", p(&plain), "--out", p(&out)])), 1);
}

#[test]
fn exit_codes_distinguish_usage_io_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&olakit(&["--help"])), 0);
    assert_eq!(code(&olakit(&["decompose", "--bogus"])), 1);
    let missing = dir.path().join("missing");
    let r = olakit(&["validate", "--in", p(&missing)]);
    assert_eq!(code(&r), 2);
    let junk = dir.path().join("junk.olat");
    std::fs::write(&junk, b"not a container").unwrap();
    let r = olakit(&["validate", "--in", p(&junk)]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("invalid"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[decompose]\nepochs = 3\n").unwrap();
    assert_eq!(code(&olakit(&["--config", p(&cfg), "decompose", "--in", "x", "--out", "y"])), 1);
}

#[test]
fn jobs_default_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_olakit"))
        .args(["synth", "--out", p(dir.path()), "--texts", "2"])
        .env("OLAKIT_JOBS", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&r), 1);
    let r = Command::new(env!("CARGO_BIN_EXE_olakit"))
        .args(["synth", "--out", p(dir.path()), "--texts", "2"])
        .env("OLAKIT_JOBS", "2")
        .output()
        .unwrap();
    assert!(r.status.success());
}
