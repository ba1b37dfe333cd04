use std::path::Path;
use std::process::{Command, Output};

fn ctnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctnet"))
        .args(args)
        .output()
        .expect("run ctnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) -> String {
    let out = dir.join("data");
    let o = ctnet(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--per-class",
        "2",
        "--test-per-class",
        "1",
        "--points",
        "32",
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{o:?}");
    out.join("manifest.json").to_str().unwrap().to_string()
}

fn train(manifest: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        manifest,
        "--preset",
        "desk",
        "--points",
        "32",
        "--epochs",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "7",
        "--quiet",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ctnet(&args)
}

fn last_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().last().unwrap().to_string()
}

#[test]
fn synth_then_train_twice_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&manifest, &a, &[]).status.success());
    assert!(train(&manifest, &b, &[]).status.success());
    let (la, lb) = (last_line(&a.join("log.csv")), last_line(&b.join("log.csv")));
    assert!(la.starts_with("2,"), "{la}");
    assert_eq!(la, lb);
    for f in ["run_config.json", "checkpoint.json", "metrics.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_reproduces_the_final_log_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    assert!(train(&manifest, &run, &[]).status.success());
    let fields: Vec<String> = last_line(&run.join("log.csv")).split(',').map(String::from).collect();
    let json = dir.path().join("eval.json");
    let ck = run.join("checkpoint.json");
    let o = ctnet(&["eval", "--checkpoint", ck.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(format!("{:.6}", report["macc"].as_f64().unwrap()), fields[4]);
    assert_eq!(format!("{:.6}", report["oa"].as_f64().unwrap()), fields[5]);
    assert!(stdout(&o).contains("confusion"));

    let cloud = dir.path().join("data/test/00000.xyz");
    let o = ctnet(&["classify", "--checkpoint", ck.to_str().unwrap(), cloud.to_str().unwrap(), "--top-k", "2"]);
    assert!(o.status.success(), "{o:?}");
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("1. "));

    let scored = dir.path().join("s.xyz");
    let o = ctnet(&[
        "saliency",
        "--checkpoint",
        ck.to_str().unwrap(),
        cloud.to_str().unwrap(),
        "--class",
        "sphere",
        "--out",
        scored.to_str().unwrap(),
    ]);
    // an almost untrained model may legitimately produce an all-zero map
    match o.status.code() {
        Some(0) => {
            let text = std::fs::read_to_string(&scored).unwrap();
            assert_eq!(text.lines().count(), 32);
            for line in text.lines() {
                let cols: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
                assert_eq!(cols.len(), 7);
                assert!((0.0..=1.0).contains(&cols[6]));
            }
        }
        Some(3) => assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate")),
        other => panic!("unexpected exit {other:?}: {o:?}"),
    }
}

#[test]
fn bench_reports_the_default_budget() {
    let o = ctnet(&["bench"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let params: f64 = text
        .split("params ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((params - 4.22e6).abs() <= 0.3 * 4.22e6, "{params}");
    // header + 2 scales x 4 mechanisms x 6 operators
    assert_eq!(text.lines().count(), 2 + 48);
}

#[test]
fn gradcheck_ops_passes() {
    let o = ctnet(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert!(!text.contains("FAIL"));
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
}

#[test]
fn exit_codes() {
    assert_eq!(ctnet(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(ctnet(&["gradcheck", "--scope", "everything"]).status.code(), Some(1));
    assert_eq!(ctnet(&["bench", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(ctnet(&["bench", "--mechanism", "cross"]).status.code(), Some(1));
    assert_eq!(ctnet(&["eval", "--checkpoint", "/no/such/checkpoint.json"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = ctnet(&["bench", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let cloud = dir.path().join("c.xyz");
    std::fs::write(&cloud, "0 0 0\n1 oops 0\n").unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    assert!(train(&manifest, &run, &[]).status.success());
    let ck = run.join("checkpoint.json");
    let o = ctnet(&["classify", "--checkpoint", ck.to_str().unwrap(), cloud.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn divergence_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let o = train(&manifest, &dir.path().join("run"), &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}
