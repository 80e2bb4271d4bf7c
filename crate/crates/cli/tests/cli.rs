use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = "\
# small enough to train in seconds
data.frames = 60
train.steps = 3
train.batch = 4
train.checkpoint_every = 2
encoder.image_size = 32
encoder.conv_widths = 4,4,8
encoder.capsules = 4
match.seq_len = 5
";

fn mdfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdfl")).args(args).output().expect("spawn mdfl")
}

fn ok(args: &[&str]) -> Vec<PathBuf> {
    let out = mdfl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(PathBuf::from).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn digest(p: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(p).unwrap()).to_vec()
}

fn synth(cfg: &Path, out: &Path) -> Vec<PathBuf> {
    ok(&["synth", "--config", s(cfg), "--out", s(out)])
}

#[test]
fn synth_is_idempotent() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let wa = synth(&cfg, &a);
    let wb = synth(&cfg, &b);
    assert_eq!(wa.len(), wb.len());
    for (x, y) in wa.iter().zip(&wb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(digest(x), digest(y), "{}", x.display());
    }
    let again = synth(&cfg, &a);
    assert_eq!(again.iter().map(|p| digest(p)).collect::<Vec<_>>(), wb.iter().map(|p| digest(p)).collect::<Vec<_>>());
}

#[test]
fn seed_flag_changes_the_dataset() {
    let (dir, cfg) = setup();
    let a = synth(&cfg, &dir.path().join("a"));
    let b = ok(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("b")), "--seed", "5"]);
    let test_file = |w: &[PathBuf]| w.iter().find(|p| p.ends_with("test.mdfld")).unwrap().clone();
    assert_ne!(digest(&test_file(&a)), digest(&test_file(&b)));
}

#[test]
fn sad_self_match_is_fully_correct() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    synth(&cfg, &data);
    let feats = dir.path().join("feats");
    ok(&["encode", "--config", s(&cfg), "--out", s(&feats), "--data", s(&data), "--features", "sad"]);
    let f = feats.join("sad_c1.mdflf");
    let written = ok(&["match", "--config", s(&cfg), "--out", s(&dir.path().join("m")), "--query", s(&f), "--ref", s(&f)]);
    let csv = written.iter().find(|p| p.extension().is_some_and(|e| e == "csv")).unwrap();
    let text = fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "query_index,ref_index,score,accepted,correct");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.ends_with(",1")), "{text}");
}

#[test]
fn small_pipeline_end_to_end() {
    let (dir, cfg) = setup();
    let p = |n: &str| dir.path().join(n);
    let c = s(&cfg);
    synth(&cfg, &p("data"));
    let train = ok(&["train", "--config", c, "--out", s(&p("train")), "--data", s(&p("data"))]);
    let names: Vec<String> = train.iter().map(|x| x.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for want in ["ckpt_000000.mdflw", "ckpt_000002.mdflw", "ckpt_000003.mdflw", "train_log.csv", "config.resolved"] {
        assert!(names.iter().any(|n| n == want), "{names:?}");
    }
    let ckpt = p("train").join("ckpt_000003.mdflw");
    let (feats, data, report_dir) = (p("feats"), p("data"), p("report"));
    for kind in ["caps", "vlad", "sad"] {
        let mut args = vec!["encode", "--config", c, "--out", s(&feats), "--data", s(&data), "--features", kind];
        if kind == "caps" {
            args.extend(["--checkpoint", s(&ckpt)]);
        }
        ok(&args);
    }
    let mut matches = Vec::new();
    for kind in ["caps", "vlad", "sad"] {
        let q = p("feats").join(format!("{kind}_c0.mdflf"));
        let r = p("feats").join(format!("{kind}_c1.mdflf"));
        let w = ok(&["match", "--config", c, "--out", s(&p("m")), "--query", s(&q), "--ref", s(&r)]);
        matches.push(w.last().unwrap().clone());
    }
    assert!(matches[0].ends_with("caps_c0-c1.csv"));
    let mut args = vec!["eval", "--config", c, "--out", s(&report_dir)];
    args.extend(matches.iter().map(|m| s(m)));
    ok(&args);
    let report = fs::read_to_string(p("report").join("report.csv")).unwrap();
    let mut rows = 0;
    for line in report.lines().skip(1) {
        let auc: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc), "{line}");
        rows += 1;
    }
    assert!(rows >= 3, "{report}");
    assert!(p("report").join("report.json").exists());

    ok(&["diag", "--config", c, "--out", s(&p("diag")), "--data", s(&p("data")), "--checkpoint", s(&p("train"))]);
    let diag = fs::read_to_string(p("diag").join("diag.csv")).unwrap();
    assert_eq!(diag.lines().count(), 4, "{diag}");
}

#[test]
fn help_lists_every_flag() {
    let common = ["--config", "--out", "--seed", "--set"];
    let cases: [(&str, &[&str]); 6] = [
        ("synth", &[]),
        ("train", &["--data", "--checkpoint"]),
        ("encode", &["--data", "--features", "--checkpoint"]),
        ("match", &["--query", "--ref"]),
        ("eval", &["<MATCHES>"]),
        ("diag", &["--data", "--checkpoint"]),
    ];
    for (sub, extra) in cases {
        let out = mdfl(&[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in common.iter().chain(extra) {
            assert!(text.contains(flag), "{sub} --help lacks {flag}:\n{text}");
        }
    }
}

fn expect_failure(args: &[&str], code: i32, kind: &str) -> String {
    let out = mdfl(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error kind={kind} exit={code}: ")), "{err}");
    err
}

#[test]
fn argument_and_config_errors_exit_2() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    expect_failure(&["synth", "--out", s(&out)], 2, "config");
    expect_failure(&["encode", "--config", s(&cfg), "--out", s(&out), "--data", "x", "--features", "orb"], 2, "config");
    let err = expect_failure(&["synth", "--config", s(&cfg), "--out", s(&out), "--set", "train.nope=1"], 2, "config");
    assert!(err.contains("train.nope"), "{err}");
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "data.frames = 60\nmatch.ratio = many\n").unwrap();
    let err = expect_failure(&["synth", "--config", s(&bad), "--out", s(&out)], 2, "config");
    assert!(err.contains("line 2"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_3_without_outputs() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let missing = dir.path().join("nothing");
    expect_failure(&["train", "--config", s(&cfg), "--out", s(&out), "--data", s(&missing)], 3, "data");
    assert!(!out.exists());
}

#[test]
fn failed_command_removes_its_partial_outputs() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    synth(&cfg, &data);
    // a checkpoint of another architecture fails after the config echo is written
    let other = dir.path().join("other.cfg");
    fs::write(&other, format!("{SMALL}encoder.capsules = 2\ntrain.steps = 0\n")).unwrap();
    ok(&["train", "--config", s(&other), "--out", s(&dir.path().join("t2")), "--data", s(&data)]);
    let foreign = dir.path().join("t2").join("ckpt_000000.mdflw");

    let fresh = dir.path().join("fresh");
    let out = mdfl(&["train", "--config", s(&cfg), "--out", s(&fresh), "--data", s(&data), "--checkpoint", s(&foreign)]);
    assert!(!out.status.success());
    assert!(!fresh.exists(), "a new output directory is removed on failure");

    let existing = dir.path().join("existing");
    fs::create_dir(&existing).unwrap();
    fs::write(existing.join("keep.txt"), "mine").unwrap();
    let out = mdfl(&["train", "--config", s(&cfg), "--out", s(&existing), "--data", s(&data), "--checkpoint", s(&foreign)]);
    assert!(!out.status.success());
    let left: Vec<_> = fs::read_dir(&existing).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("keep.txt")]);
}

#[test]
fn config_echo_round_trips() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    ok(&["synth", "--config", s(&cfg), "--out", s(&a), "--seed", "9", "--set", "match.ratio=0.8"]);
    let echo = a.join("config.resolved");
    let text = fs::read_to_string(&echo).unwrap();
    assert!(text.lines().any(|l| l.replace(' ', "") == "seed=9"), "{text}");
    assert!(text.lines().any(|l| l.replace(' ', "") == "match.ratio=0.8"), "{text}");
    let b = dir.path().join("b");
    ok(&["synth", "--config", s(&echo), "--out", s(&b)]);
    assert_eq!(fs::read_to_string(b.join("config.resolved")).unwrap(), text);
    assert_eq!(digest(&a.join("test.mdfld")), digest(&b.join("test.mdfld")));
}
