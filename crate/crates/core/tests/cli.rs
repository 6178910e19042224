mod common;

use std::path::Path;
use std::process::{Command, Output};

use fusebench::trainer::Checkpoint;

fn fusebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusebench"))
        .args(args)
        .env_remove("FUSEBENCH_THREADS")
        .output()
        .expect("run fusebench")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_corpus(dir: &Path) -> (String, String) {
    let c = common::tiny_corpus(dir, 0);
    (s(&c.classification_path).to_string(), s(&c.transcription_path).to_string())
}

#[test]
fn help_documents_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("synth", &["--spec", "--out", "--seed"]),
        (
            "train",
            &[
                "--manifest", "--config", "--mode", "--task", "--steps", "--seed", "--lr-head", "--lr-fusion",
                "--p-learnable", "--batch-size", "--optimizer", "--eval-every", "--models", "--out", "--trace",
            ],
        ),
        ("eval", &["--manifest", "--ckpt", "--split", "--out"]),
        ("analyze", &["--ckpt", "--out"]),
        (
            "gradcheck",
            &["--manifest", "--mode", "--task", "--tolerance", "--step", "--record", "--seed", "--p-learnable"],
        ),
    ];
    let top = fusebench(&["--help"]);
    assert!(top.status.success());
    let top = String::from_utf8(top.stdout).unwrap();
    for (cmd, flags) in expected {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
        let out = fusebench(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in *flags {
            let line = text.lines().find(|l| l.trim_start().starts_with(flag)).unwrap_or_else(|| panic!("{cmd} {flag}"));
            // a flag line carries its description, either inline or on the next line
            let idx = text.lines().position(|l| l == line).unwrap();
            let next = text.lines().nth(idx + 1).unwrap_or("");
            let described = line.trim().len() > flag.len() + 12 || !next.trim().is_empty();
            assert!(described, "{cmd} {flag} undocumented:\n{text}");
        }
    }
}

#[test]
fn synth_with_missing_spec_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("absent.cfg");
    let out = fusebench(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&spec)));
}

#[test]
fn synth_with_bad_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.cfg");
    std::fs::write(&spec, "layer_cont = 3\n").unwrap();
    let out = fusebench(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer_cont"));
}

#[test]
fn synth_writes_manifests_and_prints_paths() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.cfg");
    std::fs::write(&spec, "utterance_count = 6\nlayer_count = 3\n# comment\n").unwrap();
    let out_dir = dir.path().join("c");
    let out = fusebench(&["synth", "--spec", s(&spec), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    let m = fusebench::stackio::load_manifest(lines[0]).unwrap();
    assert_eq!(m.records.len(), 6);
    assert_eq!(m.model_count(), 2);
}

#[test]
fn invalid_mode_lists_valid_modes() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, _) = tiny_corpus(dir.path());
    let ck = dir.path().join("x.ckpt");
    let out = fusebench(&["train", "--manifest", &sid, "--mode", "average", "--task", "sid", "--out", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for m in ["naive", "structured", "prob-shared", "prob-individual", "last-layer"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn one_step_train_writes_loadable_checkpoint_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (_, asr) = tiny_corpus(dir.path());
    let ck = dir.path().join("run.ckpt");
    let out = fusebench(&["train", "--manifest", &asr, "--mode", "prob-shared", "--task", "asr", "--steps", "1", "--out", s(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!(c.step, 1);
    let trace = std::fs::read_to_string(dir.path().join("run.trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,loss,metric_name,metric_value"));
    assert!(lines.next().unwrap().starts_with("1,"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, _) = tiny_corpus(dir.path());
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "mode = structured\ntask = sid\nsteps = 3\nbatch_size = 2\nmodels = 2\n").unwrap();
    let ck = dir.path().join("r.ckpt");
    let out = fusebench(&["train", "--manifest", &sid, "--config", s(&cfg), "--seed", "5", "--out", s(&ck)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let c = Checkpoint::load(&ck).unwrap();
    assert_eq!((c.config.steps, c.config.batch_size, c.config.seed), (3, 2, 5));
    assert_eq!(c.config.models, Some(vec![2]));
    assert_eq!(c.model_dims.len(), 1);
}

#[test]
fn eval_and_analyze_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, _) = tiny_corpus(dir.path());
    let ck = dir.path().join("r.ckpt");
    let out = fusebench(&["train", "--manifest", &sid, "--mode", "naive", "--task", "sid", "--steps", "4", "--out", s(&ck)]);
    assert!(out.status.success());

    let out = fusebench(&["eval", "--manifest", &sid, "--ckpt", s(&ck), "--split", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "record_id,metric,value");
    assert_eq!(rows.len(), 1 + 20 + 1);
    assert!(rows.last().unwrap().starts_with("corpus,accuracy,"));

    let out = fusebench(&["analyze", "--ckpt", s(&ck)]);
    assert!(out.status.success());
    let weights = std::fs::read_to_string(dir.path().join("weights.csv")).unwrap();
    let mut total = 0.0;
    for line in weights.lines().skip(1) {
        total += line.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    }
    assert!((total - 1.0).abs() < 1e-9);

    let out = fusebench(&["eval", "--manifest", &sid, "--ckpt", s(&dir.path().join("none.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(dir.path().join("junk.ckpt"), b"junk").unwrap();
    let out = fusebench(&["analyze", "--ckpt", s(&dir.path().join("junk.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_reports_each_group_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (sid, asr) = tiny_corpus(dir.path());
    for (m, task) in [(&sid, "sid"), (&asr, "asr")] {
        let out = fusebench(&["gradcheck", "--manifest", m, "--mode", "prob-individual", "--task", task, "--p-learnable"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.lines().all(|l| l.starts_with("PASS ")));
        assert!(text.contains("fusion.model_logits") && text.contains("head2.weight"));
    }
    // an impossible tolerance makes the check fail with exit 1
    let out = fusebench(&["gradcheck", "--manifest", &sid, "--mode", "naive", "--task", "sid", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (_, asr) = tiny_corpus(dir.path());
    let mut bytes = Vec::new();
    for threads in ["1", "3"] {
        let ck = dir.path().join(format!("t{threads}.ckpt"));
        let out = Command::new(env!("CARGO_BIN_EXE_fusebench"))
            .args(["train", "--manifest", &asr, "--mode", "structured", "--task", "asr", "--steps", "6", "--eval-every", "3"])
            .args(["--out", s(&ck)])
            .env("FUSEBENCH_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        bytes.push((std::fs::read(&ck).unwrap(), std::fs::read(ck.with_extension("trace.csv")).unwrap()));
    }
    assert!(bytes[0] == bytes[1]);

    let out = Command::new(env!("CARGO_BIN_EXE_fusebench"))
        .args(["train", "--manifest", &asr, "--mode", "naive", "--task", "asr", "--out", s(&dir.path().join("z"))])
        .env("FUSEBENCH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
