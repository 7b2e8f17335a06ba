use std::path::Path;
use std::process::{Command, Output};

use flowlab::captions;

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab")).args(args).output().expect("spawn flowlab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_single_error_line(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err:?}");
    assert!(lines[0].starts_with(&format!("error[{code}]: ")), "stderr: {err:?}");
}

fn tiny_train(dir: &Path, seed: &str) -> Output {
    let out = dir.to_str().unwrap();
    flowlab(&[
        "train", "--seed", seed, "--out", out, "--steps", "20", "--batch", "16",
        "--set", "dataset.pool=200", "--set", "sampler.n_eval=32", "--set", "sampler.steps=5",
        "--set", "log_every=5", "--set", "epoch_len=10",
    ])
}

#[test]
fn missing_checkpoint_is_one_io_line() {
    let o = flowlab(&["sample", "--checkpoint", "/nonexistent/run"]);
    assert_single_error_line(&o, "E_IO");
}

#[test]
fn bad_flag_is_usage_error() {
    let o = flowlab(&["train", "--no-such-flag"]);
    assert_single_error_line(&o, "E_USAGE");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_value_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowlab(&["train", "--out", dir.path().to_str().unwrap(), "--set", "optim.lr=-1"]);
    assert_single_error_line(&o, "E_CONFIG");
    let o = flowlab(&["train", "--set", "optim.steps=not a number"]);
    assert_single_error_line(&o, "E_CONFIG");
}

#[test]
fn train_is_file_deterministic_and_sampling_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert!(tiny_train(&a, "3").status.success());
    assert!(tiny_train(&b, "3").status.success());
    for f in ["checkpoint.json", "config.toml", "report.json", "loss.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);

    let s1 = root.path().join("s1.csv");
    let s2 = root.path().join("s2.csv");
    for s in [&s1, &s2] {
        let o = flowlab(&["sample", "--checkpoint", a.to_str().unwrap(), "--n", "50", "--seed", "7", "--steps", "4", "--out", s.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&s2).unwrap());
    assert_eq!(text.lines().next(), Some("x,y"));
    assert_eq!(text.lines().count(), 51);

    let o = flowlab(&["sample", "--checkpoint", a.to_str().unwrap(), "--n", "0"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "x,y\n");

    let o = flowlab(&["sample", "--checkpoint", a.to_str().unwrap(), "--steps", "0"]);
    assert_single_error_line(&o, "E_CONTRACT");

    let o = flowlab(&["sweep", "--checkpoint", a.to_str().unwrap(), "--steps", "2,4", "--n", "40"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 11\n[optim]\nsteps = 7\nbatch = 8\n[dataset]\npool = 100\n[sampler]\nn_eval = 16\nsteps = 3\n").unwrap();
    let run = dir.path().join("run");
    let o = flowlab(&["train", "--config", cfg.to_str().unwrap(), "--steps", "6", "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&saved).unwrap();
    assert_eq!(v["seed"].as_integer(), Some(11));
    assert_eq!(v["optim"]["steps"].as_integer(), Some(6));
    assert_eq!(v["optim"]["batch"].as_integer(), Some(8));
}

fn write_corpus(dir: &Path) -> (String, String) {
    let c = captions::planted_corpus(15, 8, 4);
    let rec = dir.join("records.jsonl");
    let cand = dir.join("candidates.jsonl");
    std::fs::write(&rec, captions::to_jsonl(&c.records).unwrap()).unwrap();
    std::fs::write(&cand, captions::to_jsonl(&c.candidates).unwrap()).unwrap();
    (rec.to_str().unwrap().into(), cand.to_str().unwrap().into())
}

#[test]
fn threshold_flag_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (rec, cand) = write_corpus(dir.path());
    let cfg = dir.path().join("filter.toml");
    std::fs::write(&cfg, "threshold = 0.99\n").unwrap();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["filter-captions", "--records", &rec, "--candidates", &cand, "--config", cfg.to_str().unwrap(), "--out", out];
        args.extend_from_slice(extra);
        let o = flowlab(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(out).join("summary.json")).unwrap()).unwrap();
        s["accepted"].as_u64().unwrap()
    };
    let strict = run(&[], dir.path().join("o1").to_str().unwrap());
    let loose = run(&["--threshold", "0.1"], dir.path().join("o2").to_str().unwrap());
    assert_eq!(strict, 0);
    assert!(loose > 0);
}

#[test]
fn empty_records_give_zero_summary() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("r.jsonl");
    let cand = dir.path().join("c.jsonl");
    std::fs::write(&rec, "").unwrap();
    std::fs::write(&cand, "").unwrap();
    let out = dir.path().join("out");
    let o = flowlab(&["filter-captions", "--records", rec.to_str().unwrap(), "--candidates", cand.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["accepted"], 0);
    assert_eq!(s["rejected_threshold"], 0);
    assert_eq!(std::fs::read_to_string(out.join("accepted.jsonl")).unwrap(), "");
}

#[test]
fn malformed_jsonl_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("r.jsonl");
    std::fs::write(&rec, "{\"id\": \"a\"\n").unwrap();
    let o = flowlab(&["filter-captions", "--records", rec.to_str().unwrap(), "--candidates", rec.to_str().unwrap()]);
    assert_single_error_line(&o, "E_PARSE");
    assert!(stderr(&o).contains(":1"), "{}", stderr(&o));
}

#[test]
fn metrics_and_vae_loss_reports() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    std::fs::write(&a, "{\"id\": \"a\", \"vec\": [0.0, 1.0]}\n{\"id\": \"b\", \"vec\": [1.0, 0.0]}\n{\"id\": \"c\", \"vec\": [2.0, 2.0]}\n").unwrap();
    let o = flowlab(&["metrics", "--reference", a.to_str().unwrap(), "--generated", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["fd"].as_f64().unwrap().abs() < 1e-8);
    assert_eq!(v["paired_kl"], "not computed");

    let o = flowlab(&["vae-loss", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
    let o2 = flowlab(&["vae-loss", "--seed", "2"]);
    assert_eq!(o.stdout, o2.stdout);

    let o = flowlab(&["vae-loss", "--reference", "/nonexistent.f64", "--estimate", "/nonexistent.f64"]);
    assert_single_error_line(&o, "E_IO");
}

#[test]
fn selftest_filter_runs_one_check() {
    let o = flowlab(&["selftest", "--filter", "guidance"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("PASS guidance_identities"));
    let o = flowlab(&["selftest", "--filter", "no-such-check"]);
    assert!(!o.status.success());
}

#[test]
fn train_sample_metrics_compose() {
    let root = tempfile::tempdir().unwrap();
    let run = root.path().join("run");
    assert!(tiny_train(&run, "5").status.success());
    let a = root.path().join("a.csv");
    let b = root.path().join("b.csv");
    for (path, seed) in [(&a, "1"), (&b, "2")] {
        let o = flowlab(&["sample", "--checkpoint", run.to_str().unwrap(), "--n", "64", "--steps", "5", "--seed", seed, "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = flowlab(&["metrics", "--reference", a.to_str().unwrap(), "--generated", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fd = v["fd"].as_f64().unwrap();
    assert!(fd.is_finite() && fd > 0.0);
}
