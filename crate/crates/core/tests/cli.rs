use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppgconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppgconv")).args(args).output().expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    ppgconv(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) {
    let out = ppgconv(&["gen", "--seed", seed, "--n", "4", "--min-phones", "3", "--max-phones", "4", "--out", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn micro_config(dir: &Path, system: &str) -> std::path::PathBuf {
    let p = dir.join(format!("{system}.json"));
    let text = format!(
        r#"{{"version":1,"model":{{"preset":"micro","system":"{system}"}},"train":{{"max_steps":2,"finetune_steps":2,"batch_size":2,"val_every":1}}}}"#
    );
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen", "--seed", "1"]), 1);
    let out = tmp.path().join("g");
    assert_eq!(code(&["gen", "--seed", "1", "--n", "0", "--out", s(&out)]), 1);
    assert_eq!(code(&["gen", "--seed", "1", "--n", "2", "--min-phones", "5", "--max-phones", "2", "--out", s(&out)]), 1);
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["train", "--help"]), 0);
}

#[test]
fn non_empty_out_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    gen(&out, "1");
    assert_eq!(code(&["gen", "--seed", "2", "--n", "2", "--out", s(&out)]), 1);
    assert_eq!(code(&["gen", "--seed", "2", "--n", "2", "--out", s(&out), "--force"]), 0);
}

#[test]
fn data_errors_exit_2_and_still_write_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let missing = tmp.path().join("no_corpus");
    assert_eq!(code(&["train", "--corpus", s(&missing), "--out", s(&out)]), 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 2);
    assert_eq!(manifest["command"], "train");
    assert!(manifest["error"].is_string());

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"version":1,"train":{"momentum":0.9}}"#).unwrap();
    let corpus = tmp.path().join("c");
    gen(&corpus, "1");
    let out = ppgconv(&["train", "--config", s(&bad), "--corpus", s(&corpus), "--out", s(&tmp.path().join("t2"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.momentum"));
}

#[test]
fn injected_gradient_fault_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    assert_eq!(code(&["gradcheck", "--inject-fault", "--out", s(&out)]), 3);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    let failing: Vec<&serde_json::Value> =
        report.as_array().unwrap().iter().filter(|r| r["pass"] == false).collect();
    assert_eq!(failing.len(), 1, "{failing:?}");
}

#[test]
fn convert_requires_the_references_the_model_uses() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    gen(&corpus, "1");
    let cfg = micro_config(tmp.path(), "s3");
    let trained = tmp.path().join("t");
    assert_eq!(code(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&trained)]), 0);
    let ckpt = trained.join("checkpoint");
    let ppg = corpus.join("utt0000.ppg.tnsr");
    let ref_mel = corpus.join("utt0000.ref.tnsr");

    let out = tmp.path().join("x1");
    assert_eq!(code(&["convert", "--checkpoint", s(&ckpt), "--ppg", s(&ppg), "--phones", "p00 p01", "--out", s(&out)]), 1);
    let out = tmp.path().join("x2");
    assert_eq!(code(&["convert", "--checkpoint", s(&ckpt), "--ppg", s(&ppg), "--ref-mel", s(&ref_mel), "--out", s(&out)]), 1);
    let out = tmp.path().join("x3");
    let args = ["convert", "--checkpoint", s(&ckpt), "--ppg", s(&ppg), "--ref-mel", s(&ref_mel), "--phones", "p00 p01", "--max-steps", "4", "--out", s(&out)];
    assert_eq!(code(&args), 0);
    for f in ["mel.tnsr", "alignment.pgm", "alignment.csv", "stop.csv", "run_manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn finetune_rejects_a_mismatched_model_section() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    gen(&corpus, "1");
    let s1 = micro_config(tmp.path(), "s1");
    let trained = tmp.path().join("t");
    assert_eq!(code(&["train", "--config", s(&s1), "--corpus", s(&corpus), "--out", s(&trained)]), 0);
    let ckpt = trained.join("checkpoint");

    let s3 = micro_config(tmp.path(), "s3");
    let out = tmp.path().join("f_bad");
    assert_eq!(code(&["finetune", "--from", s(&ckpt), "--config", s(&s3), "--corpus", s(&corpus), "--out", s(&out)]), 2);

    let other = tmp.path().join("c2");
    gen(&other, "2");
    let out = tmp.path().join("f_ok");
    assert_eq!(code(&["finetune", "--from", s(&ckpt), "--config", s(&s1), "--corpus", s(&other), "--out", s(&out)]), 0);
    assert!(out.join("checkpoint").join("model.tnsr").is_file());
}

#[test]
fn resume_needs_optimizer_state() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    gen(&corpus, "1");
    let cfg = micro_config(tmp.path(), "s1");
    let trained = tmp.path().join("t");
    assert_eq!(code(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&trained)]), 0);
    let out = tmp.path().join("r_bad");
    let best = trained.join("checkpoint");
    assert_eq!(code(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--resume", s(&best), "--out", s(&out)]), 2);
    let out = tmp.path().join("r_ok");
    let last = trained.join("last");
    assert_eq!(code(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--resume", s(&last), "--out", s(&out)]), 0);
}
