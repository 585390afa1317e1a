use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[data]
n_samples = 96
n_eval = 24
modalities = 2
seq_len = 2
input_dim = 8

[train]
epochs = 2
batch_size = 32
d = 4
hidden_dim = 4

[output]
dir = "out"
"#;

fn camib(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camib"))
        .args(args)
        .current_dir(cwd)
        .env("CAMIB_LOG", "off")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn verify_gradients_passes_on_a_correct_build() {
    let tmp = setup();
    let out = camib(&["verify-gradients", "--instances", "100"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("summary: 10/10 passed"));
}

#[test]
fn mutated_gradient_fails_with_exit_one() {
    let tmp = setup();
    let out = camib(&["verify-gradients", "--instances", "10", "--mutate"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dvhat_ds"));
}

#[test]
fn missing_config_is_a_validation_failure() {
    let tmp = setup();
    let out = camib(&["train", "missing.cfg"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.cfg") && err.contains("No such file"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    let tmp = setup();
    for args in [&["frobnicate"][..], &["verify-gradients", "--fast"][..]] {
        let out = camib(args, tmp.path());
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn misspelt_key_is_rejected() {
    let tmp = setup();
    fs::write(tmp.path().join("bad.toml"), "[train]\nlamda1 = 0.5\n").unwrap();
    let out = camib(&["train", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda1"));
}

#[test]
fn train_is_byte_identical_across_runs() {
    let tmp = setup();
    let read = |name: &str| fs::read(tmp.path().join("out").join(name)).unwrap();
    let first = camib(&["train", "run.toml"], tmp.path());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let files: Vec<_> = ["report.json", "history.csv", "model.json"].map(read).into();
    // second run loads the saved dataset instead of regenerating it
    let second = camib(&["train", "run.toml"], tmp.path());
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(files, ["report.json", "history.csv", "model.json"].map(read));
}

#[test]
fn generate_train_evaluate_report() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(camib(&["generate-data", "run.toml"], p).status.code(), Some(0));
    assert!(p.join("out/dataset.camib").exists());
    assert_eq!(camib(&["train", "run.toml"], p).status.code(), Some(0));
    let eval = camib(&["evaluate", "run.toml", "--model", "out/model.json", "--split", "test_ood"], p);
    assert_eq!(eval.status.code(), Some(0));
    assert!(p.join("out/eval_test_ood.json").exists());
    let bad = camib(&["evaluate", "run.toml", "--model", "out/model.json", "--split", "nope"], p);
    assert_eq!(bad.status.code(), Some(1));

    let rep = camib(&["report", "out"], p);
    assert_eq!(rep.status.code(), Some(0), "{}", String::from_utf8_lossy(&rep.stderr));
    for f in ["summary.txt", "series/loss.tsv", "series/metrics.tsv", "series/splits.tsv"] {
        assert!(p.join("out").join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(p.join("out/series/loss.tsv")).unwrap();
    // 96 samples / 32 per batch × 2 epochs, plus the header
    assert_eq!(loss.lines().count(), 7);
}

#[test]
fn changed_data_settings_refuse_a_stale_dataset() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(camib(&["generate-data", "run.toml"], p).status.code(), Some(0));
    let out = camib(&["--seed", "9", "train", "run.toml"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate-data"));
}

#[test]
fn ablate_cardinality() {
    let tmp = setup();
    let out = camib(&["ablate", "run.toml", "--variants", "no_iv,no_intv", "--seeds", "1,2,3"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("out/ablation.json")).unwrap()).unwrap();
    assert_eq!(rep["runs"].as_array().unwrap().len(), 9);
    let names: Vec<&str> = rep["variants"].as_array().unwrap().iter().map(|v| v["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_iv", "no_intv"]);
}

#[test]
fn sweep_writes_one_row_per_point() {
    let tmp = setup();
    let out = camib(&["sweep", "run.toml", "--grid", "lambda1=0.1:0.3:0.1;beta=1e-4,1e-2"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("out/sweep.json")).unwrap()).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 6);
    let bad = camib(&["sweep", "run.toml", "--grid", "gamma=1"], tmp.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let tmp = setup();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    assert_eq!(camib(&["report", "empty"], tmp.path()).status.code(), Some(1));
    assert_eq!(camib(&["report", "absent"], tmp.path()).status.code(), Some(1));
}
