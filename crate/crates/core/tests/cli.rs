use std::path::Path;
use std::process::{Command, Output};

fn maskdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdiff")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout_json(out: &Output) -> Vec<serde_json::Value> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{e}: {l}")))
        .collect()
}

fn write_config(dir: &Path) -> String {
    std::fs::write(dir.join("words.txt"), "bad\ncab\nface\nfed\nhead\nbead\ngag\negg\n").unwrap();
    let cfg = r#"
version = 1

[model]
seq_len = 8
vocab_size = 10
d_model = 16
layers = 1
heads = 2
d_ff = 32
feat_len = 8

[train]
total_steps = 4
warmup_steps = 1
batch_size = 8

[data]
charset = "abcdefgh"
lexicon_path = "words.txt"
n_train = 40
n_eval = 12
seed = 5

[data.corruption]
occlusion_rate = 0.25
substitution_rate = 0.1
noise_sigma = 0.1

[infer]
policy = "blc"
steps = 3
"#;
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = maskdiff(&["train", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn errors_go_to_stderr() {
    let out = maskdiff(&["gradcheck", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_train_eval_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let recs = stdout_json(&maskdiff(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]));
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1]["n"], 12);

    let recs = stdout_json(&maskdiff(&["train", "--config", &cfg, "--seed", "3", "--out", run.to_str().unwrap()]));
    assert_eq!(recs[0]["steps"], 4);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for key in ["step", "loss_d", "loss_c", "lr", "grad_norm", "wall_ms"] {
        assert!(lines[0].get(key).is_some(), "metrics lack {key}");
    }

    let ckpt = run.join("checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    let recs = stdout_json(&maskdiff(&["eval", "--ckpt", ckpt, "--policy", "blc", "--steps", "3", "--data", data.to_str().unwrap()]));
    assert_eq!(recs.len(), 1);
    let acc = recs[0]["word_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(recs[0]["forward_passes_per_sample"], 3.0);

    let recs = stdout_json(&maskdiff(&["trace", "--ckpt", ckpt, "--word", "cab", "--policy", "blc", "--steps", "3"]));
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["input_string"].as_str().unwrap().matches("␣M").count(), 8);
    assert!(recs[2]["remasked"].as_array().unwrap().is_empty());

    let recs = stdout_json(&maskdiff(&["trace", "--ckpt", ckpt, "--word", "cab", "--policy", "ar"]));
    assert_eq!(recs.len(), 8);

    let out = maskdiff(&["eval", "--ckpt", ckpt, "--policy", "pd", "--steps", "2", "--data", data.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let recs = stdout_json(&maskdiff(&["gradcheck", "--config", &cfg, "--coords", "50"]));
    assert!(recs[0]["max_rel_err"].as_f64().unwrap() < 1e-3);
}

#[test]
fn ablate_runs_four_cells_and_k_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("ablate");
    let recs = stdout_json(&maskdiff(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "0"]));
    let cells: Vec<_> = recs.iter().filter(|r| r["kind"] == "cell").collect();
    assert_eq!(cells.len(), 4);
    let hashes: std::collections::HashSet<_> = cells.iter().map(|c| c["report"]["config_hash"].as_str().unwrap()).collect();
    assert_eq!(hashes.len(), 4);
    let blc: Vec<_> = recs
        .iter()
        .filter(|r| r["kind"] == "k_sweep" && r["point"]["report"]["policy"] == "blc")
        .map(|r| r["point"]["report"]["steps"].as_u64().unwrap())
        .collect();
    assert_eq!(blc, (1..=8).collect::<Vec<_>>());
    assert!(out.join("ablation.json").exists());
    assert!(out.join("R_All_TRN-seed0/metrics.jsonl").exists());
}
