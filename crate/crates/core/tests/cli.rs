use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use varident::data::Dataset;
use varident::trainer::restore;

fn varident(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varident"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VARIDENT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gendata_is_deterministic_and_counts_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&varident(&["gendata", "--out", "a.vrds", "--csv"], p)), 0);
    assert_eq!(code(&varident(&["gendata", "--out", "b.vrds"], p)), 0);
    assert_eq!(sha(&p.join("a.vrds")), sha(&p.join("b.vrds")));
    assert_eq!(Dataset::read(&p.join("a.vrds")).unwrap().len(), 384);
    let prov = json(&p.join("a.vrds.provenance.json"));
    assert_eq!(prov["dataset_sha256"].as_str().unwrap(), sha(&p.join("a.vrds")));
    let probe = &prov["identity_probe"];
    assert!(probe["raw_accuracy"].as_f64().unwrap() > probe["chance"].as_f64().unwrap());
    let csv = fs::read_to_string(p.join("a.vrds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 385);
    assert!(csv.starts_with("id,modality,f_0,"));

    assert_eq!(code(&varident(&["gendata", "--out", "c.vrds", "--seed", "9"], p)), 0);
    assert_ne!(sha(&p.join("a.vrds")), sha(&p.join("c.vrds")));
}

#[test]
fn malformed_config_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("bad.toml"), "[data]\nn_identities = \"many\"\n").unwrap();
    let o = varident(&["gendata", "--config", "bad.toml", "--out", "x.vrds"], p);
    assert_eq!(code(&o), 1);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    fs::write(p.join("unknown.toml"), "learning_rate = 0.1\n").unwrap();
    assert_eq!(code(&varident(&["train", "--config", "unknown.toml", "--out", "run"], p)), 1);
    let left: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left.len(), 2, "{left:?}");
    assert_eq!(code(&varident(&["train", "--out", "run", "--ablate", "id"], p)), 1);
    assert_eq!(code(&varident(&["train", "--out", "run", "--stage-epochs", "1,2"], p)), 1);
    assert!(!p.join("run").exists());
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = varident(&["train", "--out", "run", "--stage-epochs", "1,1,1", "--seed", "3"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = p.join("run");
    for f in [
        "config.toml",
        "provenance.json",
        "data.vrds",
        "metrics.jsonl",
        "stage1.ckpt",
        "stage2.ckpt",
        "stage3.ckpt",
        "last.ckpt",
        "metrics.json",
        "histogram.csv",
        "embeddings.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("seed = 3"));
    assert!(config.contains("epochs = [1, 1, 1]"));
    let prov = json(&run.join("provenance.json"));
    assert_eq!(prov["seed"], 3);
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);

    let lines: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let events: Vec<(&str, u64)> = lines
        .iter()
        .map(|l| (l["event"].as_str().unwrap(), l["stage"].as_u64().unwrap()))
        .collect();
    assert_eq!(
        events,
        [("epoch", 1), ("stage_done", 1), ("epoch", 2), ("stage_done", 2), ("epoch", 3), ("stage_done", 3)]
    );
    assert!(lines[2]["terms"]["gmm"].is_null());
    assert!(lines[2]["terms"]["rec"].as_f64().unwrap().is_finite());

    let metrics = json(&run.join("metrics.json"));
    for key in ["retrieval", "distance_stats", "probe", "collapse", "swap_consistency"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    for key in ["rank1", "rank10", "map"] {
        assert!(metrics["retrieval"][key].is_number());
    }
    for key in ["idi_accuracy", "iai_accuracy", "chance"] {
        assert!(metrics["probe"][key].is_number());
    }
    let hist = fs::read_to_string(run.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "bin_left,count_intra,count_inter");

    let s1 = restore(&run.join("stage1.ckpt")).unwrap();
    assert_eq!(s1.stage.number(), 2);
    assert_eq!(s1.epoch, 0);

    let again = varident(&["train", "--out", "run"], p);
    assert_eq!(code(&again), 1);
}

#[test]
fn baseline_ablation_skips_reconstruction_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = varident(
        &["train", "--out", "base", "--stage-epochs", "1,1,1", "--ablate", "gmm,lmc,rec,idc,cyc,ambi"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let prov = json(&p.join("base/provenance.json"));
    assert_eq!(prov["ablated_terms"].as_array().unwrap().len(), 6);
    let stream = fs::read_to_string(p.join("base/metrics.jsonl")).unwrap();
    assert!(!stream.contains("\"event\":\"epoch\",\"stage\":2"));
    assert!(stream.lines().filter(|l| l.contains("\"event\":\"epoch\"")).all(|l| {
        let v: Value = serde_json::from_str(l).unwrap();
        ["gmm", "lmc", "rec", "idc", "cyc", "ambi"].iter().all(|t| v["terms"][t].is_null())
    }));
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let common = ["--stage-epochs", "2,2,2", "--seed", "4"];
    let full = varident(&[&["train", "--out", "full"][..], &common].concat(), p);
    assert_eq!(code(&full), 0);
    let part = varident(&[&["train", "--out", "part", "--stop-after-epochs", "3"][..], &common].concat(), p);
    assert_eq!(code(&part), 0);
    assert!(!p.join("part/metrics.json").exists());
    assert_eq!(restore(&p.join("part/last.ckpt")).unwrap().stage.number(), 2);
    let resumed = varident(&["train", "--out", "part", "--resume"], p);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    for f in ["metrics.jsonl", "last.ckpt", "stage3.ckpt", "metrics.json", "embeddings.csv"] {
        assert_eq!(sha(&p.join("full").join(f)), sha(&p.join("part").join(f)), "{f} differs");
    }
    assert_eq!(code(&varident(&["train", "--out", "part", "--resume", "--seed", "1"], p)), 1);
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("blowup.toml"),
        "[training]\nepochs = [1, 3, 1]\nlearning_rates = [1e-3, 1e300, 1e-4]\n",
    )
    .unwrap();
    let o = varident(&["train", "--config", "blowup.toml", "--out", "run"], p);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let last = restore(&p.join("run/last.ckpt")).unwrap();
    assert!(last.model.params().iter().all(|q| q.value.all_finite()));
    assert!(p.join("run/stage1.ckpt").exists());
    assert!(!p.join("run/stage2.ckpt").exists());
    assert!(!p.join("run/metrics.json").exists());
    assert!(!p.join("run/.lock").exists());
}

#[test]
fn eval_of_untrained_checkpoint_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&varident(&["train", "--out", "zero", "--stage-epochs", "0,0,0"], p)), 0);
    let o = varident(
        &["eval", "--checkpoint", "zero/last.ckpt", "--data", "zero/data.vrds", "--out", "ev"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&p.join("ev/metrics.json"));
    let rank1 = m["retrieval"]["rank1"].as_f64().unwrap();
    assert!(rank1 <= 3.0 / 8.0, "{rank1}");
    assert_eq!(m["retrieval"]["draws"], 10);
    assert_eq!(sha(&p.join("ev/metrics.json")), sha(&p.join("zero/metrics.json")));

    assert_eq!(code(&varident(&["gendata", "--out", "wide.vrds"], p)), 0);
    fs::write(p.join("wide.toml"), "[data]\nraw_dim = 16\n").unwrap();
    assert_eq!(code(&varident(&["gendata", "--config", "wide.toml", "--out", "narrow.vrds"], p)), 0);
    let o = varident(&["eval", "--checkpoint", "zero/last.ckpt", "--data", "narrow.vrds", "--out", "ev2"], p);
    assert_eq!(code(&o), 1);
    let o = varident(&["eval", "--checkpoint", "missing.ckpt", "--data", "wide.vrds", "--out", "ev3"], p);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_reports_residuals_and_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = varident(&["verify", "--out", "v.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&p.join("v.json"));
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 12);
    assert!(checks.iter().all(|c| c["residual"].is_number()));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));

    let t = varident(&["verify", "--mc-samples", "100000", "--tamper-kl-scale", "1.02"], p);
    assert_eq!(code(&t), 2);
    assert!(String::from_utf8_lossy(&t.stdout).contains("FAIL kl_closed_form_vs_monte_carlo"));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("run")).unwrap();
    fs::write(p.join("run/.lock"), "1").unwrap();
    let o = varident(&["train", "--out", "run", "--stage-epochs", "1,0,0"], p);
    assert_eq!(code(&o), 3);
    assert!(!p.join("run/config.toml").exists());
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_varident"))
        .args(["verify", "--mc-samples", "1000"])
        .env("VARIDENT_THREADS", "none")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
