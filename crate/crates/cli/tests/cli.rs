use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concurl_cli::run::RunManifest;
use concurl_core::{MetricReport, ModelState, TrainConfig};
use serde_json::Value;

const SYNTH: &str = "blobs:k=3,n=40,dim=4,spread=0.3,sep=4,seed=3";

fn concurl<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_concurl")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "concurl failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train(dir: &Path, synth: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--synth", synth, "--batch-size", "32", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(concurl(&args));
    dir.to_path_buf()
}

fn stats(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("stats.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_seconds");
            v
        })
        .collect()
}

fn final_state(run: &Path) -> ModelState {
    ModelState::load(run.join("checkpoints/final.json")).unwrap()
}

fn metrics(dir: &Path) -> MetricReport {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn zero_epochs_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "0"]);
    assert!(stats(&run).is_empty());
    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m.config.k, 3);
    assert!(m.finished_at.is_some());
    assert_eq!(final_state(&run).epoch, 0);
    assert!(run.join("metrics.json").exists());
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "alpha = 0.5\nlr = 0.01\n").unwrap();
    let run = tmp.path().join("r");
    ok(concurl([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--synth",
        SYNTH,
        "--lr",
        "0.02",
        "--epochs",
        "0",
        "--out",
        run.to_str().unwrap(),
    ]));
    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m.config.alpha, 0.5);
    assert_eq!(m.config.lr, 0.02);
    assert_eq!(m.config.beta, TrainConfig::default().beta);
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for (name, text) in [("a", "alpha = 0.5\ntau_id = 0.3\nseed = 4\n"), ("b", "seed = 4\ntau_id = 0.3\nalpha = 0.5\n")] {
        let cfg = tmp.path().join(format!("{name}.toml"));
        fs::write(&cfg, text).unwrap();
        let run = tmp.path().join(name);
        ok(concurl([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--synth",
            SYNTH,
            "--epochs",
            "0",
            "--out",
            run.to_str().unwrap(),
        ]));
        hashes.push(RunManifest::read(&run).unwrap().config_hash);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn every_config_problem_is_reported_at_once() {
    let tmp = tempfile::tempdir().unwrap();
    let out = concurl([
        "train",
        "--synth",
        SYNTH,
        "--tau-id",
        "-1",
        "--epsilon",
        "0",
        "--batch-size",
        "1",
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3 problem(s)"), "{err}");
    for field in ["tau_id", "epsilon", "batch_size"] {
        assert!(err.contains(field), "missing {field} in: {err}");
    }
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn bad_data_flags_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = concurl(["train", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = concurl(["train", "--synth", "blobs:k=x", "--out", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn identical_invocations_give_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tmp.path().join("a"), SYNTH, &["--epochs", "6"]);
    let b = train(&tmp.path().join("b"), SYNTH, &["--epochs", "6"]);
    assert_eq!(stats(&a).len(), 6);
    assert_eq!(stats(&a), stats(&b));
    assert_eq!(
        fs::read(a.join("checkpoints/final.json")).unwrap(),
        fs::read(b.join("checkpoints/final.json")).unwrap()
    );
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
}

#[test]
fn zero_alpha_total_is_the_instance_term_while_consensus_is_still_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "3", "--alpha", "0"]);
    for s in stats(&run) {
        assert_eq!(s["l_total"], s["l_b"]);
        assert!(s["l_z"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn decay_epochs_get_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "epochs = 4\nbatch_size = 32\nlr_decay_epochs = [2, 3]\n").unwrap();
    let run = tmp.path().join("r");
    ok(concurl([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--synth",
        SYNTH,
        "--out",
        run.to_str().unwrap(),
    ]));
    let ckpts = run.join("checkpoints");
    assert!(ckpts.join("epoch_0002.json").exists());
    assert!(ckpts.join("epoch_0003.json").exists());
    assert!(!ckpts.join("epoch_0004.json").exists());
    assert_eq!(ModelState::load(ckpts.join("epoch_0002.json")).unwrap().epoch, 2);
}

#[test]
fn eval_replays_the_training_report_from_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "5"]);
    let manifest = RunManifest::read(&run).unwrap();
    let concurl_cli::config::DataSource::Synth(spec) = manifest.data_source else {
        panic!("expected a synthetic source");
    };
    let out = tmp.path().join("eval");
    ok(concurl([
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--synth",
        &spec,
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(metrics(&out), metrics(&run));
    assert_eq!(fs::read(out.join("confusion.csv")).unwrap(), fs::read(run.join("confusion.csv")).unwrap());
}

#[test]
fn eval_on_other_data_uses_its_own_cluster_count_and_checks_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "2"]);
    let out = tmp.path().join("eval5");
    ok(concurl([
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--synth",
        "blobs:k=5,n=20,dim=4,spread=0.3,sep=4,seed=9",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(metrics(&out).matched_confusion.dim(), (5, 5));

    let bad = concurl([
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--synth",
        "blobs:k=3,n=20,dim=6,seed=9",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dimension mismatch"));
}

#[test]
fn cross_dataset_accuracy_does_not_beat_training_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut same, mut cross) = (0.0, 0.0);
    for seed in 0..5 {
        let home = format!("blobs:k=3,n=40,dim=4,spread=0.6,sep=3,seed={}", 10 + seed);
        let away = format!("blobs:k=3,n=40,dim=4,spread=0.6,sep=3,seed={}", 50 + seed);
        let run = train(&tmp.path().join(format!("r{seed}")), &home, &["--epochs", "10", "--seed", &seed.to_string()]);
        same += metrics(&run).acc;
        let out = tmp.path().join(format!("x{seed}"));
        ok(concurl([
            "eval",
            "--checkpoint",
            run.to_str().unwrap(),
            "--synth",
            &away,
            "--out",
            out.to_str().unwrap(),
        ]));
        cross += metrics(&out).acc;
    }
    assert!(cross <= same, "cross-dataset mean ACC {} above same-dataset {}", cross / 5.0, same / 5.0);
}

fn sweep(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["sweep", "--synth", SYNTH, "--batch-size", "32", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(concurl(&args));
    dir.to_path_buf()
}

#[test]
fn single_point_sweep_matches_plain_training() {
    let tmp = tempfile::tempdir().unwrap();
    let sw = sweep(&tmp.path().join("sw"), &["--epochs", "4"]);
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "4"]);
    let trial = sw.join("trial_0000");
    assert_eq!(stats(&trial), stats(&run));
    assert_eq!(final_state(&trial), final_state(&run));
    assert_eq!(metrics(&trial), metrics(&run));
}

#[test]
fn empty_ensemble_trial_matches_instance_only_training() {
    let tmp = tempfile::tempdir().unwrap();
    let sw = sweep(&tmp.path().join("sw"), &["--epochs", "3", "--ensemble-size-grid", "0,2"]);
    let baseline = train(&tmp.path().join("id"), SYNTH, &["--epochs", "3", "--alpha", "0", "--ensemble-size", "2"]);
    let (m0, id) = (final_state(&sw.join("trial_0000")), final_state(&baseline));
    assert_eq!(m0.config.ensemble_size, 0);
    assert_eq!(m0.params, id.params);
    assert_eq!(m0.velocity, id.velocity);
    assert_eq!(m0.bank, id.bank);
    assert_ne!(final_state(&sw.join("trial_0001")).params, id.params);
}

#[test]
fn sweep_conditional_means_agree_with_the_trial_table() {
    let tmp = tempfile::tempdir().unwrap();
    let sw = sweep(
        &tmp.path().join("sw"),
        &["--epochs", "2", "--tau-id-grid", "0.3,0.5", "--ensemble-size-grid", "0,2", "--workers", "2"],
    );
    let mut rdr = csv::Reader::from_path(sw.join("sweep_summary.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(&rec[col("status")], "ok");
        let acc: f64 = rec[col("acc")].parse().unwrap();
        for h in ["tau_id", "lr", "ensemble_size", "proj_dim"] {
            let v: f64 = rec[col(h)].parse().unwrap();
            groups.entry((h.to_string(), v.to_string())).or_default().push(acc);
        }
        rows += 1;
    }
    assert_eq!(rows, 4);

    let mut rdr = csv::Reader::from_path(sw.join("sweep_conditional_means.csv")).unwrap();
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let accs = &groups[&(rec[0].to_string(), rec[1].to_string())];
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64).sqrt();
        assert_eq!(rec[2].parse::<usize>().unwrap(), accs.len());
        assert!((rec[3].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((rec[4].parse::<f64>().unwrap() - std).abs() < 1e-12);
        seen += 1;
    }
    assert_eq!(seen, groups.len());

    let hist = fs::read_to_string(sw.join("sweep_acc_histogram.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4);
}

#[test]
fn training_brings_the_ensemble_into_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = "blobs:k=3,n=50,dim=2,spread=0.3,sep=4,seed=7";
    let run = train(&tmp.path().join("r"), synth, &["--epochs", "60"]);
    let out = tmp.path().join("div");
    ok(concurl([
        "diversity",
        "--checkpoint",
        run.to_str().unwrap(),
        "--synth",
        synth,
        "--out",
        out.to_str().unwrap(),
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("diversity.json")).unwrap()).unwrap();
    let untrained = report["untrained"]["mean"].as_f64().unwrap();
    let trained = report["checkpoint"]["mean"].as_f64().unwrap();
    assert!(trained > untrained, "trained {trained} vs untrained {untrained}");
    assert_eq!(report["per_epoch"].as_array().unwrap().len(), 60);
    assert!(out.join("diversity.csv").exists());
}

#[test]
fn identical_transforms_agree_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(&tmp.path().join("r"), SYNTH, &["--epochs", "1", "--ensemble-size", "2"]);
    let mut state = final_state(&run);
    state.ensemble.transforms[1] = state.ensemble.transforms[0].clone();
    let ckpt = tmp.path().join("twin.json");
    state.save(&ckpt).unwrap();
    let out = ok(concurl(["diversity", "--checkpoint", ckpt.to_str().unwrap(), "--synth", SYNTH]));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["checkpoint"]["mean"].as_f64(), Some(1.0));
    assert_eq!(report["checkpoint"]["std"].as_f64(), Some(0.0));

    let single = train(&tmp.path().join("m1"), SYNTH, &["--epochs", "0", "--ensemble-size", "1"]);
    let out = concurl(["diversity", "--checkpoint", single.to_str().unwrap(), "--synth", SYNTH]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_demo_writes_its_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(concurl(["synth-demo", "--out", tmp.path().to_str().unwrap()]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("argmax agreement"));
    for f in ["synth_demo.csv", "synth_demo_full.csv", "synth_demo_summary.json"] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let full = fs::read_to_string(tmp.path().join("synth_demo_full.csv")).unwrap();
    assert_eq!(full.lines().count(), 151);
}
