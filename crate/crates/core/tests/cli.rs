use std::fs;
use std::path::{Path, PathBuf};

use abnet::abx::AbxReport;
use abnet::cli::{run_cli, RunRecord};
use abnet::structure::McGurkReport;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["abnet"];
    argv.extend_from_slice(args);
    run_cli(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth_cfg = root.join("synth.json");
    fs::write(&synth_cfg, r#"{"speakers": 3, "words": 10, "eval_contexts": 1, "eval_reps": 2}"#).unwrap();
    let config = root.join("exp.json");
    fs::write(
        &config,
        r#"{"net": {"hidden_layers": 1, "hidden_units": 16, "block_dim": 4},
            "train": {"epochs": 2, "pairs_per_epoch": 20, "batch_size": 64},
            "abx_budget": 20,
            "mcgurk": {"budget": 20}}"#,
    )
    .unwrap();
    let corpus = root.join("corpus");
    assert_eq!(run(&["synth", "--out", s(&corpus), "--seed", "7", "--config", s(&synth_cfg)]), 0);
    Fixture {
        _dir: dir,
        manifest: corpus.join("manifest.json"),
        root,
        config,
    }
}

#[test]
fn synth_writes_corpus_and_run_record() {
    let f = fixture();
    let corpus = f.manifest.parent().unwrap();
    for name in ["manifest.json", "inventory.json", "oracle.json", "run.json"] {
        assert!(corpus.join(name).exists(), "{name}");
    }
    let rec: RunRecord = serde_json::from_str(&fs::read_to_string(corpus.join("run.json")).unwrap()).unwrap();
    assert_eq!(rec.command, "synth");
    assert_eq!(rec.seed, 7);
    assert_eq!(rec.config["speakers"], 3);
    let loaded = abnet::corpus::load_corpus(&f.manifest).unwrap();
    assert!(abnet::corpus::validate_corpus(&loaded).is_valid());
}

#[test]
fn train_evaluate_aggregate_and_replay() {
    let f = fixture();
    let model = f.root.join("model");
    let raw = f.root.join("raw");
    let m = s(&f.manifest);
    let cfg = s(&f.config);
    assert_eq!(run(&["train", "--corpus", m, "--mode", "multi", "--out", s(&model), "--config", cfg, "--seed", "3"]), 0);
    for name in ["model.json", "run.json", "train_log.csv", "network/network.json", "prep/prep.json"] {
        assert!(model.join(name).exists(), "{name}");
    }
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,heldout_loss,seconds\n"));
    assert_eq!(log.lines().count(), 3);
    assert_eq!(run(&["train", "--corpus", m, "--mode", "raw", "--out", s(&raw), "--config", cfg]), 0);

    let abx = f.root.join("reports/abx_v.json");
    assert_eq!(
        run(&["eval-abx", "--model", s(&model), "--corpus", m, "--task", "within", "--test-mask", "V", "--report", s(&abx), "--config", cfg]),
        0
    );
    let report: AbxReport = serde_json::from_str(&fs::read_to_string(&abx).unwrap()).unwrap();
    assert!(report.counts.triplets > 0);
    assert!((0.0..=1.0).contains(&report.overall_error));

    let raw_abx = f.root.join("reports/raw_a.json");
    assert_eq!(
        run(&["eval-abx", "--model", s(&raw), "--corpus", m, "--task", "across", "--test-mask", "a", "--report", s(&raw_abx), "--config", cfg]),
        0
    );
    let par = f.root.join("reports/par.json");
    let svg = f.root.join("reports/par.svg");
    assert_eq!(
        run(&["eval-parallelism", "--model", s(&model), "--corpus", m, "--test-mask", "av", "--report", s(&par), "--svg", s(&svg), "--config", cfg]),
        0
    );
    assert!(f.root.join("reports/par.csv").exists());
    assert!(fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let mc = f.root.join("reports/mcgurk.json");
    assert_eq!(run(&["eval-mcgurk", "--model", s(&model), "--corpus", m, "--report", s(&mc), "--config", cfg]), 0);
    let mc: McGurkReport = serde_json::from_str(&fs::read_to_string(&mc).unwrap()).unwrap();
    assert_eq!(mc.variants.len(), 3);

    let agg = f.root.join("agg");
    assert_eq!(run(&["report", "--out", s(&agg), s(&abx), s(&raw_abx), s(&par)]), 0);
    let table = fs::read_to_string(agg.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,wst_a,wst_v,wst_av,ast_a,ast_v,ast_av");
    assert!(lines[1].starts_with("raw,,,,"));
    assert!(lines[2].starts_with("multi,,"));
    assert!(agg.join("features.svg").exists());
    assert!(agg.join("parallelism.svg").exists());

    // identical argv gives identical bytes, and the run record alone reproduces it
    let first = fs::read(&abx).unwrap();
    fs::remove_file(&abx).unwrap();
    assert_eq!(run(&["replay", s(&f.root.join("reports/abx_v.run.json"))]), 0);
    assert_eq!(fs::read(&abx).unwrap(), first);
}

#[test]
fn replay_uses_recorded_config_not_the_file() {
    let f = fixture();
    let model = f.root.join("model");
    let m = s(&f.manifest);
    assert_eq!(run(&["train", "--corpus", m, "--mode", "raw", "--out", s(&model), "--config", s(&f.config)]), 0);
    let report = f.root.join("r.json");
    assert_eq!(
        run(&["eval-abx", "--model", s(&model), "--corpus", m, "--task", "within", "--test-mask", "av", "--report", s(&report), "--config", s(&f.config)]),
        0
    );
    let first = fs::read(&report).unwrap();
    fs::write(&f.config, r#"{"abx_budget": 1}"#).unwrap();
    assert_eq!(run(&["replay", s(&f.root.join("r.run.json"))]), 0);
    assert_eq!(fs::read(&report).unwrap(), first);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let m = s(&f.manifest);
    // usage errors
    assert_eq!(run(&["train", "--corpus", m, "--mode", "quad", "--out", "x"]), 1);
    assert_eq!(run(&["eval-abx", "--model", "x", "--corpus", m, "--task", "sideways", "--test-mask", "a", "--report", "r"]), 1);
    // data errors
    let missing = f.root.join("nope");
    assert_eq!(run(&["eval-abx", "--model", s(&missing), "--corpus", m, "--task", "within", "--test-mask", "a", "--report", s(&f.root.join("r.json"))]), 2);
    let bad = f.root.join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["prepare", "--corpus", s(&bad), "--out", s(&f.root.join("p"))]), 2);
    // configuration errors
    let cfg = f.root.join("bad_cfg.json");
    fs::write(&cfg, r#"{"prep": {"window": 4}}"#).unwrap();
    assert_eq!(run(&["prepare", "--corpus", m, "--out", s(&f.root.join("p")), "--config", s(&cfg)]), 1);
    // numeric failure: a huge learning rate overflows the loss
    let cfg = f.root.join("diverge.json");
    fs::write(
        &cfg,
        r#"{"net": {"hidden_layers": 1, "hidden_units": 8, "block_dim": 2}, "train": {"epochs": 3, "pairs_per_epoch": 10, "learning_rate": 1e30}}"#,
    )
    .unwrap();
    assert_eq!(run(&["train", "--corpus", m, "--mode", "mono-a", "--out", s(&f.root.join("d")), "--config", s(&cfg)]), 3);
}
