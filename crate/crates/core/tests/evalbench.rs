mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use stgp::evalbench::{read_metrics_csv, run_experiment, write_report, Ablation, ExperimentSpec};
use stgp::pipeline::{Setting, TaskKind};

use common::{tiny_config, tiny_synth};

fn tiny_experiment() -> ExperimentSpec {
    ExperimentSpec {
        synth: tiny_synth(),
        config: tiny_config(),
        seeds: vec![0],
        tasks: TaskKind::ALL.to_vec(),
        ablations: Ablation::ALL.to_vec(),
        setting: Setting::Transductive,
        test_stride: 0,
        dump_embeddings: true,
    }
}

#[test]
fn experiment_report_contract() {
    let spec = tiny_experiment();
    let outcomes = run_experiment(&spec).unwrap();
    let o = &outcomes[0];
    assert!(o.errors.is_empty(), "{:?}", o.errors);
    assert!(o.isolated);
    for l in o.logs.iter().filter(|l| l.stage != "pretrain") {
        assert!(!l.train_ranges.is_empty(), "{}", l.stage);
    }
    let has = |task: &str, method: &str| o.rows.iter().any(|r| r.task == task && r.method == method);
    assert!(has("forecast", "STGP") && has("forecast", "HA") && has("forecast", "zero"));
    for task in ["kriging", "extrapolation"] {
        for m in ["STGP", "MEAN", "KNN", "ft", "sdp", "stp"] {
            assert!(has(task, m), "{task} {m}");
        }
    }
    for r in &o.rows {
        assert!(r.rmse >= r.mae && r.mae.is_finite() && r.cells > 0, "{r:?}");
    }
    // forecast horizon: one patch ahead
    assert_eq!(o.horizons["STGP"].len(), spec.config.patch_len * spec.config.forecast_pred);
    let cfg = &spec.config;
    assert_eq!(o.param_counts["domain_stage"], 2 * cfg.num_prompts * cfg.d_hidden);
    assert_eq!(o.param_counts["task_stage.forecast"], 2 * cfg.num_prompts * cfg.d_hidden);
    assert!(o.param_counts["task_stage.extrapolation"] > 2 * cfg.num_prompts * cfg.d_hidden);
    assert_eq!(o.embeddings.len(), 2);
    assert_eq!(o.embeddings[0].1.dim(), (spec.synth.num_nodes * cfg.num_patches, cfg.d_hidden));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = write_report(&a, &spec, &outcomes).unwrap();
    assert_eq!(report.entries["params.reported_per_stage"], "3000");
    assert_eq!(report.entries["isolation.seed0"], "ok");
    assert_eq!(read_metrics_csv(&a.join("metrics.csv")).unwrap(), o.rows);
    assert!(a.join("plots/loss_seed0_pretrain.svg").exists());
    assert!(a.join("embeddings/seed0_domain.csv").exists());

    // same spec, same bytes
    write_report(&b, &spec, &run_experiment(&spec).unwrap()).unwrap();
    for f in ["report.txt", "metrics.csv", "report.md"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn failures_still_produce_a_report() {
    let mut spec = tiny_experiment();
    spec.ablations.clear();
    // no days are left for testing
    spec.synth.target_days = 6;
    let outcomes = run_experiment(&spec).unwrap();
    assert!(outcomes[0].errors.keys().any(|k| k.ends_with("test_set")), "{:?}", outcomes[0].errors);
    let dir = tempfile::tempdir().unwrap();
    let report = write_report(dir.path(), &spec, &outcomes).unwrap();
    assert!(report.entries.keys().any(|k| k.starts_with("error.seed0.")));
    assert!(fs::read_to_string(dir.path().join("report.md")).unwrap().contains("Failures"));
}

fn stgp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_stgp")).args(args).output().unwrap();
    assert!(out.status.success(), "stgp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = tiny_synth();
    fs::write(d.join("synth.txt"), format!("num_nodes={}\nnum_sources={}\nsource_days={}\ntarget_days={}\ninterval={}\nradius={}\n", s.num_nodes, s.num_sources, s.source_days, s.target_days, s.interval, s.radius)).unwrap();
    fs::write(d.join("train.txt"), tiny_config().to_text()).unwrap();
    let (cfg, data) = (d.join("train.txt"), d.join("data"));
    stgp(&["generate", "--spec", p(&d.join("synth.txt")), "--out", p(&data)]);
    let target = data.join("target");
    stgp(&["pretrain", "--config", p(&cfg), "--data", p(&data.join("source0")), "--data", p(&data.join("source1")), "--out", p(&d.join("pre")), "--seed", "3"]);
    stgp(&["prompt-domain", "--data", p(&target), "--from", p(&d.join("pre")), "--out", p(&d.join("dom"))]);
    stgp(&["prompt-task", "--task", "kriging", "--data", p(&target), "--from", p(&d.join("dom")), "--out", p(&d.join("krig"))]);
    let line = stgp(&["eval", "--checkpoint", p(&d.join("krig")), "--data", p(&target), "--task", "kriging", "--report", p(&d.join("r1"))]);
    assert!(line.starts_with("kriging STGP MAE"), "{line}");
    stgp(&["baseline", "--method", "knn", "--config", p(&cfg), "--data", p(&target), "--task", "kriging", "--report", p(&d.join("r2"))]);
    let md = stgp(&["report", "--merge", p(&d.join("r1")), p(&d.join("r2")), "--out", p(&d.join("merged"))]);
    assert!(md.contains("| kriging | STGP |") && md.contains("| kriging | KNN |"), "{md}");
    let rows = read_metrics_csv(&d.join("merged/metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].seed, 3);

    // HA is refused for a task whose nodes have no history
    let out = Command::new(env!("CARGO_BIN_EXE_stgp")).args(["baseline", "--method", "ha", "--data", p(&target), "--task", "kriging", "--report", p(&d.join("r3"))]).output().unwrap();
    assert!(!out.status.success());
    // task prompting needs a domain-prompted checkpoint
    let out = Command::new(env!("CARGO_BIN_EXE_stgp")).args(["prompt-task", "--task", "forecast", "--data", p(&target), "--from", p(&d.join("pre")), "--out", p(&d.join("bad"))]).output().unwrap();
    assert!(!out.status.success());
}
