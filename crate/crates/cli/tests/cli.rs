//! End-to-end runs of the `dtl` binary on a shrunken benchmark.

use std::path::Path;
use std::process::{Command, Output};

use dtl_core::nn::Model;
use dtl_core::run::{read_jsonl, MetricRecord, SweepRow};

const FAST: &[&str] = &[
    "--set",
    "pretrain.epochs=2",
    "--set",
    "finetune.epochs=2",
    "--set",
    "dispose.epochs=1",
    "--set",
    "piggyback.scheme.epochs=1",
];

fn dtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtl")).args(args).output().expect("binary runs")
}

fn fast(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    dtl(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn full_run_reproduces_from_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = fast("run", a.path(), &[]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let manifest = a.path().join("manifest.json");
    let again = dtl(&["run", "--config", manifest.to_str().unwrap(), "--out", b.path().to_str().unwrap()]);
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
    for f in [
        "pretrain.ckpt",
        "finetune.ckpt",
        "target_only.ckpt",
        "dispose.ckpt",
        "metrics.jsonl",
        "dispose.records.jsonl",
        "pretrain.records.jsonl",
    ] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stages_chain_through_the_output_directory() {
    let d = tempfile::tempdir().unwrap();
    for stage in ["pretrain", "finetune", "dispose", "piggyback"] {
        let o = fast(stage, d.path(), &["--lambda", "0.3", "--unlearn", "gc", "--chunks", "4", "--workers", "2"]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics: Vec<MetricRecord> = read_jsonl(&d.path().join("metrics.jsonl")).unwrap();
    assert!(metrics.iter().any(|m| m.model == "dtl" && m.metric == "pl_acc"));
    // a different configuration may not reuse the directory
    let o = fast("dispose", d.path(), &["--lambda", "0.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    let o = fast("finetune", d.path(), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}

#[test]
fn bad_configuration_is_an_input_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&fast("pretrain", d.path(), &["--set", "pretrain.epochz=2"])), 2);
    assert_eq!(code(&fast("pretrain", d.path(), &["--lambda", "1.5"])), 2);
    assert_eq!(code(&fast("pretrain", d.path(), &["--unlearn", "nope"])), 2);
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "seed = [").unwrap();
    assert_eq!(code(&dtl(&["pretrain", "--config", bad.to_str().unwrap(), "--out", d.path().to_str().unwrap()])), 2);
}

#[test]
fn divergence_exits_with_three() {
    let d = tempfile::tempdir().unwrap();
    let args = ["--unlearn", "neg", "--lambda", "1", "--set", "dispose.epochs=30"];
    assert_eq!(code(&fast("pretrain", d.path(), &args)), 0);
    assert_eq!(code(&fast("finetune", d.path(), &args)), 0);
    let o = fast("dispose", d.path(), &args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn collapsed_model_with_ngc_exits_with_four() {
    let d = tempfile::tempdir().unwrap();
    let args = ["--unlearn", "ngc", "--freeze-source-head"];
    assert_eq!(code(&fast("pretrain", d.path(), &args)), 0);
    assert_eq!(code(&fast("finetune", d.path(), &args)), 0);
    // dead trunk: every hidden unit outputs zero
    let path = d.path().join("finetune.ckpt");
    let (mut m, meta) = Model::load(&path).unwrap();
    for p in m.params.iter_mut().filter(|p| p.name.starts_with("trunk.")) {
        p.values.iter_mut().for_each(|v| *v = 0.0);
    }
    m.save(&path, &meta).unwrap();
    let o = fast("dispose", d.path(), &args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_emits_one_row_per_grid_point_and_kind() {
    let d = tempfile::tempdir().unwrap();
    let grid = ["--set", "sweep.lambdas=[0.0, 0.5, 1.0]", "--set", "sweep.unlearn=[\"gc\", \"unif\"]"];
    assert_eq!(code(&fast("pretrain", d.path(), &grid)), 0);
    assert_eq!(code(&fast("finetune", d.path(), &grid)), 0);
    assert_eq!(code(&fast("sweep", d.path(), &grid)), 0);
    let rows: Vec<SweepRow> = read_jsonl(&d.path().join("sweep.jsonl")).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    // lambda = 0 is the pure-retain endpoint of the gc row
    let gc: Vec<&SweepRow> = rows.iter().filter(|r| r.unlearn.name() == "gc" && r.status == "ok").collect();
    let best = gc.iter().map(|r| r.acc_t.unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(gc[0].lambda, 0.0);
    assert_eq!(gc[0].acc_t.unwrap(), best);
    let report = dtl(&["report", "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    let frontier = std::fs::read_to_string(d.path().join("plots/frontier_src-kd_gc.dat")).unwrap();
    assert!(frontier.starts_with('#'));
    assert_eq!(frontier.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn report_is_stable_and_marks_missing_cells() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&dtl(&["report", "--out", d.path().to_str().unwrap()])), 2);
    assert_eq!(code(&fast("pretrain", d.path(), &[])), 0);
    assert_eq!(code(&fast("finetune", d.path(), &[])), 0);
    let a = dtl(&["report", "--out", d.path().to_str().unwrap()]);
    let b = dtl(&["report", "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    // no disposal has run: its row is all n/a, never zero
    let dtl_row = text.lines().find(|l| l.starts_with("dtl ")).unwrap();
    assert!(dtl_row.split_whitespace().skip(1).all(|c| c == "n/a"), "{dtl_row}");

    // deltas are model minus reference, in percentage points
    let metrics: Vec<MetricRecord> = read_jsonl(&d.path().join("metrics.jsonl")).unwrap();
    let get = |m: &str| metrics.iter().find(|r| r.model == m && r.metric == "acc_t").unwrap().value;
    let tgt_row = text.lines().find(|l| l.starts_with("tgt ")).unwrap();
    let want = format!("{:+.2}", 100.0 * (get("tgt") - get("tl")));
    assert!(tgt_row.contains(&want), "{tgt_row} lacks {want}");
}

#[test]
fn default_config_round_trips() {
    let o = dtl(&["default-config"]);
    assert_eq!(code(&o), 0);
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("c.toml");
    std::fs::write(&p, &o.stdout).unwrap();
    let o = dtl(&[
        "pretrain",
        "--config",
        p.to_str().unwrap(),
        "--out",
        d.path().join("out").to_str().unwrap(),
        "--set",
        "pretrain.epochs=1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
