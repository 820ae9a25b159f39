use delaylab::TrajectoryDataset;
use delaylab_cli::run::RunRecord;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[sim]
n_trajectories = 12
steps_total = 300

[train]
epochs = 4
learning_rate = 1e-3
batch_size = 4
checkpoint_every = 2

[model]
max_len = 200

[sweep]
kinds = ["gpt", "lru"]
dims = [3]
noise_variances = [0.0, 0.1]
seeds_per_cell = 1

[metrics]
max_points = 600
mlp_steps = 50
"#;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delaylab")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = bin(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn simulate_is_byte_deterministic_and_summarized() {
    let dir = setup();
    let p = dir.path();
    let summary = ok(&["simulate", "--config", "tiny.toml", "--out", "a.dlc"], p);
    ok(&["simulate", "--config", "tiny.toml", "--out", "b.dlc"], p);
    assert_eq!(fs::read(p.join("a.dlc")).unwrap(), fs::read(p.join("b.dlc")).unwrap());
    assert!(summary.contains("\"trajectories\": 12"));
    assert!(summary.contains("state_participation_ratio"));
    ok(&["simulate", "--config", "tiny.toml", "--seed", "5", "--out", "c.dlc"], p);
    assert_ne!(fs::read(p.join("a.dlc")).unwrap(), fs::read(p.join("c.dlc")).unwrap());
}

#[test]
fn desk_scale_flag_gives_200_trajectories() {
    let dir = setup();
    let p = dir.path();
    fs::write(p.join("short.toml"), "[sim]\nsteps_total = 300\n").unwrap();
    ok(&["simulate", "--config", "short.toml", "--desk-scale", "--out", "d.dlc"], p);
    let d = TrajectoryDataset::load(&p.join("d.dlc")).unwrap();
    assert_eq!(d.trajectories.len(), 200);
    assert_eq!(d.trajectories[0].len(), 200);
}

#[test]
fn zero_epoch_dry_run_records_only_initialization() {
    let dir = setup();
    let p = dir.path();
    ok(&["simulate", "--config", "tiny.toml", "--out", "ds.dlc"], p);
    ok(
        &["train", "--config", "tiny.toml", "--dataset", "ds.dlc", "--kind", "lru", "--dim", "3", "--epochs", "0", "--out", "r0", "--quiet"],
        p,
    );
    let r = RunRecord::load(&p.join("r0/record.json")).unwrap();
    assert_eq!(r.reports.len(), 1);
    assert_eq!(r.reports[0].epoch, 0);
    assert_eq!(r.epochs_completed, 0);
    assert!(r.checkpoints.is_empty());
    let csv = fs::read_to_string(p.join("r0/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn resume_continues_without_gaps_and_matches_uninterrupted_run() {
    let dir = setup();
    let p = dir.path();
    ok(&["simulate", "--config", "tiny.toml", "--out", "ds.dlc"], p);
    let base = ["train", "--config", "tiny.toml", "--dataset", "ds.dlc", "--kind", "gpt", "--dim", "3", "--quiet"];
    let with = |extra: &[&'static str]| base.iter().copied().chain(extra.iter().copied()).collect::<Vec<_>>();
    ok(&with(&["--out", "full"]), p);
    ok(&with(&["--out", "part", "--epochs", "2"]), p);
    ok(&with(&["--out", "part", "--resume"]), p);
    for f in ["record.json", "metrics.csv", "train_log.csv", "checkpoints/epoch_00004.dlc"] {
        assert_eq!(fs::read(p.join("full").join(f)).unwrap(), fs::read(p.join("part").join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(p.join("part/train_log.csv")).unwrap();
    let epochs: Vec<usize> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
}

#[test]
fn sweep_skips_completed_cells_and_is_order_independent() {
    let dir = setup();
    let p = dir.path();
    let first = ok(&["sweep", "--config", "tiny.toml", "--out", "sw"], p);
    assert!(first.contains("records=4 skipped=0 failed=0"), "{first}");
    let again = ok(&["sweep", "--config", "tiny.toml", "--out", "sw"], p);
    assert!(again.contains("records=4 skipped=4"), "{again}");

    let cell = p.join("sw/runs/lru_d3_noise0.1_seed0");
    let before = fs::read(cell.join("record.json")).unwrap();
    fs::remove_file(cell.join("record.json")).unwrap();
    fs::remove_file(cell.join("progress.json")).unwrap();
    let resumed = ok(&["sweep", "--config", "tiny.toml", "--out", "sw"], p);
    assert!(resumed.contains("records=4 skipped=3"), "{resumed}");
    assert_eq!(fs::read(cell.join("record.json")).unwrap(), before);

    ok(&["sweep", "--config", "tiny.toml", "--out", "sw2", "--jobs", "2"], p);
    for name in ["gpt_d3_noise0_seed0", "lru_d3_noise0.1_seed0"] {
        let a = fs::read(p.join("sw/runs").join(name).join("record.json")).unwrap();
        let b = fs::read(p.join("sw2/runs").join(name).join("record.json")).unwrap();
        assert_eq!(a, b, "{name}");
    }

    let listed = ok(&["report", "--records", "sw", "--out", "rep"], p);
    assert!(listed.contains("learning_curves.csv"));
    for f in ["learning_curves.csv", "metrics_vs_epoch.csv", "metric_vs_mase.csv", "correlations.csv", "final_mase_by_noise.csv", "percent_growth.csv"] {
        assert!(p.join("rep").join(f).exists(), "{f}");
    }
    assert!(p.join("rep/learning_curves_noise0.svg").exists());
    assert!(p.join("rep/metric_vs_epoch_mlp_decode_r2.svg").exists());
    ok(&["report", "--records", "sw", "--out", "rep2"], p);
    for f in ["learning_curves.csv", "metrics_vs_epoch.csv", "learning_curves_noise0.svg"] {
        assert_eq!(fs::read(p.join("rep").join(f)).unwrap(), fs::read(p.join("rep2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_run_report_has_zero_width_bands() {
    let dir = setup();
    let p = dir.path();
    ok(&["train", "--config", "tiny.toml", "--kind", "lru", "--dim", "3", "--out", "runs/one", "--quiet"], p);
    ok(&["report", "--records", "runs", "--out", "rep"], p);
    let lc = fs::read_to_string(p.join("rep/learning_curves.csv")).unwrap();
    let rows: Vec<&str> = lc.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(6) == Some("0")), "{lc}");
    let inspected = ok(&["inspect", "runs/one"], p);
    assert!(inspected.contains("model lru d=3"));
    let ck = ok(&["inspect", "runs/one/checkpoints/epoch_00002.dlc"], p);
    assert!(ck.contains("kind=checkpoint") && ck.contains("param.lru.nu"), "{ck}");
}

#[test]
fn exit_codes_and_machine_readable_errors() {
    let dir = setup();
    let p = dir.path();
    fs::write(p.join("bad.toml"), "[sim]\ndt = -0.5\n").unwrap();
    let out = bin(&["simulate", "--config", "bad.toml", "--out", "x.dlc"], p);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind=validation field=sim"), "{err}");
    assert!(err.contains("dt"));

    fs::write(p.join("typo.toml"), "[trian]\nepochs = 3\n").unwrap();
    assert_eq!(bin(&["simulate", "--config", "typo.toml", "--out", "x.dlc"], p).status.code(), Some(1));

    let out = bin(&["train", "--config", "tiny.toml", "--dataset", "missing.dlc", "--out", "r"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=runtime"));

    assert_eq!(bin(&["report", "--records", ".", "--out", "rep"], p).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"], p).status.code(), Some(1));
}
