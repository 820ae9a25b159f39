//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.
//!
//! `DELAYLAB_ACCEPT_SCALE=desk` runs the sweep criteria (7-10) on the full
//! desk preset instead of the reduced grid.

use delaylab::dynamics::{delay_embed, generate_dataset, reference_trajectory, Split};
use delaylab::embedmetrics::{
    ccm_score, collect_embeddings, collect_with, decode_mlp, neighbors_overlap, random_embedding, MetricError,
};
use delaylab::models::model_forward;
use delaylab::numerics::{finite_difference, max_relative_error, participation_ratio, pca, pearson_correlation, Tensor};
use delaylab::training::{mase, mse, sequence_loss_and_grads, train};
use delaylab::{EmbeddingSample, LorenzParams, MetricConfig, ModelKind, ModelParams, ModelSpec, SimConfig};
use delaylab_cli::config::ExperimentConfig;
use delaylab_cli::report::{load_runs, median, percent_growth, LoadedRun};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Check = Result<(bool, String), String>;

const REDUCED_SWEEP: &str = r#"
[sim]
n_trajectories = 60

[train]
epochs = 100
learning_rate = 1e-3
batch_size = 8
checkpoint_every = 100

[sweep]
kinds = ["gpt", "lru"]
dims = [10, 25]
noise_variances = [0.0, 0.1]
seeds_per_cell = 3
"#;

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

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn bin(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_delaylab")).args(args).current_dir(cwd).output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn attractor_dimension() -> Check {
    let traj = reference_trajectory(&LorenzParams::default(), 0.01, 100_000).map_err(err)?;
    let pr = pca(&traj).map_err(err)?.participation_ratio().map_err(err)?;
    Ok(((pr - 1.986).abs() <= 0.05, format!("participation_ratio={pr:.4} target=1.986 tol=0.05")))
}

fn gradient_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let series: Vec<f64> = (0..20).map(|i| (i as f64 * 0.31).sin() + 0.1 * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let mut worst = Vec::new();
    let mut ok = true;
    for kind in [ModelKind::Gpt, ModelKind::Lru] {
        let spec = ModelSpec { max_len: 20, ..ModelSpec::new(kind, 10) };
        let params = ModelParams::init(&spec, 3).map_err(err)?;
        let (_, grads) = sequence_loss_and_grads(&params, &series).map_err(err)?;
        let offset = spec.first_position();
        let n = series.len() - 1 - offset;
        let fd = finite_difference(&params.tensors, 1e-5, |ts| {
            let p = ModelParams::from_tensors(spec.clone(), ts.to_vec()).expect("same layout");
            let tr = model_forward(&p, &series).expect("forward");
            mse(&tr.predictions[..n], &series[offset + 1..]).expect("lengths")
        });
        let e = max_relative_error(&grads, &fd, 1e-6);
        ok &= e < 1e-4;
        worst.push(format!("{kind}={e:.2e}"));
    }
    Ok((ok, format!("max_relative_error {} tol=1e-4", worst.join(" "))))
}

fn lorenz_sample(n: usize) -> Result<EmbeddingSample, String> {
    let states = reference_trajectory(&LorenzParams::default(), 0.01, n + 10).map_err(err)?;
    let xs: Vec<f64> = (0..n + 10).map(|r| states.at(r, 0)).collect();
    let rows: Vec<usize> = (0..n).collect();
    let future: Vec<f64> = (0..n).flat_map(|r| xs[r + 1..=r + 10].to_vec()).collect();
    EmbeddingSample::from_parts(
        states.select_rows(&rows),
        states.select_rows(&rows),
        Tensor::matrix(n, 10, future),
        rows.clone(),
        vec![0; n],
    )
    .map_err(err)
}

fn metric_identities() -> Check {
    let series: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin() * 3.0 + i as f64 * 0.01).collect();
    let persistence = mase(&series[..199], &series[1..], &series[..199]).map_err(err)?;
    let s = lorenz_sample(5000)?;
    let (a, b) = (0.7f64, 1.3f64);
    let rz = Tensor::matrix(3, 3, vec![a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]);
    let rx = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, b.cos(), -b.sin(), 0.0, b.sin(), b.cos()]);
    let iso = s.with_embedding(s.true_states.matmul(&rz.matmul(&rx)).map(|v| 2.5 * v)).map_err(err)?;
    let overlap = neighbors_overlap(&iso, 20, 10).map_err(err)?;
    let pr = participation_ratio(&[1.0, 1.0, 1.0, 1.0]).map_err(err)?;
    let ccm = ccm_score(&s, 20, 10).map_err(err)?;
    let ok = persistence == 1.0 && overlap == 1.0 && pr == 4.0 && ccm >= 0.98;
    Ok((ok, format!("persistence_mase={persistence} isometry_overlap={overlap} pr_ones={pr} ccm_self={ccm:.4}")))
}

fn takens_sanity() -> Check {
    let sim = SimConfig { n_trajectories: 40, noise_variance: 0.0, seed: 2, ..SimConfig::default() };
    let data = generate_dataset(&sim, &LorenzParams::default()).map_err(err)?;
    let embed = |series: &[f64]| {
        let e = delay_embed(series, 25, 1).map_err(|e| MetricError::Inconsistent(e.to_string()))?;
        let offset = e.time_of_row(0);
        Ok((e.matrix, offset))
    };
    let s = collect_with(&data, Split::Train, 10, 5000, 0, &embed).map_err(err)?;
    let r2 = decode_mlp(&s, &MetricConfig::default()).map_err(err)?;
    let noise = random_embedding(&s, 25, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let null = decode_mlp(&noise, &MetricConfig::default()).map_err(err)?;
    Ok((r2 > 0.9, format!("delay25 mlp_decode_r2={r2:.4} (random embedding {null:.4}) threshold=0.9")))
}

fn desk_trainability() -> Check {
    let desk = ExperimentConfig::default().with_desk_scale(true);
    let sim = SimConfig { noise_variance: 0.0, ..desk.sim.clone() };
    let data = generate_dataset(&sim, &LorenzParams::default()).map_err(err)?;
    let model = ModelParams::init(&ModelSpec::new(ModelKind::Lru, 25), 0).map_err(err)?;
    let cfg = &desk.train;
    let out = train(model, &data, cfg).map_err(err)?;
    Ok((
        out.final_mase < 0.5,
        format!(
            "lru d=25 noiseless {} traj {} epochs lr={} batch={} validation_mase={:.4} threshold=0.5",
            sim.n_trajectories, cfg.epochs, cfg.learning_rate, cfg.batch_size, out.final_mase
        ),
    ))
}

fn init_ordering() -> Check {
    let sim = SimConfig { noise_variance: 0.0, ..SimConfig::default().desk_scale() };
    let data = generate_dataset(&sim, &LorenzParams::default()).map_err(err)?;
    let cfg = MetricConfig::default();
    let mut scores: BTreeMap<ModelKind, Vec<f64>> = BTreeMap::new();
    for kind in [ModelKind::Gpt, ModelKind::Lru] {
        for seed in 0..5 {
            let model = ModelParams::init(&ModelSpec::new(kind, 50), seed).map_err(err)?;
            let sample = collect_embeddings(&model, &data, &cfg).map_err(err)?;
            scores.entry(kind).or_default().push(decode_mlp(&sample, &cfg).map_err(err)?);
        }
    }
    let (g, l) = (median(&scores[&ModelKind::Gpt]), median(&scores[&ModelKind::Lru]));
    Ok((l > g, format!("d=50 5 seeds median untrained mlp_decode_r2 lru={l:.4} gpt={g:.4}")))
}

struct SweepResults {
    runs: Vec<LoadedRun>,
    scale: &'static str,
}

fn run_sweep() -> Result<(SweepResults, tempfile::TempDir), String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let p = dir.path();
    let desk = std::env::var("DELAYLAB_ACCEPT_SCALE").is_ok_and(|v| v == "desk");
    if desk {
        bin(&["sweep", "--desk-scale", "--out", "sw"], p)?;
    } else {
        fs::write(p.join("sweep.toml"), REDUCED_SWEEP).map_err(err)?;
        bin(&["sweep", "--config", "sweep.toml", "--out", "sw"], p)?;
    }
    let runs = load_runs(&p.join("sw")).map_err(err)?;
    Ok((SweepResults { runs, scale: if desk { "desk" } else { "reduced" } }, dir))
}

fn finals(runs: &[LoadedRun], kind: ModelKind, d: usize, noise: f64) -> Vec<&LoadedRun> {
    runs.iter().filter(|r| r.record.model.kind == kind && r.record.model.d == d && r.record.noise_variance == noise).collect()
}

fn cells(runs: &[LoadedRun]) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, u64)> = runs.iter().map(|r| (r.record.model.d, r.record.noise_variance.to_bits())).collect();
    v.sort_unstable();
    v.dedup();
    v.into_iter().map(|(d, n)| (d, f64::from_bits(n))).collect()
}

fn final_mases(runs: &[&LoadedRun]) -> Vec<f64> {
    runs.iter().filter_map(|r| r.record.final_mase).collect()
}

fn included_note(runs: &[LoadedRun]) -> String {
    let mut by: BTreeMap<ModelKind, (usize, usize)> = BTreeMap::new();
    for r in runs {
        let e = by.entry(r.record.model.kind).or_default();
        e.0 += r.record.included as usize;
        e.1 += 1;
    }
    by.iter().map(|(k, (i, n))| format!("{k}:{i}/{n}")).collect::<Vec<_>>().join(",")
}

fn final_performance(s: &SweepResults) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [10, 25] {
        let g = final_mases(&finals(&s.runs, ModelKind::Gpt, d, 0.1));
        let l = final_mases(&finals(&s.runs, ModelKind::Lru, d, 0.1));
        if g.len() < 3 || l.len() < 3 {
            return Ok((false, format!("d={d}: fewer than 3 seeds per kind")));
        }
        let (mg, ml) = (median(&g), median(&l));
        ok &= ml <= mg;
        parts.push(format!("d={d} lru={ml:.4} gpt={mg:.4}"));
    }
    Ok((ok, format!("{} scale, noise 0.1 median final MASE {}; included {}", s.scale, parts.join(" "), included_note(&s.runs))))
}

fn final_pr(r: &LoadedRun) -> Option<f64> {
    r.record.final_report().and_then(|m| m.participation_ratio)
}

fn dimensionality(s: &SweepResults) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (d, noise) in cells(&s.runs) {
        let g: Vec<f64> = finals(&s.runs, ModelKind::Gpt, d, noise).into_iter().filter_map(final_pr).collect();
        let l: Vec<f64> = finals(&s.runs, ModelKind::Lru, d, noise).into_iter().filter_map(final_pr).collect();
        if g.is_empty() || l.is_empty() {
            continue;
        }
        let (mg, ml) = (median(&g), median(&l));
        ok &= mg > ml;
        parts.push(format!("d={d},noise={noise}: gpt={mg:.3} lru={ml:.3}"));
    }
    if parts.is_empty() {
        return Ok((false, "no matched cells".into()));
    }
    Ok((ok, format!("{} scale, median trained PR {}", s.scale, parts.join("; "))))
}

fn correlation(s: &SweepResults) -> Check {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for r in &s.runs {
        if let (Some(m), Some(r2)) = (r.record.final_mase, r.record.final_report().and_then(|m| m.mlp_decode_r2)) {
            x.push(m);
            y.push(1.0 - r2);
        }
    }
    let c = pearson_correlation(&x, &y).map_err(err)?;
    Ok((c > 0.0, format!("{} scale, pooled n={} pearson(final MASE, 1 - mlp_decode_r2)={c:.4}", s.scale, x.len())))
}

fn noise_sensitivity(s: &SweepResults) -> Check {
    let mut growth: BTreeMap<ModelKind, Vec<f64>> = BTreeMap::new();
    for r in &s.runs {
        let rec = &r.record;
        if rec.noise_variance != 0.0 {
            continue;
        }
        let partner = s.runs.iter().find(|o| {
            o.record.noise_variance == 0.1
                && o.record.model.kind == rec.model.kind
                && o.record.model.d == rec.model.d
                && o.record.seed == rec.seed
        });
        if let (Some(lo), Some(hi)) = (rec.final_mase, partner.and_then(|p| p.record.final_mase)) {
            growth.entry(rec.model.kind).or_default().push(percent_growth(lo, hi));
        }
    }
    let (Some(g), Some(l)) = (growth.get(&ModelKind::Gpt), growth.get(&ModelKind::Lru)) else {
        return Ok((false, "missing noise pairs".into()));
    };
    let (mg, ml) = (median(g), median(l));
    Ok((ml > mg, format!("{} scale, median percent MASE growth 0.0->0.1 lru={ml:.1}% gpt={mg:.1}%", s.scale)))
}

fn tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                let rel = p.strip_prefix(dir).map_err(err)?.display().to_string();
                out.insert(rel, fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Check {
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err)?;
        let p = dir.path();
        fs::write(p.join("tiny.toml"), TINY).map_err(err)?;
        bin(&["simulate", "--config", "tiny.toml", "--out", "ds.dlc"], p)?;
        for kind in ["gpt", "lru"] {
            let out = format!("train_{kind}");
            bin(&["train", "--config", "tiny.toml", "--dataset", "ds.dlc", "--kind", kind, "--dim", "3", "--out", &out, "--quiet"], p)?;
        }
        bin(&["sweep", "--config", "tiny.toml", "--out", "sw"], p)?;
        bin(&["report", "--records", "sw", "--out", "rep"], p)?;
        fs::remove_file(p.join("tiny.toml")).map_err(err)?;
        trees.push(tree(p)?);
    }
    let differing: Vec<&String> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_names = trees[0].keys().eq(trees[1].keys());
    Ok((
        same_names && differing.is_empty(),
        format!("{} artifacts from simulate/train/sweep/report compared, {} differ", trees[0].len(), differing.len()),
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Check| {
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !ok as usize;
        println!("criterion {n:>2} {} {name}: {detail} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    };
    report(1, "attractor dimension", &attractor_dimension);
    report(2, "gradient fidelity", &gradient_fidelity);
    report(3, "metric identities", &metric_identities);
    report(4, "delay embedding decoding", &takens_sanity);
    report(5, "desk trainability", &desk_trainability);
    report(6, "initialization ordering", &init_ordering);
    match run_sweep() {
        Ok((s, _dir)) => {
            report(7, "final performance ordering", &|| final_performance(&s));
            report(8, "embedding dimensionality ordering", &|| dimensionality(&s));
            report(9, "metric-performance correlation", &|| correlation(&s));
            report(10, "noise sensitivity direction", &|| noise_sensitivity(&s));
        }
        Err(e) => {
            for (n, name) in [(7, "final performance ordering"), (8, "embedding dimensionality ordering"), (9, "metric-performance correlation"), (10, "noise sensitivity direction")] {
                report(n, name, &|| Err(format!("sweep failed: {e}")));
            }
        }
    }
    report(11, "determinism", &determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
