//! Delay-embedding quality of sequence-layer outputs.

use crate::dynamics::{Split, TrajectoryDataset};
use crate::models::{model_forward, ModelError, ModelKind, ModelParams};
use crate::numerics::{
    adam_step, knn_with_index, linear_least_squares, pca, pearson_correlation, predict_linear,
    r_squared, variance, AdamConfig, AdamState, Graph, NumericsError, Tensor, TimeIndex, Var,
};
use crate::seed;
use crate::training::{self, TrainError};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("too few rows: need {needed}, have {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("degenerate {0}")]
    Degenerate(String),
    #[error("need at least {needed} runs, have {got}")]
    InsufficientRuns { needed: usize, got: usize },
    #[error("inconsistent sample: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub max_points: usize,
    pub overlap_k: usize,
    pub theiler: usize,
    pub ccm_k_cap: usize,
    pub cv_k: usize,
    pub cv_p: usize,
    pub volume_k: usize,
    pub test_fraction: f64,
    /// Time-block length used to group rows for the decoding split.
    pub split_block: usize,
    pub ridge: f64,
    pub mlp_hidden: usize,
    pub mlp_steps: usize,
    pub mlp_batch: usize,
    pub mlp_learning_rate: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            max_points: 5000,
            overlap_k: 20,
            theiler: 10,
            ccm_k_cap: 20,
            cv_k: 3,
            cv_p: 10,
            volume_k: 20,
            test_fraction: 0.2,
            split_block: 50,
            ridge: 1e-6,
            mlp_hidden: 64,
            mlp_steps: 2000,
            mlp_batch: 256,
            mlp_learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Aligned rows of embedding, true state and future observations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSample {
    /// `[n, d]`
    pub o: Tensor,
    /// `[n, 3]`
    pub true_states: Tensor,
    /// `[n, p]`, `future_obs[r][j] = observed[times[r] + j + 1]`
    pub future_obs: Tensor,
    pub times: Vec<usize>,
    pub traj_ids: Vec<usize>,
}

impl EmbeddingSample {
    pub fn from_parts(
        o: Tensor,
        true_states: Tensor,
        future_obs: Tensor,
        times: Vec<usize>,
        traj_ids: Vec<usize>,
    ) -> Result<Self, MetricError> {
        let n = o.rows();
        if true_states.rows() != n || future_obs.rows() != n || times.len() != n || traj_ids.len() != n {
            return Err(MetricError::Inconsistent(format!(
                "row counts o={n} states={} future={} times={} ids={}",
                true_states.rows(),
                future_obs.rows(),
                times.len(),
                traj_ids.len()
            )));
        }
        if true_states.cols() != 3 {
            return Err(MetricError::Inconsistent(format!("true_states has {} columns", true_states.cols())));
        }
        Ok(Self { o, true_states, future_obs, times, traj_ids })
    }

    pub fn len(&self) -> usize {
        self.o.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.o.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.o.cols()
    }

    pub fn time_index(&self) -> TimeIndex<'_> {
        TimeIndex { times: &self.times, groups: &self.traj_ids }
    }

    /// Same rows with a different embedding.
    pub fn with_embedding(&self, o: Tensor) -> Result<Self, MetricError> {
        Self::from_parts(o, self.true_states.clone(), self.future_obs.clone(), self.times.clone(), self.traj_ids.clone())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            o: self.o.select_rows(rows),
            true_states: self.true_states.select_rows(rows),
            future_obs: self.future_obs.select_rows(rows),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            traj_ids: rows.iter().map(|&r| self.traj_ids[r]).collect(),
        }
    }
}

/// Per-trajectory embedding: returns `[T - offset, d]` rows and `offset`.
pub type EmbedFn<'a> = dyn Fn(&[f64]) -> Result<(Tensor, usize), MetricError> + Sync + 'a;

/// Gather rows from `split` using an arbitrary per-series embedding.
pub fn collect_with(
    dataset: &TrajectoryDataset,
    split: Split,
    horizon: usize,
    max_points: usize,
    seed_value: u64,
    embed: &EmbedFn<'_>,
) -> Result<EmbeddingSample, MetricError> {
    let mut o = Vec::new();
    let mut states = Vec::new();
    let mut future = Vec::new();
    let mut times = Vec::new();
    let mut ids = Vec::new();
    let mut width = 0;
    for &i in dataset.split(split) {
        let series = dataset.model_input(i);
        let (emb, offset) = embed(&series)?;
        width = emb.cols();
        let tr = &dataset.trajectories[i];
        let len = series.len();
        for t in offset..len.saturating_sub(horizon) {
            o.extend_from_slice(emb.row(t - offset));
            states.extend_from_slice(&tr.states[t]);
            future.extend_from_slice(&series[t + 1..=t + horizon]);
            times.push(t);
            ids.push(i);
        }
    }
    let n = times.len();
    let full = EmbeddingSample::from_parts(
        Tensor::matrix(n, width, o),
        Tensor::matrix(n, 3, states),
        Tensor::matrix(n, horizon, future),
        times,
        ids,
    )?;
    if n <= max_points {
        return Ok(full);
    }
    let mut rng = seed::rng(seed_value, seed::stream::SUBSAMPLE);
    let mut rows = index::sample(&mut rng, n, max_points).into_vec();
    rows.sort_unstable();
    Ok(full.select(&rows))
}

/// Sequence-layer outputs of `model` over the validation split.
pub fn collect_embeddings(
    model: &ModelParams,
    dataset: &TrajectoryDataset,
    config: &MetricConfig,
) -> Result<EmbeddingSample, MetricError> {
    let embed = |series: &[f64]| {
        let tr = model_forward(model, series)?;
        Ok((tr.o, tr.offset))
    };
    let sample = collect_with(dataset, Split::Validation, config.cv_p, config.max_points, config.seed, &embed)?;
    let needed = config.overlap_k.max(config.volume_k) + 2 * config.theiler + 1;
    if sample.len() < needed {
        return Err(MetricError::TooFewRows { needed, got: sample.len() });
    }
    Ok(sample)
}

/// Row split for decoding; whole (trajectory, time-block) groups go to one side.
pub fn decode_split(sample: &EmbeddingSample, config: &MetricConfig) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for r in 0..sample.len() {
        groups.entry((sample.traj_ids[r], sample.times[r] / config.split_block.max(1))).or_default().push(r);
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    let mut rng = seed::rng(config.seed, seed::stream::DECODE);
    keys.shuffle(&mut rng);
    let n_test = ((keys.len() as f64) * config.test_fraction).round().max(1.0) as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        if i < n_test { &mut test } else { &mut train }.extend_from_slice(&groups[k]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let d = x.cols();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let col: Vec<f64> = rows.iter().map(|&r| x.at(r, c)).collect();
            mean[c] = crate::numerics::mean(&col);
            let s = variance(&col).sqrt();
            std[c] = if s > 1e-12 { s } else { 1.0 };
        }
        Self { mean, std }
    }

    fn apply(&self, x: &Tensor, rows: &[usize]) -> Tensor {
        let d = x.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for c in 0..d {
                out.push((x.at(r, c) - self.mean[c]) / self.std[c]);
            }
        }
        Tensor::matrix(rows.len(), d, out)
    }
}

fn decode_targets(sample: &EmbeddingSample) -> Tensor {
    let n = sample.len();
    let mut t = Vec::with_capacity(2 * n);
    for r in 0..n {
        t.push(sample.true_states.at(r, 1));
        t.push(sample.true_states.at(r, 2));
    }
    Tensor::matrix(n, 2, t)
}

fn mean_r2(pred: &Tensor, truth: &Tensor) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for c in 0..truth.cols() {
        total += r_squared(&pred.column_values(c), &truth.column_values(c))
            .map_err(|_| MetricError::Degenerate("decode target".into()))?;
    }
    Ok(total / truth.cols() as f64)
}

struct DecodeData {
    x_train: Tensor,
    y_train: Tensor,
    x_test: Tensor,
    y_test: Tensor,
}

fn decode_data(sample: &EmbeddingSample, config: &MetricConfig) -> Result<DecodeData, MetricError> {
    if sample.len() < 200 {
        return Err(MetricError::TooFewRows { needed: 200, got: sample.len() });
    }
    let (train, test) = decode_split(sample, config);
    if train.len() < 2 || test.len() < 2 {
        return Err(MetricError::TooFewRows { needed: 4, got: sample.len() });
    }
    let targets = decode_targets(sample);
    let xs = Standardizer::fit(&sample.o, &train);
    let ys = Standardizer::fit(&targets, &train);
    Ok(DecodeData {
        x_train: xs.apply(&sample.o, &train),
        y_train: ys.apply(&targets, &train),
        x_test: xs.apply(&sample.o, &test),
        y_test: ys.apply(&targets, &test),
    })
}

/// Held-out R² of a ridge regression from `o` to (y, z), averaged over both.
pub fn decode_linear(sample: &EmbeddingSample, config: &MetricConfig) -> Result<f64, MetricError> {
    let data = decode_data(sample, config)?;
    let w = linear_least_squares(&data.x_train, &data.y_train, config.ridge)?;
    mean_r2(&predict_linear(&data.x_test, &w), &data.y_test)
}

/// Held-out R² of a two-hidden-layer GELU MLP from `o` to (y, z).
pub fn decode_mlp(sample: &EmbeddingSample, config: &MetricConfig) -> Result<f64, MetricError> {
    let data = decode_data(sample, config)?;
    let d = data.x_train.cols();
    let h = config.mlp_hidden;
    let mut rng = seed::rng(seed::derive(config.seed, 1), seed::stream::DECODE);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
        let w = Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| n.sample(&mut rng)).collect());
        [w, Tensor::row_vector(vec![0.0; fan_out])]
    };
    let mut params: Vec<Tensor> = [layer(d, h), layer(h, h), layer(h, 2)].into_iter().flatten().collect();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.mlp_learning_rate), &params);
    let n_train = data.x_train.rows();
    let batch = config.mlp_batch.min(n_train);
    let forward = |g: &mut Graph, v: &[Var], x: Var| {
        let a = g.matmul(x, v[0]);
        let a = g.add_row(a, v[1]);
        let a = g.gelu(a);
        let b = g.matmul(a, v[2]);
        let b = g.add_row(b, v[3]);
        let b = g.gelu(b);
        let c = g.matmul(b, v[4]);
        g.add_row(c, v[5])
    };
    for _ in 0..config.mlp_steps {
        let rows = index::sample(&mut rng, n_train, batch).into_vec();
        let xb = data.x_train.select_rows(&rows);
        let yb = data.y_train.select_rows(&rows);
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let x = g.constant(xb);
        let y = g.constant(yb);
        let pred = forward(&mut g, &vars, x);
        let diff = g.sub(pred, y);
        let sq = g.mul(diff, diff);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        adam_step(&mut params, &grads, &mut adam)?;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let x = g.constant(data.x_test.clone());
    let pred = forward(&mut g, &vars, x);
    if !g.value(pred).all_finite() {
        return Err(MetricError::Degenerate("decoder diverged".into()));
    }
    mean_r2(g.value(pred), &data.y_test)
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Mean fraction of shared k-NN indices between true-state and embedding space.
pub fn neighbors_overlap(sample: &EmbeddingSample, k: usize, theiler: usize) -> Result<f64, MetricError> {
    let rows = all_rows(sample.len());
    let ix = sample.time_index();
    let a = knn_with_index(&sample.true_states, &rows, k, theiler, Some(ix))?;
    let b = knn_with_index(&sample.o, &rows, k, theiler, Some(ix))?;
    let mut total = 0.0;
    for (na, nb) in a.iter().zip(&b) {
        let mut sa = na.clone();
        sa.sort_unstable();
        let shared = nb.iter().filter(|j| sa.binary_search(j).is_ok()).count();
        total += shared as f64 / k as f64;
    }
    Ok(total / rows.len() as f64)
}

/// Cross-map skill: predict the true state as the mean over embedding-space
/// neighbors; mean Pearson correlation over the three components.
pub fn ccm_score(sample: &EmbeddingSample, k_cap: usize, theiler: usize) -> Result<f64, MetricError> {
    let k = sample.dim().min(k_cap).max(1);
    let rows = all_rows(sample.len());
    let nbrs = knn_with_index(&sample.o, &rows, k, theiler, Some(sample.time_index()))?;
    let mut total = 0.0;
    for c in 0..3 {
        let truth = sample.true_states.column_values(c);
        let pred: Vec<f64> = nbrs.iter().map(|ns| ns.iter().map(|&j| truth[j]).sum::<f64>() / k as f64).collect();
        total += pearson_correlation(&pred, &truth)
            .map_err(|_| MetricError::Degenerate("cross-map prediction".into()))?;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVariance {
    pub raw: f64,
    /// `raw` over the variance of all future observations.
    pub normalized: f64,
    /// Mean of `E²_k(T_j)` over rows, per future step `j`.
    pub per_step: Vec<f64>,
}

/// Neighborhood estimate of the variance of future observations given the embedding.
pub fn conditional_variance(
    sample: &EmbeddingSample,
    k: usize,
    p: usize,
    theiler: usize,
) -> Result<ConditionalVariance, MetricError> {
    if sample.future_obs.cols() < p || p == 0 {
        return Err(MetricError::Inconsistent(format!(
            "need {p} future steps, sample has {}",
            sample.future_obs.cols()
        )));
    }
    let n = sample.len();
    let rows = all_rows(n);
    let nbrs = knn_with_index(&sample.o, &rows, k, theiler, Some(sample.time_index()))?;
    let mut per_step = vec![0.0; p];
    let size = (k + 1) as f64;
    for (r, ns) in nbrs.iter().enumerate() {
        for (j, step) in per_step.iter_mut().enumerate() {
            let vals = std::iter::once(r).chain(ns.iter().copied()).map(|i| sample.future_obs.at(i, j));
            let u = vals.clone().sum::<f64>() / size;
            *step += vals.map(|v| (v - u) * (v - u)).sum::<f64>() / size;
        }
    }
    per_step.iter_mut().for_each(|s| *s /= n as f64);
    let raw = per_step.iter().sum::<f64>() / p as f64;
    let all: Vec<f64> = (0..n).flat_map(|r| (0..p).map(move |j| (r, j))).map(|(r, j)| sample.future_obs.at(r, j)).collect();
    let var = variance(&all);
    let normalized = if var > 0.0 { raw / var } else { 0.0 };
    Ok(ConditionalVariance { raw, normalized, per_step })
}

/// Mean embedding-space distance to the `k` nearest neighbors.
pub fn local_volume(sample: &EmbeddingSample, k: usize, theiler: usize) -> Result<f64, MetricError> {
    let rows = all_rows(sample.len());
    let nbrs = knn_with_index(&sample.o, &rows, k, theiler, Some(sample.time_index()))?;
    let mut total = 0.0;
    for (r, ns) in nbrs.iter().enumerate() {
        let a = sample.o.row(r);
        let s: f64 = ns
            .iter()
            .map(|&j| a.iter().zip(sample.o.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .sum();
        total += s / k as f64;
    }
    Ok(total / rows.len() as f64)
}

pub fn embedding_pr(sample: &EmbeddingSample) -> Result<f64, MetricError> {
    if sample.len() < sample.dim().max(2) {
        return Err(MetricError::TooFewRows { needed: sample.dim().max(2), got: sample.len() });
    }
    Ok(pca(&sample.o)?.participation_ratio()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub d: usize,
    pub seed: u64,
    pub noise_variance: f64,
    pub epoch: usize,
    pub mase: f64,
    pub linear_decode_r2: Option<f64>,
    pub mlp_decode_r2: Option<f64>,
    pub neighbors_overlap: Option<f64>,
    pub ccm_score: Option<f64>,
    pub conditional_variance: Option<f64>,
    pub conditional_variance_normalized: Option<f64>,
    pub local_volume: Option<f64>,
    pub participation_ratio: Option<f64>,
}

pub const CSV_HEADER: &str = "schema_version,kind,d,seed,noise_variance,epoch,mase,linear_decode_r2,mlp_decode_r2,neighbors_overlap,ccm_score,conditional_variance,conditional_variance_normalized,local_volume,participation_ratio";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.kind,
            self.d,
            self.seed,
            self.noise_variance,
            self.epoch,
            self.mase,
            cell(self.linear_decode_r2),
            cell(self.mlp_decode_r2),
            cell(self.neighbors_overlap),
            cell(self.ccm_score),
            cell(self.conditional_variance),
            cell(self.conditional_variance_normalized),
            cell(self.local_volume),
            cell(self.participation_ratio),
        )
    }

    /// Named metric values, absent ones as `None`.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "mase" => Some(self.mase),
            "linear_decode_r2" => self.linear_decode_r2,
            "mlp_decode_r2" => self.mlp_decode_r2,
            "neighbors_overlap" => self.neighbors_overlap,
            "ccm_score" => self.ccm_score,
            "conditional_variance" => self.conditional_variance,
            "conditional_variance_normalized" => self.conditional_variance_normalized,
            "local_volume" => self.local_volume,
            "participation_ratio" => self.participation_ratio,
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 8] = [
    "linear_decode_r2",
    "mlp_decode_r2",
    "neighbors_overlap",
    "ccm_score",
    "conditional_variance",
    "conditional_variance_normalized",
    "local_volume",
    "participation_ratio",
];

/// All embedding metrics; a metric that cannot be computed is left absent.
pub fn metrics_for_sample(sample: &EmbeddingSample, config: &MetricConfig) -> MetricReportParts {
    let cv = conditional_variance(sample, config.cv_k, config.cv_p, config.theiler).ok();
    MetricReportParts {
        linear_decode_r2: decode_linear(sample, config).ok(),
        mlp_decode_r2: decode_mlp(sample, config).ok(),
        neighbors_overlap: neighbors_overlap(sample, config.overlap_k, config.theiler).ok(),
        ccm_score: ccm_score(sample, config.ccm_k_cap, config.theiler).ok(),
        conditional_variance: cv.as_ref().map(|c| c.raw),
        conditional_variance_normalized: cv.as_ref().map(|c| c.normalized),
        local_volume: local_volume(sample, config.volume_k, config.theiler).ok(),
        participation_ratio: embedding_pr(sample).ok(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReportParts {
    pub linear_decode_r2: Option<f64>,
    pub mlp_decode_r2: Option<f64>,
    pub neighbors_overlap: Option<f64>,
    pub ccm_score: Option<f64>,
    pub conditional_variance: Option<f64>,
    pub conditional_variance_normalized: Option<f64>,
    pub local_volume: Option<f64>,
    pub participation_ratio: Option<f64>,
}

/// Every metric for one model state.
pub fn metric_suite(
    model: &ModelParams,
    dataset: &TrajectoryDataset,
    epoch: usize,
    run_seed: u64,
    config: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    let mase = training::evaluate(model, dataset, Split::Validation)?;
    let sample = collect_embeddings(model, dataset, config)?;
    let m = metrics_for_sample(&sample, config);
    Ok(MetricReport {
        schema_version: SCHEMA_VERSION,
        kind: model.spec.kind,
        d: model.spec.d,
        seed: run_seed,
        noise_variance: dataset.config.noise_variance,
        epoch,
        mase,
        linear_decode_r2: m.linear_decode_r2,
        mlp_decode_r2: m.mlp_decode_r2,
        neighbors_overlap: m.neighbors_overlap,
        ccm_score: m.ccm_score,
        conditional_variance: m.conditional_variance,
        conditional_variance_normalized: m.conditional_variance_normalized,
        local_volume: m.local_volume,
        participation_ratio: m.participation_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    /// Metric value as correlated, e.g. `1 - mlp_decode_r2`.
    pub transform: String,
    pub n: usize,
    pub pearson: Option<f64>,
    /// Least-squares fit of transformed metric against MASE.
    pub fit: Option<LinearFit>,
}

pub const MIN_RUNS: usize = 5;

fn is_decoder(name: &str) -> bool {
    name.ends_with("decode_r2")
}

/// Ordinary least squares `y = slope x + intercept`; `None` when `x` is constant.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let mx = crate::numerics::mean(x);
    let my = crate::numerics::mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let pred: Vec<f64> = x.iter().map(|v| slope * v + intercept).collect();
    let r2 = r_squared(&pred, y).unwrap_or(f64::NAN);
    Some(LinearFit { slope, intercept, r2: if r2.is_nan() { 1.0 } else { r2 } })
}

/// Correlate each metric of the final reports against final MASE.
pub fn correlate_reports(reports: &[MetricReport]) -> Result<Vec<MetricCorrelation>, MetricError> {
    if reports.len() < MIN_RUNS {
        return Err(MetricError::InsufficientRuns { needed: MIN_RUNS, got: reports.len() });
    }
    let mut out = Vec::new();
    for name in METRIC_NAMES {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for r in reports {
            if let Some(v) = r.metric(name) {
                if v.is_finite() && r.mase.is_finite() {
                    x.push(r.mase);
                    y.push(if is_decoder(name) { 1.0 - v } else { v });
                }
            }
        }
        let pearson = if x.len() >= 2 { pearson_correlation(&x, &y).ok() } else { None };
        let fit = if pearson.is_some() { fit_line(&x, &y) } else { None };
        out.push(MetricCorrelation {
            metric: name.to_string(),
            transform: if is_decoder(name) { format!("1 - {name}") } else { name.to_string() },
            n: x.len(),
            pearson,
            fit,
        });
    }
    Ok(out)
}

/// Independent standard-normal embedding with the sample's row layout.
pub fn random_embedding(sample: &EmbeddingSample, d: usize, rng: &mut impl Rng) -> Result<EmbeddingSample, MetricError> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..sample.len() * d).map(|_| n.sample(rng)).collect();
    sample.with_embedding(Tensor::matrix(sample.len(), d, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{delay_embed, generate_dataset, reference_trajectory, LorenzParams, SimConfig};
    use crate::models::ModelSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One long noiseless trajectory as a sample whose embedding is the true state.
    fn lorenz_sample(n: usize) -> EmbeddingSample {
        let states = reference_trajectory(&LorenzParams::default(), 0.01, n + 10).unwrap();
        let xs: Vec<f64> = (0..n + 10).map(|r| states.at(r, 0)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let s = states.select_rows(&rows);
        let future = Tensor::matrix(n, 10, (0..n).flat_map(|t| xs[t + 1..=t + 10].to_vec()).collect());
        EmbeddingSample::from_parts(s.clone(), s, future, rows.clone(), vec![0; n]).unwrap()
    }

    fn rotate_scale(x: &Tensor, scale: f64) -> Tensor {
        let (a, b) = (0.7f64, 1.3f64);
        let rz = Tensor::matrix(3, 3, vec![a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]);
        let rx = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, b.cos(), -b.sin(), 0.0, b.sin(), b.cos()]);
        x.matmul(&rz.matmul(&rx)).map(|v| v * scale)
    }

    fn quick() -> MetricConfig {
        MetricConfig { mlp_steps: 600, ..MetricConfig::default() }
    }

    #[test]
    fn true_yz_decode_linearly_exactly() {
        let s = lorenz_sample(2000);
        let yz = Tensor::matrix(2000, 2, (0..2000).flat_map(|r| [s.true_states.at(r, 1), s.true_states.at(r, 2)]).collect());
        let r2 = decode_linear(&s.with_embedding(yz).unwrap(), &MetricConfig::default()).unwrap();
        assert!((r2 - 1.0).abs() < 1e-6, "{r2}");
    }

    #[test]
    fn noise_embedding_does_not_decode() {
        let s = lorenz_sample(2000);
        let noise = random_embedding(&s, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(decode_linear(&noise, &MetricConfig::default()).unwrap() <= 0.05);
        assert!(decode_mlp(&noise, &quick()).unwrap() <= 0.05);
    }

    #[test]
    fn decode_needs_enough_rows() {
        let s = lorenz_sample(150);
        assert!(matches!(decode_linear(&s, &MetricConfig::default()), Err(MetricError::TooFewRows { .. })));
    }

    #[test]
    fn decode_split_keeps_groups_together() {
        let s = lorenz_sample(1000);
        let cfg = MetricConfig::default();
        let (train, test) = decode_split(&s, &cfg);
        assert_eq!(train.len() + test.len(), 1000);
        let block = |r: usize| s.times[r] / cfg.split_block;
        for &t in &test {
            assert!(train.iter().all(|&r| block(r) != block(t)));
        }
        assert_eq!(test.len(), 200);
    }

    #[test]
    fn delay_embedding_supports_mlp_decoding() {
        let sim = SimConfig { n_trajectories: 40, seed: 2, ..SimConfig::default() };
        let data = generate_dataset(&sim, &LorenzParams::default()).unwrap();
        let embed = |series: &[f64]| {
            let e = delay_embed(series, 25, 1).map_err(|e| MetricError::Inconsistent(e.to_string()))?;
            let offset = e.time_of_row(0);
            Ok((e.matrix, offset))
        };
        let s = collect_with(&data, Split::Train, 10, 5000, 0, &embed).unwrap();
        let r2 = decode_mlp(&s, &MetricConfig::default()).unwrap();
        assert!(r2 > 0.9, "{r2}");
    }

    #[test]
    fn overlap_of_isometry_is_one() {
        let s = lorenz_sample(1500);
        let rot = s.with_embedding(rotate_scale(&s.true_states, 3.5)).unwrap();
        assert_eq!(neighbors_overlap(&rot, 20, 10).unwrap(), 1.0);
    }

    #[test]
    fn overlap_of_random_embedding_is_near_chance() {
        let s = lorenz_sample(5000);
        let noise = random_embedding(&s, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let v = neighbors_overlap(&noise, 20, 10).unwrap();
        assert!(v < 0.01, "{v}");
    }

    #[test]
    fn overlap_of_dropped_coordinate_is_intermediate() {
        let s = lorenz_sample(3000);
        let xy = Tensor::matrix(3000, 2, (0..3000).flat_map(|r| [s.true_states.at(r, 0), s.true_states.at(r, 1)]).collect());
        let v = neighbors_overlap(&s.with_embedding(xy).unwrap(), 20, 10).unwrap();
        assert!(v > 0.01 && v < 1.0, "{v}");
    }

    #[test]
    fn overlap_rejects_infeasible_k() {
        let s = lorenz_sample(30);
        assert!(neighbors_overlap(&s, 20, 10).is_err());
    }

    #[test]
    fn ccm_self_mapping_and_null() {
        let s = lorenz_sample(5000);
        let v = ccm_score(&s, 20, 10).unwrap();
        assert!(v >= 0.98, "{v}");
        let noise = random_embedding(&s, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let z = ccm_score(&noise, 20, 10).unwrap();
        assert!(z.abs() < 0.05, "{z}");
    }

    #[test]
    fn cv_zero_for_constant_futures() {
        let s = lorenz_sample(200);
        let flat = s.select(&(0..200).collect::<Vec<_>>());
        let flat = EmbeddingSample { future_obs: Tensor::full(&[200, 10], 2.5), ..flat };
        let cv = conditional_variance(&flat, 3, 10, 10).unwrap();
        assert_eq!(cv.raw, 0.0);
        assert_eq!(cv.normalized, 0.0);
    }

    #[test]
    fn cv_hand_computed_instance() {
        let o = Tensor::matrix(4, 1, vec![0.0, 0.1, 0.2, 0.3]);
        let s = EmbeddingSample::from_parts(
            o,
            Tensor::zeros(&[4, 3]),
            Tensor::matrix(4, 1, vec![0.0, 0.0, 0.0, 4.0]),
            vec![0, 1, 2, 3],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let cv = conditional_variance(&s, 3, 1, 0).unwrap();
        assert!((cv.raw - 3.0).abs() < 1e-12);
        assert_eq!(cv.per_step, vec![3.0]);
    }

    #[test]
    fn cv_of_random_embedding_is_k_over_k_plus_one() {
        let s = lorenz_sample(5000);
        let noise = random_embedding(&s, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cv = conditional_variance(&noise, 3, 10, 10).unwrap();
        assert!((cv.normalized - 0.75).abs() < 0.05, "{}", cv.normalized);
        let good = conditional_variance(&s, 3, 10, 10).unwrap();
        assert!(good.normalized < 0.05, "{}", good.normalized);
    }

    #[test]
    fn pr_of_true_states_and_one_dimensional() {
        let s = lorenz_sample(20_000);
        let pr = embedding_pr(&s).unwrap();
        assert!((pr - 1.986).abs() < 0.05, "{pr}");
        let line = s.with_embedding(Tensor::matrix(20_000, 1, s.true_states.column_values(0))).unwrap();
        assert_eq!(embedding_pr(&line).unwrap(), 1.0);
    }

    #[test]
    fn local_volume_scales_with_embedding() {
        let s = lorenz_sample(1000);
        let a = local_volume(&s, 20, 10).unwrap();
        let b = local_volume(&s.with_embedding(s.true_states.map(|v| 2.0 * v)).unwrap(), 20, 10).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9 * b);
    }

    fn tiny_data() -> TrajectoryDataset {
        let sim = SimConfig { n_trajectories: 20, steps_total: 300, seed: 9, noise_variance: 0.05, ..SimConfig::default() };
        generate_dataset(&sim, &LorenzParams::default()).unwrap()
    }

    #[test]
    fn collect_embeddings_alignment_and_subsampling() {
        let data = tiny_data();
        let model = ModelParams::init(&ModelSpec::new(ModelKind::Lru, 4), 3).unwrap();
        let cfg = MetricConfig { max_points: 100_000, ..MetricConfig::default() };
        let all = collect_embeddings(&model, &data, &cfg).unwrap();
        assert_eq!(all.len(), data.validation.len() * (200 - 10));
        for r in [0, 7, all.len() - 1] {
            let tr = &data.trajectories[all.traj_ids[r]];
            let t = all.times[r];
            assert_eq!(all.true_states.row(r), &tr.states[t]);
            let series = data.model_input(all.traj_ids[r]);
            assert_eq!(all.future_obs.row(r), &series[t + 1..=t + 10]);
            let tr_o = model_forward(&model, &series).unwrap();
            assert_eq!(all.o.row(r), tr_o.o.row(t));
        }
        let small = MetricConfig { max_points: 300, ..cfg.clone() };
        let a = collect_embeddings(&model, &data, &small).unwrap();
        let b = collect_embeddings(&model, &data, &small).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a, b);
    }

    #[test]
    fn suite_is_finite_in_range_and_repeatable() {
        let data = tiny_data();
        let model = ModelParams::init(&ModelSpec::new(ModelKind::Gpt, 6), 3).unwrap();
        let cfg = MetricConfig { mlp_steps: 200, max_points: 1500, ..MetricConfig::default() };
        let a = metric_suite(&model, &data, 0, 3, &cfg).unwrap();
        let b = metric_suite(&model, &data, 0, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let ov = a.neighbors_overlap.unwrap();
        assert!((0.0..=1.0).contains(&ov));
        assert!(a.linear_decode_r2.unwrap() <= 1.0 && a.mlp_decode_r2.unwrap() <= 1.0);
        assert!(a.conditional_variance.unwrap() >= 0.0);
        for name in METRIC_NAMES {
            assert!(a.metric(name).unwrap().is_finite(), "{name}");
        }
        assert_eq!(CSV_HEADER.split(',').count(), a.csv_row().split(',').count());
    }

    fn report(mase: f64, r2: f64) -> MetricReport {
        MetricReport {
            schema_version: SCHEMA_VERSION,
            kind: ModelKind::Lru,
            d: 10,
            seed: 0,
            noise_variance: 0.0,
            epoch: 300,
            mase,
            linear_decode_r2: Some(r2),
            mlp_decode_r2: Some(r2),
            neighbors_overlap: None,
            ccm_score: Some(0.5),
            conditional_variance: Some(mase * 2.0),
            conditional_variance_normalized: None,
            local_volume: None,
            participation_ratio: Some(1.5),
        }
    }

    #[test]
    fn correlation_of_exact_relation_is_one() {
        let reports: Vec<_> = (0..6).map(|i| report(0.1 * i as f64 + 0.05, 0.95 - 0.1 * i as f64)).collect();
        let table = correlate_reports(&reports).unwrap();
        let mlp = table.iter().find(|c| c.metric == "mlp_decode_r2").unwrap();
        assert!((mlp.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mlp.transform, "1 - mlp_decode_r2");
        let fit = mlp.fit.as_ref().unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
        let ccm = table.iter().find(|c| c.metric == "ccm_score").unwrap();
        assert!(ccm.pearson.is_none());
        assert_eq!(table.iter().find(|c| c.metric == "local_volume").unwrap().n, 0);
    }

    #[test]
    fn identical_runs_have_no_correlation() {
        let reports = vec![report(0.3, 0.8); 5];
        assert!(correlate_reports(&reports).unwrap().iter().all(|c| c.pearson.is_none()));
        assert!(matches!(correlate_reports(&reports[..4]), Err(MetricError::InsufficientRuns { .. })));
    }

    #[test]
    fn fit_line_recovers_identity() {
        let x = [0.0, 1.0, 2.0, 5.0];
        let f = fit_line(&x, &x).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.intercept.abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn knn_metrics_are_similarity_invariant(scale in 0.1f64..20.0, seed in 0u64..1000) {
            let s = lorenz_sample(400);
            let base = random_embedding(&s, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let moved = base.with_embedding(rotate_scale(&base.o, scale)).unwrap();
            prop_assert_eq!(neighbors_overlap(&base, 10, 5).unwrap(), neighbors_overlap(&moved, 10, 5).unwrap());
            prop_assert_eq!(ccm_score(&base, 20, 5).unwrap(), ccm_score(&moved, 20, 5).unwrap());
            let a = conditional_variance(&base, 3, 10, 5).unwrap();
            let b = conditional_variance(&moved, 3, 10, 5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
