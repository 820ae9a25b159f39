//! Lorenz simulation, noisy partially observed datasets and explicit delay
//! embeddings.

use crate::container::{Container, ContainerError};
use crate::numerics::{self, Tensor};
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// States with a norm above this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e4;
const MAX_IC_RETRIES: usize = 16;
const VALIDATION_FRACTION: f64 = 0.1;
const WARMUP_STEPS: std::ops::RangeInclusive<usize> = 10_000..=20_000;
const IC_PERTURBATION_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("integration diverged at step {step} (|state| = {norm:.3e})")]
    Diverged { step: usize, norm: f64 },
    #[error("trajectory {index} diverged after {retries} initial-condition retries")]
    RetriesExhausted { index: usize, retries: usize },
    #[error("series of length {len} too short for {n_delays} delays at interval {interval}")]
    SeriesTooShort { len: usize, n_delays: usize, interval: usize },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("dataset container: {0}")]
    Schema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

pub type State = [f64; 3];

pub fn lorenz_derivative(s: State, p: &LorenzParams) -> State {
    let [x, y, z] = s;
    [p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z]
}

fn axpy(a: State, h: f64, k: State) -> State {
    [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2]]
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step(s: State, p: &LorenzParams, dt: f64) -> State {
    let k1 = lorenz_derivative(s, p);
    let k2 = lorenz_derivative(axpy(s, dt / 2.0, k1), p);
    let k3 = lorenz_derivative(axpy(s, dt / 2.0, k2), p);
    let k4 = lorenz_derivative(axpy(s, dt, k3), p);
    let mut out = s;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn norm(s: State) -> f64 {
    (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt()
}

/// Integrate with RK4. Returns `n_states` states; the first is `ic`.
pub fn integrate(
    ic: State,
    params: &LorenzParams,
    dt: f64,
    n_states: usize,
) -> Result<Vec<State>, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidConfig { field: "dt", message: format!("{dt} <= 0") });
    }
    let mut out = Vec::with_capacity(n_states);
    let mut s = ic;
    for step in 0..n_states {
        let n = norm(s);
        if !(n <= DIVERGENCE_NORM) {
            return Err(DynamicsError::Diverged { step, norm: n });
        }
        out.push(s);
        if step + 1 < n_states {
            s = rk4_step(s, params, dt);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub steps_total: usize,
    pub transient_steps: usize,
    pub n_trajectories: usize,
    pub noise_variance: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            steps_total: 600,
            transient_steps: 100,
            n_trajectories: 2000,
            noise_variance: 0.1,
            seed: 0,
            standardize: true,
        }
    }
}

impl SimConfig {
    /// Reduced trajectory count, identical structure.
    pub fn desk_scale(mut self) -> Self {
        self.n_trajectories = 200;
        self
    }

    pub fn retained_steps(&self) -> usize {
        self.steps_total - self.transient_steps
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |field, message: String| Err(DynamicsError::InvalidConfig { field, message });
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if self.transient_steps >= self.steps_total {
            return bad(
                "transient_steps",
                format!("{} must be < steps_total {}", self.transient_steps, self.steps_total),
            );
        }
        if self.retained_steps() < 2 {
            return bad("steps_total", "need at least 2 retained steps".into());
        }
        if self.n_trajectories < 2 {
            return bad("n_trajectories", "need at least 2 (train and validation)".into());
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad("noise_variance", format!("must be >= 0, got {}", self.noise_variance));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    /// Noisy x channel, unstandardized.
    pub observed: Vec<f64>,
    pub initial_condition: State,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub config: SimConfig,
    pub params: LorenzParams,
    pub trajectories: Vec<Trajectory>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Statistics of the observed channel over the train split.
    pub standardization: Standardization,
}

impl TrajectoryDataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    /// The series the models see: observed x, standardized when configured.
    pub fn model_input(&self, index: usize) -> Vec<f64> {
        let obs = &self.trajectories[index].observed;
        if self.config.standardize {
            obs.iter().map(|&v| self.standardization.apply(v)).collect()
        } else {
            obs.clone()
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "sim": self.config,
            "lorenz": self.params,
            "train": self.train,
            "validation": self.validation,
            "standardization": self.standardization,
            "trajectory_seeds": self.trajectories.iter().map(|t| t.seed).collect::<Vec<_>>(),
        });
        let mut c = Container::new("dataset", meta);
        let n = self.trajectories.len();
        let t = self.trajectories.first().map_or(0, Trajectory::len);
        let states = self.trajectories.iter().flat_map(|tr| tr.states.iter().flatten().copied());
        c.push("states", vec![n, t, 3], states.collect());
        let observed = self.trajectories.iter().flat_map(|tr| tr.observed.iter().copied());
        c.push("observed", vec![n, t], observed.collect());
        let ics = self.trajectories.iter().flat_map(|tr| tr.initial_condition);
        c.push("initial_conditions", vec![n, 3], ics.collect());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DynamicsError> {
        if c.kind != "dataset" {
            return Err(DynamicsError::Schema(format!("expected kind dataset, got {}", c.kind)));
        }
        let config: SimConfig = meta_field(c, "sim")?;
        let params: LorenzParams = meta_field(c, "lorenz")?;
        let train: Vec<usize> = meta_field(c, "train")?;
        let validation: Vec<usize> = meta_field(c, "validation")?;
        let standardization: Standardization = meta_field(c, "standardization")?;
        let seeds: Vec<u64> = meta_field(c, "trajectory_seeds")?;
        let states = c.array("states")?;
        let observed = c.array("observed")?;
        let ics = c.array("initial_conditions")?;
        let (n, t) = match states.shape.as_slice() {
            [n, t, 3] => (*n, *t),
            s => return Err(DynamicsError::Schema(format!("states shape {s:?}"))),
        };
        if observed.shape != [n, t] || ics.shape != [n, 3] || seeds.len() != n {
            return Err(DynamicsError::Schema("inconsistent array shapes".into()));
        }
        let trajectories = (0..n)
            .map(|i| Trajectory {
                states: states.data[i * t * 3..(i + 1) * t * 3]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect(),
                observed: observed.data[i * t..(i + 1) * t].to_vec(),
                initial_condition: [ics.data[i * 3], ics.data[i * 3 + 1], ics.data[i * 3 + 2]],
                seed: seeds[i],
            })
            .collect();
        Ok(Self { config, params, trajectories, train, validation, standardization })
    }

    pub fn save(&self, path: &Path) -> Result<(), DynamicsError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DynamicsError> {
        Self::from_container(&Container::load(path)?)
    }
}

/// A point near the attractor: RK4 from (1, 1, 1) for a random number of
/// warm-up steps, then a small Gaussian perturbation.
fn draw_initial_condition(rng: &mut impl Rng, params: &LorenzParams, dt: f64) -> State {
    let warmup = rng.random_range(WARMUP_STEPS);
    let mut s = [1.0, 1.0, 1.0];
    for _ in 0..warmup {
        s = rk4_step(s, params, dt);
    }
    for v in &mut s {
        let e: f64 = StandardNormal.sample(rng);
        *v += IC_PERTURBATION_STD * e;
    }
    s
}

fn simulate_one(
    index: usize,
    sim: &SimConfig,
    params: &LorenzParams,
) -> Result<Trajectory, DynamicsError> {
    let traj_seed = seed::derive(sim.seed, seed::stream::TRAJECTORY_BASE + index as u64);
    let mut rng = seed::rng(traj_seed, 0);
    for _ in 0..MAX_IC_RETRIES {
        let ic = draw_initial_condition(&mut rng, params, sim.dt);
        let states = match integrate(ic, params, sim.dt, sim.steps_total) {
            Ok(s) => s,
            Err(DynamicsError::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let states = states[sim.transient_steps..].to_vec();
        let observed = if sim.noise_variance == 0.0 {
            states.iter().map(|s| s[0]).collect()
        } else {
            let noise = Normal::new(0.0, sim.noise_variance.sqrt()).expect("valid std");
            states.iter().map(|s| s[0] + noise.sample(&mut rng)).collect()
        };
        return Ok(Trajectory { states, observed, initial_condition: ic, seed: traj_seed });
    }
    Err(DynamicsError::RetriesExhausted { index, retries: MAX_IC_RETRIES })
}

/// Simulate, split 90/10 by trajectory and compute train-split statistics.
pub fn generate_dataset(
    sim: &SimConfig,
    params: &LorenzParams,
) -> Result<TrajectoryDataset, DynamicsError> {
    use rayon::prelude::*;
    sim.validate()?;
    let trajectories = (0..sim.n_trajectories)
        .into_par_iter()
        .map(|i| simulate_one(i, sim, params))
        .collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..sim.n_trajectories).collect();
    let mut rng = seed::rng(sim.seed, seed::stream::SPLIT);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_val = ((sim.n_trajectories as f64 * VALIDATION_FRACTION).round() as usize)
        .clamp(1, sim.n_trajectories - 1);
    let mut validation = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();

    let train_obs: Vec<f64> =
        train.iter().flat_map(|&i| trajectories[i].observed.iter().copied()).collect();
    let mean = numerics::mean(&train_obs);
    let std = numerics::std_dev(&train_obs);
    let std = if std > 0.0 { std } else { 1.0 };
    Ok(TrajectoryDataset {
        config: sim.clone(),
        params: *params,
        trajectories,
        train,
        validation,
        standardization: Standardization { mean, std },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DelayEmbedding {
    /// `[T', n_delays]`; row `i` is time `i + (n_delays-1)·interval`.
    pub matrix: Tensor,
    pub n_delays: usize,
    pub interval: usize,
}

impl DelayEmbedding {
    /// Series time index of row `row`.
    pub fn time_of_row(&self, row: usize) -> usize {
        row + (self.n_delays - 1) * self.interval
    }
}

/// Stack `series[t], series[t-interval], …` into rows.
pub fn delay_embed(
    series: &[f64],
    n_delays: usize,
    interval: usize,
) -> Result<DelayEmbedding, DynamicsError> {
    let span = n_delays.saturating_sub(1) * interval;
    if n_delays == 0 || interval == 0 || series.len() <= span {
        return Err(DynamicsError::SeriesTooShort { len: series.len(), n_delays, interval });
    }
    let rows = series.len() - span;
    let mut data = Vec::with_capacity(rows * n_delays);
    for r in 0..rows {
        let t = r + span;
        for j in 0..n_delays {
            data.push(series[t - j * interval]);
        }
    }
    Ok(DelayEmbedding { matrix: Tensor::matrix(rows, n_delays, data), n_delays, interval })
}

/// A long single trajectory started near the attractor, as a `[n, 3]` tensor.
pub fn reference_trajectory(params: &LorenzParams, dt: f64, n: usize) -> Result<Tensor, DynamicsError> {
    let mut s = [1.0, 1.0, 1.0];
    for _ in 0..5_000 {
        s = rk4_step(s, params, dt);
    }
    let states = integrate(s, params, dt, n)?;
    Ok(Tensor::matrix(n, 3, states.into_iter().flatten().collect()))
}

fn meta_field<T: serde::de::DeserializeOwned>(c: &Container, name: &str) -> Result<T, DynamicsError> {
    let v = c.meta.get(name).cloned().ok_or_else(|| DynamicsError::Schema(format!("missing {name}")))?;
    serde_json::from_value(v).map_err(|e| DynamicsError::Schema(format!("{name}: {e}")))
}
