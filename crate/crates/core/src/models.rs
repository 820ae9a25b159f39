//! One-layer sequence models: attention decoder, linear recurrent unit and
//! the delay-embedding MLP baseline.
//!
//! The attention and LRU models share one skeleton:
//!
//! ```text
//! x_t ─ encoder ─ layer norm ─ sequence layer ─(o_t)─ layer norm ─ MLP ─ x̂_{t+1}
//! ```
//!
//! `o_t`, the sequence-layer output, is what the embedding metrics inspect.
//! Activations are row vectors: a length-`T` sequence of width `d` is a
//! `[T, d]` matrix and linear maps `W` act as `u · Wᵀ` for square maps.

use crate::dynamics::delay_embed;
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("sequence of length {len} too short (need {needed})")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("non-finite activation in layer `{layer}` (node {node})")]
    NonFinite { layer: &'static str, node: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid LRU radius range [{r_min}, {r_max})")]
    InvalidRadius { r_min: f64, r_max: f64 },
    #[error("parameter `{name}`: {detail}")]
    BadParameter { name: String, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gpt,
    Lru,
    DelayMlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gpt => "gpt",
            ModelKind::Lru => "lru",
            ModelKind::DelayMlp => "delay_mlp",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gpt" => Ok(ModelKind::Gpt),
            "lru" => Ok(ModelKind::Lru),
            "delay_mlp" | "delay-mlp" => Ok(ModelKind::DelayMlp),
            other => Err(ModelError::InvalidSpec(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Model width; for the delay MLP this is the hidden width.
    pub d: usize,
    /// Length of the positional table (attention only).
    pub max_len: usize,
    /// Delay-MLP window length; delays are one step apart.
    pub n_delays: usize,
    pub lru_r_min: f64,
    pub lru_r_max: f64,
    pub pos_init_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lru,
            d: 25,
            max_len: 500,
            n_delays: 25,
            lru_r_min: 0.0,
            lru_r_max: 0.99,
            pos_init_std: 0.02,
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, d: usize) -> Self {
        Self { kind, d, ..Self::default() }
    }

    pub fn delay_mlp(n_delays: usize, width: usize) -> Self {
        Self { kind: ModelKind::DelayMlp, d: width, n_delays, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 {
            return Err(ModelError::InvalidSpec("d must be positive".into()));
        }
        match self.kind {
            ModelKind::Gpt if self.max_len == 0 => {
                Err(ModelError::InvalidSpec("max_len must be positive".into()))
            }
            ModelKind::Lru => check_radius(self.lru_r_min, self.lru_r_max),
            ModelKind::DelayMlp if self.n_delays == 0 => {
                Err(ModelError::InvalidSpec("n_delays must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Ordered parameter names and shapes.
    pub fn layout(&self) -> Vec<(&'static str, [usize; 2])> {
        let d = self.d;
        let h = 2 * d;
        let mut out = Vec::new();
        match self.kind {
            ModelKind::Gpt | ModelKind::Lru => {
                out.push(("encoder.weight", [1, d]));
                out.push(("encoder.bias", [1, d]));
                out.push(("ln1.gamma", [1, d]));
                out.push(("ln1.beta", [1, d]));
                if self.kind == ModelKind::Gpt {
                    out.push(("attn.w_qk", [d, d]));
                    out.push(("attn.w_ov", [d, d]));
                    out.push(("attn.pos", [self.max_len, d]));
                } else {
                    out.push(("lru.nu", [1, d]));
                    out.push(("lru.theta", [1, d]));
                    out.push(("lru.b_re", [d, d]));
                    out.push(("lru.b_im", [d, d]));
                    out.push(("lru.c", [d, d]));
                    out.push(("lru.d", [d, d]));
                }
                out.push(("ln2.gamma", [1, d]));
                out.push(("ln2.beta", [1, d]));
                out.push(("head.w1", [d, h]));
                out.push(("head.b1", [1, h]));
                out.push(("head.w2", [h, h]));
                out.push(("head.b2", [1, h]));
                out.push(("head.w3", [h, 1]));
                out.push(("head.b3", [1, 1]));
            }
            ModelKind::DelayMlp => {
                out.push(("head.w1", [self.n_delays, d]));
                out.push(("head.b1", [1, d]));
                out.push(("head.w2", [d, d]));
                out.push(("head.b2", [1, d]));
                out.push(("head.w3", [d, 1]));
                out.push(("head.b3", [1, 1]));
            }
        }
        out
    }

    /// Position of the first prediction in the input series.
    pub fn first_position(&self) -> usize {
        match self.kind {
            ModelKind::DelayMlp => self.n_delays - 1,
            _ => 0,
        }
    }
}

fn check_radius(r_min: f64, r_max: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&r_min) || !(r_min < r_max && r_max <= 1.0) {
        return Err(ModelError::InvalidRadius { r_min, r_max });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_qk: Tensor,
    pub w_ov: Tensor,
    pub pos: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LruParams {
    pub nu: Tensor,
    pub theta: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

impl LruParams {
    /// Eigenvalues `exp(-exp(ν)) · e^{iθ}` as (re, im) pairs.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.nu
            .data()
            .iter()
            .zip(self.theta.data())
            .map(|(&nu, &th)| {
                let mag = (-nu.exp()).exp();
                (mag * th.cos(), mag * th.sin())
            })
            .collect()
    }
}

/// Eigenvalue magnitudes uniform in area on the annulus `[r_min, r_max)`,
/// phases uniform on `[0, 2π)`; complex `B` and real `C`, `D` Gaussian with
/// variance `1/d` (the real and imaginary halves of `B` share it equally).
pub fn lru_init(d: usize, r_min: f64, r_max: f64, rng: &mut impl Rng) -> Result<LruParams, ModelError> {
    check_radius(r_min, r_max)?;
    if d == 0 {
        return Err(ModelError::InvalidSpec("d must be positive".into()));
    }
    let (nu, theta) = lru_eigen_init(d, r_min, r_max, rng);
    let std = (1.0 / d as f64).sqrt();
    let half = (0.5 / d as f64).sqrt();
    Ok(LruParams {
        nu: Tensor::row_vector(nu),
        theta: Tensor::row_vector(theta),
        b_re: gaussian(rng, d, d, half),
        b_im: gaussian(rng, d, d, half),
        c: gaussian(rng, d, d, std),
        d: gaussian(rng, d, d, std),
    })
}

/// Log-parametrized eigenvalues `(nu, theta)` uniform on the ring `r_min <= |λ| < r_max`.
pub fn lru_eigen_init(d: usize, r_min: f64, r_max: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mut nu = Vec::with_capacity(d);
    let mut theta = Vec::with_capacity(d);
    for _ in 0..d {
        let u: f64 = rng.random_range(r_min * r_min..r_max * r_max);
        let mag = u.sqrt().max(1e-12);
        nu.push((-mag.ln()).ln());
        theta.push(rng.random_range(0.0..2.0 * PI));
    }
    (nu, theta)
}

fn gaussian(rng: &mut impl Rng, r: usize, c: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(r, c, (0..r * c).map(|_| n.sample(rng)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    /// In [`ModelSpec::layout`] order.
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = seed::rng(seed, seed::stream::INIT);
        let d = spec.d;
        let layout = spec.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        let lru = if spec.kind == ModelKind::Lru {
            Some(lru_init(d, spec.lru_r_min, spec.lru_r_max, &mut rng)?)
        } else {
            None
        };
        for (name, [r, c]) in &layout {
            let t = match *name {
                "encoder.weight" => gaussian(&mut rng, *r, *c, 1.0),
                "ln1.gamma" | "ln2.gamma" => Tensor::full(&[*r, *c], 1.0),
                "attn.w_qk" | "attn.w_ov" => gaussian(&mut rng, *r, *c, (1.0 / d as f64).sqrt()),
                "attn.pos" => gaussian(&mut rng, *r, *c, spec.pos_init_std),
                "lru.nu" => lru.as_ref().expect("lru").nu.clone(),
                "lru.theta" => lru.as_ref().expect("lru").theta.clone(),
                "lru.b_re" => lru.as_ref().expect("lru").b_re.clone(),
                "lru.b_im" => lru.as_ref().expect("lru").b_im.clone(),
                "lru.c" => lru.as_ref().expect("lru").c.clone(),
                "lru.d" => lru.as_ref().expect("lru").d.clone(),
                "head.w1" | "head.w2" | "head.w3" => {
                    gaussian(&mut rng, *r, *c, (1.0 / *r as f64).sqrt())
                }
                _ => Tensor::zeros(&[*r, *c]),
            };
            tensors.push(t);
        }
        Ok(Self { spec: spec.clone(), tensors })
    }

    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::InvalidSpec(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, [r, c]), t) in layout.iter().zip(&tensors) {
            if t.rows() != *r || t.cols() != *c {
                return Err(ModelError::BadParameter {
                    name: name.to_string(),
                    detail: format!("shape {:?}, expected [{r}, {c}]", t.shape()),
                });
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.spec.layout().iter().position(|(n, _)| *n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.spec.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn attention_params(&self) -> Option<AttentionParams> {
        Some(AttentionParams {
            w_qk: self.get("attn.w_qk")?.clone(),
            w_ov: self.get("attn.w_ov")?.clone(),
            pos: self.get("attn.pos")?.clone(),
        })
    }

    pub fn lru_params(&self) -> Option<LruParams> {
        Some(LruParams {
            nu: self.get("lru.nu")?.clone(),
            theta: self.get("lru.theta")?.clone(),
            b_re: self.get("lru.b_re")?.clone(),
            b_im: self.get("lru.b_im")?.clone(),
            c: self.get("lru.c")?.clone(),
            d: self.get("lru.d")?.clone(),
        })
    }
}

/// Number of learnable scalars.
pub fn param_count(params: &ModelParams) -> usize {
    params.tensors.iter().map(Tensor::len).sum()
}

/// Learnable scalars per group prefix (`encoder`, `ln1`, `attn`, `lru`, `ln2`, `head`).
pub fn param_breakdown(params: &ModelParams) -> Vec<(&'static str, usize)> {
    let mut out: Vec<(&'static str, usize)> = Vec::new();
    for ((name, _), t) in params.spec.layout().iter().zip(&params.tensors) {
        let group = name.split('.').next().unwrap_or(name);
        match out.iter_mut().find(|(g, _)| *g == group) {
            Some((_, n)) => *n += t.len(),
            None => out.push((group, t.len())),
        }
    }
    out
}

/// Sequence-layer outputs and next-step predictions for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTrace {
    /// `[T - offset, width]`, row `i` belongs to series position `offset + i`.
    pub o: Tensor,
    /// `predictions[i]` estimates `series[offset + i + 1]`.
    pub predictions: Vec<f64>,
    pub offset: usize,
}

pub(crate) struct ForwardVars {
    pub o: Var,
    pub predictions: Var,
}

fn attention_layer(g: &mut Graph, u: Var, w_qk: Var, w_ov: Var, pos: Var) -> Var {
    let t = g.value(u).rows();
    let p = g.slice_rows(pos, 0, t);
    let z = g.add(u, p);
    // logits[T, t] = z_tᵀ W_qk z_T, i.e. queries W_qk z_T against keys z_t
    let q = g.matmul_t(z, false, w_qk, true);
    let v = g.matmul_t(u, false, w_ov, true);
    g.causal_attention(q, z, v)
}

fn lru_layer(g: &mut Graph, u: Var, vars: &[Var; 6]) -> Var {
    let [nu, theta, b_re, b_im, c, d] = *vars;
    let e = g.exp(nu);
    let ne = g.neg(e);
    let mag = g.exp(ne);
    let cos = g.cos(theta);
    let sin = g.sin(theta);
    let lam_re = g.mul(mag, cos);
    let lam_im = g.mul(mag, sin);
    let bu_re = g.matmul_t(u, false, b_re, true);
    let bu_im = g.matmul_t(u, false, b_im, true);
    let state_re = g.diag_scan(bu_re, bu_im, lam_re, lam_im);
    let readout = g.matmul_t(state_re, false, c, true);
    let feedthrough = g.matmul_t(u, false, d, true);
    g.add(readout, feedthrough)
}

fn head_mlp(g: &mut Graph, x: Var, w: &[Var]) -> Var {
    let h = g.matmul(x, w[0]);
    let h = g.add_row(h, w[1]);
    let h = g.gelu(h);
    let h = g.matmul(h, w[2]);
    let h = g.add_row(h, w[3]);
    let h = g.gelu(h);
    let h = g.matmul(h, w[4]);
    g.add_row(h, w[5])
}

pub(crate) fn check_input(spec: &ModelSpec, len: usize) -> Result<(), ModelError> {
    let needed = match spec.kind {
        ModelKind::DelayMlp => spec.n_delays.max(2),
        _ => 2,
    };
    if len < needed {
        return Err(ModelError::SequenceTooShort { len, needed });
    }
    if spec.kind == ModelKind::Gpt && len > spec.max_len {
        return Err(ModelError::SequenceTooLong { len, max_len: spec.max_len });
    }
    Ok(())
}

/// Record the forward pass for `input` on `g`, with parameter nodes `vars`.
pub(crate) fn build_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    vars: &[Var],
    input: &[f64],
) -> Result<ForwardVars, ModelError> {
    check_input(spec, input.len())?;
    if spec.kind == ModelKind::DelayMlp {
        g.set_label("delay_embedding");
        let emb = delay_embed(input, spec.n_delays, 1)
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        let x = g.constant(emb.matrix);
        g.set_label("head");
        let predictions = head_mlp(g, x, &vars[0..6]);
        return Ok(ForwardVars { o: x, predictions });
    }
    g.set_label("encoder");
    let x = g.constant(Tensor::column(input.to_vec()));
    let h = g.matmul(x, vars[0]);
    let h = g.add_row(h, vars[1]);
    g.set_label("ln1");
    let u = g.layer_norm(h, vars[2], vars[3]);
    let (o, rest) = match spec.kind {
        ModelKind::Gpt => {
            g.set_label("attention");
            (attention_layer(g, u, vars[4], vars[5], vars[6]), &vars[7..])
        }
        _ => {
            g.set_label("lru");
            let lv: [Var; 6] = vars[4..10].try_into().expect("six lru params");
            (lru_layer(g, u, &lv), &vars[10..])
        }
    };
    g.set_label("ln2");
    let y = g.layer_norm(o, rest[0], rest[1]);
    g.set_label("head");
    let predictions = head_mlp(g, y, &rest[2..8]);
    Ok(ForwardVars { o, predictions })
}

fn non_finite(g: &Graph) -> Option<ModelError> {
    g.non_finite().map(|nf| ModelError::NonFinite { layer: nf.label, node: nf.node })
}

/// Inference pass over one series.
pub fn model_forward(params: &ModelParams, observed: &[f64]) -> Result<EmbeddingTrace, ModelError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let fv = build_forward(&mut g, &params.spec, &vars, observed)?;
    if let Some(e) = non_finite(&g) {
        return Err(e);
    }
    Ok(EmbeddingTrace {
        o: g.value(fv.o).clone(),
        predictions: g.value(fv.predictions).data().to_vec(),
        offset: params.spec.first_position(),
    })
}

/// Predictions of the delay-MLP baseline.
pub fn delay_mlp_forward(params: &ModelParams, observed: &[f64]) -> Result<Vec<f64>, ModelError> {
    if params.spec.kind != ModelKind::DelayMlp {
        return Err(ModelError::InvalidSpec("not a delay MLP".into()));
    }
    Ok(model_forward(params, observed)?.predictions)
}

/// Self-attention layer on a `[T, d]` input.
pub fn attention_forward(params: &AttentionParams, u: &Tensor) -> Result<Tensor, ModelError> {
    if u.rows() > params.pos.rows() {
        return Err(ModelError::SequenceTooLong { len: u.rows(), max_len: params.pos.rows() });
    }
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let w_qk = g.constant(params.w_qk.clone());
    let w_ov = g.constant(params.w_ov.clone());
    let pos = g.constant(params.pos.clone());
    let o = attention_layer(&mut g, uv, w_qk, w_ov, pos);
    Ok(g.value(o).clone())
}

/// LRU layer on a `[T, d]` input.
pub fn lru_forward(params: &LruParams, u: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let vars = [
        g.constant(params.nu.clone()),
        g.constant(params.theta.clone()),
        g.constant(params.b_re.clone()),
        g.constant(params.b_im.clone()),
        g.constant(params.c.clone()),
        g.constant(params.d.clone()),
    ];
    let o = lru_layer(&mut g, uv, &vars);
    g.value(o).clone()
}
