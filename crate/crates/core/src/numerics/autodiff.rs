//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it is
//! recorded, so node inputs always precede the node and the tape is acyclic by
//! construction. [`Graph::backward`] walks the tape once in reverse and returns
//! one gradient per registered parameter leaf.
//!
//! Besides the elementwise and linear-algebra primitives there are three fused
//! kernels with hand-written adjoints: row-wise layer normalization, the
//! diagonal complex linear recurrence used by the LRU layer and causal
//! single-head attention. Each is checked against finite differences in the
//! tests below.

use super::tensor::{matmul, Tensor};
use super::NumericsError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Tanh,
    Relu,
    Gelu,
    Cos,
    Sin,
    Neg,
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Softmax(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    DiagScan { bu_re: Var, bu_im: Var, lam_re: Var, lam_im: Var, imag: Tensor },
    CausalAttention { q: Var, k: Var, v: Var, probs: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Unary(u, _) => match u {
                Unary::Exp => "exp",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Gelu => "gelu",
                Unary::Cos => "cos",
                Unary::Sin => "sin",
                Unary::Neg => "neg",
            },
            Op::Softmax(_) => "softmax",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DiagScan { .. } => "diag_scan",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// First non-finite value seen while recording.
#[derive(Clone, Debug, PartialEq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
    pub label: &'static str,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
    label: &'static str,
    non_finite: Option<NonFinite>,
}

impl Graph {
    pub fn new() -> Self {
        Self { label: "graph", ..Self::default() }
    }

    /// Label attached to every node recorded from now on (used in errors).
    pub fn set_label(&mut self, label: &'static str) {
        self.label = label;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn non_finite(&self) -> Option<&NonFinite> {
        self.non_finite.as_ref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(NonFinite { node: id, op: op.name(), label: self.label });
        }
        self.nodes.push(Node { op, value });
        Var(id)
    }

    /// Register a differentiable leaf. Gradients are returned in registration order.
    pub fn param(&mut self, value: Tensor) -> Var {
        let idx = self.n_params;
        self.n_params += 1;
        self.push(Op::Param(idx), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(Op::MatMul { a, b, ta, tb }, value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            (ta.rows(), ta.cols()),
            (tb.rows(), tb.cols()),
            "{op}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_same("add", a, b, |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_same("sub", a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_same("mul", a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    /// Add a `[1, c]` row to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.len(), ta.cols(), "add_row: row width {} vs {}", tr.len(), ta.cols());
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(ta.rows(), c, data);
        self.push(Op::AddRow(a, row), value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    fn unary(&mut self, u: Unary, a: Var) -> Var {
        let t = self.value(a);
        let value = match u {
            Unary::Exp => t.map(f64::exp),
            Unary::Tanh => t.map(f64::tanh),
            Unary::Relu => t.map(|x| x.max(0.0)),
            Unary::Gelu => t.map(gelu),
            Unary::Cos => t.map(f64::cos),
            Unary::Sin => t.map(f64::sin),
            Unary::Neg => t.map(|x| -x),
        };
        self.push(Op::Unary(u, a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(t.rows(), c, data);
        self.push(Op::Softmax(a), value)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.rows(), "slice_rows {start}..{end} of {}", t.rows());
        let c = t.cols();
        let value = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec());
        self.push(Op::SliceRows { a, start }, value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.cols(), "slice_cols {start}..{end} of {}", t.cols());
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::matrix(t.rows(), end - start, data);
        self.push(Op::SliceCols { a, start }, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols: row count mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data);
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows: column count mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::matrix(rows, cols, data);
        self.push(Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Row-wise layer normalization with learnable `[1, c]` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c, "layer_norm: gamma width");
        assert_eq!(b.len(), c, "layer_norm: beta width");
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::matrix(r, c, out);
        let xhat = Tensor::matrix(r, c, xhat);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, value)
    }

    /// Diagonal complex recurrence `s_{t+1} = λ ⊙ s_t + b_t` from `s_0 = 0`,
    /// returning `Re(s_t)` for `t = 0..T`.
    ///
    /// `bu_re`/`bu_im` are `[T, d]` real and imaginary input drives,
    /// `lam_re`/`lam_im` the `[1, d]` eigenvalues.
    pub fn diag_scan(&mut self, bu_re: Var, bu_im: Var, lam_re: Var, lam_im: Var) -> Var {
        let (br, bi) = (self.value(bu_re), self.value(bu_im));
        let (lr, li) = (self.value(lam_re).data(), self.value(lam_im).data());
        let (t_len, d) = (br.rows(), br.cols());
        assert_eq!((bi.rows(), bi.cols()), (t_len, d), "diag_scan: drive shapes");
        assert_eq!(lr.len(), d, "diag_scan: eigenvalue width");
        assert_eq!(li.len(), d, "diag_scan: eigenvalue width");
        let mut re = vec![0.0; t_len * d];
        let mut im = vec![0.0; t_len * d];
        for t in 1..t_len {
            let (prev, cur) = (t - 1, t);
            for j in 0..d {
                let (u, v) = (re[prev * d + j], im[prev * d + j]);
                re[cur * d + j] = lr[j] * u - li[j] * v + br.data()[prev * d + j];
                im[cur * d + j] = li[j] * u + lr[j] * v + bi.data()[prev * d + j];
            }
        }
        let value = Tensor::matrix(t_len, d, re);
        let imag = Tensor::matrix(t_len, d, im);
        self.push(Op::DiagScan { bu_re, bu_im, lam_re, lam_im, imag }, value)
    }

    /// Causal single-head attention: row `T` of the output is
    /// `Σ_{t≤T} softmax_t(q_T · k_t) v_t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let n = tq.rows();
        assert_eq!(tk.rows(), n, "causal_attention: key rows");
        assert_eq!(tv.rows(), n, "causal_attention: value rows");
        assert_eq!(tq.cols(), tk.cols(), "causal_attention: query/key width");
        let m = tv.cols();
        let mut probs = vec![0.0; n * n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let qi = tq.row(i);
            let row = &mut probs[i * n..i * n + i + 1];
            for (j, p) in row.iter_mut().enumerate() {
                *p = dot(qi, tk.row(j));
            }
            softmax_in_place(row);
            let o = &mut out[i * m..(i + 1) * m];
            for (j, &p) in row.iter().enumerate() {
                for (acc, x) in o.iter_mut().zip(tv.row(j)) {
                    *acc += p * x;
                }
            }
        }
        let value = Tensor::matrix(n, m, out);
        let probs = Tensor::matrix(n, n, probs);
        self.push(Op::CausalAttention { q, k, v, probs }, value)
    }

    /// Reverse-mode sweep from a scalar output. Returns one gradient per
    /// parameter leaf, in registration order.
    pub fn backward(&self, output: Var) -> Result<Vec<Tensor>, NumericsError> {
        if let Some(nf) = &self.non_finite {
            return Err(NumericsError::NonFinite { node: nf.node, op: nf.op, label: nf.label });
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(NumericsError::NonScalarOutput { shape: out.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.n_params];

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(idx) => param_grads[*idx] = Some(g),
                Op::Constant => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = match (ta, tb) {
                        (false, false) => matmul(&g, false, vb, true),
                        (false, true) => matmul(&g, false, vb, false),
                        (true, false) => matmul(vb, false, &g, true),
                        (true, true) => matmul(vb, true, &g, true),
                    };
                    let db = match (ta, tb) {
                        (false, false) => matmul(va, true, &g, false),
                        (false, true) => matmul(&g, true, va, false),
                        (true, false) => matmul(va, false, &g, false),
                        (true, true) => matmul(&g, true, va, true),
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for r in g.data().chunks(c) {
                        for (acc, x) in dr.iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    accumulate(&mut grads, *row, Tensor::new(shape, dr).expect("row shape"));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|x| x * s)),
                Op::Unary(u, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gi, (&xi, &yi))| {
                            gi * match u {
                                Unary::Exp => yi,
                                Unary::Tanh => 1.0 - yi * yi,
                                Unary::Relu => {
                                    if xi > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Gelu => gelu_grad(xi),
                                Unary::Cos => -xi.sin(),
                                Unary::Sin => xi.cos(),
                                Unary::Neg => -1.0,
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::matrix(x.rows(), x.cols(), data));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for ((dst, yr), gr) in
                        data.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c))
                    {
                        let s = dot(yr, gr);
                        for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - s);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(y.rows(), c, data));
                }
                Op::SliceRows { a, start } => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut full = Tensor::zeros(&[src.rows(), c]);
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, full);
                }
                Op::SliceCols { a, start } => {
                    let src = self.value(*a);
                    let mut full = Tensor::zeros(&[src.rows(), src.cols()]);
                    let w = g.cols();
                    for r in 0..src.rows() {
                        full.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let w = t.cols();
                        let mut part = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::matrix(t.rows(), w, part));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let n = t.len();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::matrix(t.rows(), t.cols(), part));
                    }
                }
                Op::Sum(a) => {
                    let t = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(&[t.rows(), t.cols()], g.item()));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let s = g.item() / t.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(&[t.rows(), t.cols()], s));
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let gam = self.value(*gamma).data();
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, hr);
                        let scale = inv_std[i] / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = scale * (c as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::matrix(r, c, dx));
                    accumulate(&mut grads, *gamma, Tensor::new(gshape, dg).expect("gamma"));
                    accumulate(&mut grads, *beta, Tensor::new(bshape, db).expect("beta"));
                }
                Op::DiagScan { bu_re, bu_im, lam_re, lam_im, imag } => {
                    let re = &node.value;
                    let (t_len, d) = (re.rows(), re.cols());
                    let (lr, li) = (self.value(*lam_re).data(), self.value(*lam_im).data());
                    let mut dbr = vec![0.0; t_len * d];
                    let mut dbi = vec![0.0; t_len * d];
                    let mut dlr = vec![0.0; d];
                    let mut dli = vec![0.0; d];
                    // adjoint of s_{t+1}, starting past the end
                    let mut a_re = vec![0.0; d];
                    let mut a_im = vec![0.0; d];
                    for t in (0..t_len).rev() {
                        for j in 0..d {
                            let (nr, ni) = (a_re[j], a_im[j]);
                            dbr[t * d + j] = nr;
                            dbi[t * d + j] = ni;
                            let (u, v) = (re.data()[t * d + j], imag.data()[t * d + j]);
                            dlr[j] += nr * u + ni * v;
                            dli[j] += -nr * v + ni * u;
                            a_re[j] = g.data()[t * d + j] + lr[j] * nr + li[j] * ni;
                            a_im[j] = -li[j] * nr + lr[j] * ni;
                        }
                    }
                    let lrs = self.value(*lam_re).shape().to_vec();
                    let lis = self.value(*lam_im).shape().to_vec();
                    accumulate(&mut grads, *bu_re, Tensor::matrix(t_len, d, dbr));
                    accumulate(&mut grads, *bu_im, Tensor::matrix(t_len, d, dbi));
                    accumulate(&mut grads, *lam_re, Tensor::new(lrs, dlr).expect("lambda"));
                    accumulate(&mut grads, *lam_im, Tensor::new(lis, dli).expect("lambda"));
                }
                Op::CausalAttention { q, k, v, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let n = tq.rows();
                    let (dk_w, m) = (tq.cols(), tv.cols());
                    let mut dq = vec![0.0; n * dk_w];
                    let mut dk = vec![0.0; n * dk_w];
                    let mut dv = vec![0.0; n * m];
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        let p = &probs.data()[i * n..i * n + i + 1];
                        let gi = g.row(i);
                        let mut s = 0.0;
                        for j in 0..=i {
                            let da = dot(gi, tv.row(j));
                            ds[j] = da;
                            s += p[j] * da;
                            let dvr = &mut dv[j * m..(j + 1) * m];
                            for (acc, x) in dvr.iter_mut().zip(gi) {
                                *acc += p[j] * x;
                            }
                        }
                        let qi = tq.row(i);
                        for j in 0..=i {
                            let dsj = p[j] * (ds[j] - s);
                            if dsj == 0.0 {
                                continue;
                            }
                            let kj = tk.row(j);
                            let dqr = &mut dq[i * dk_w..(i + 1) * dk_w];
                            for (acc, x) in dqr.iter_mut().zip(kj) {
                                *acc += dsj * x;
                            }
                            let dkr = &mut dk[j * dk_w..(j + 1) * dk_w];
                            for (acc, x) in dkr.iter_mut().zip(qi) {
                                *acc += dsj * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *q, Tensor::matrix(n, dk_w, dq));
                    accumulate(&mut grads, *k, Tensor::matrix(n, dk_w, dk));
                    accumulate(&mut grads, *v, Tensor::matrix(n, m, dv));
                }
            }
        }

        Ok(param_grads
            .into_iter()
            .enumerate()
            .map(|(idx, g)| {
                g.unwrap_or_else(|| {
                    let leaf = self
                        .nodes
                        .iter()
                        .find(|n| matches!(n.op, Op::Param(i) if i == idx))
                        .expect("param leaf");
                    Tensor::zeros(leaf.value.shape())
                })
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Build a graph over `params`, evaluate it and return the scalar value with
/// the gradient of every parameter.
pub fn evaluate_with_gradients<F>(
    params: &[Tensor],
    build: F,
) -> Result<(f64, Vec<Tensor>), NumericsError>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let out = build(&mut graph, &vars);
    let grads = graph.backward(out)?;
    Ok((graph.value(out).item(), grads))
}

/// Central finite-difference gradient of a scalar function of several tensors.
pub fn finite_difference<F>(params: &[Tensor], h: f64, f: F) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work);
            work[p].data_mut()[i] = orig - h;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
