//! Dense tensors and a tape for reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation pushes a node
//! holding its forward value and whatever it needs for the backward rule, and
//! hands back a [`Var`] handle. Because inputs always precede outputs in the
//! arena, walking the nodes in reverse index order is a valid reverse
//! topological order, so [`Tape::backward`] visits every node exactly once.
//!
//! All arithmetic is carried out in `f64`. Model parameters are kept
//! representable in `f32` by the trainer (see [`Tensor::round_to_f32`]) so the
//! checkpoint format can store them losslessly.

mod gemm;
pub mod gradcheck;

use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("shape", format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                context: format!("tensor of shape {shape:?}"),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows", "ragged rows"));
        }
        Self::new(vec![n, d], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Rounds every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = f64::from(*v as f32);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Powf(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dropout(Var, Vec<f64>),
    Pick(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    Elementwise(Var, Vec<f64>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Non-finite outputs are reported as errors in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("op {name}"),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`]. Nodes unreachable
    /// from the root yield zeros.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(name, out, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let bd = self.value(b).data();
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(ad.len());
        for row in ad.chunks_exact(bd.len().max(1)) {
            out.extend(row.iter().zip(bd).map(|(x, y)| x + y));
        }
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor { shape, data: out }, Op::Add(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor { shape, data: out }, op, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        // value and derivative share one tanh evaluation
        let src = self.value(x).data();
        let (mut out, mut deriv) = (Vec::with_capacity(src.len()), Vec::with_capacity(src.len()));
        for &v in src {
            let (y, dy) = gelu_with_grad(v);
            out.push(y);
            deriv.push(dy);
        }
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor { shape, data: out }, Op::Elementwise(x, deriv), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.map("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// Custom elementwise map `f` with derivative `df`.
    pub fn elementwise(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let deriv = self.value(x).data().iter().map(|&v| df(v)).collect();
        self.map("elementwise", x, f, Op::Elementwise(x, deriv))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        let mut out = src.data.clone();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = src.shape.clone();
        self.push("softmax", Tensor { shape, data: out }, Op::Softmax(x), &[x])
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        let mut out = src.data.clone();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // ln(sum) is formed with the max term split off, so a dominant
            // logit keeps full relative precision in the tail
            let rest: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>() - 1.0;
            let log_norm = rest.ln_1p();
            row.iter_mut().for_each(|v| *v = (*v - m) - log_norm);
        }
        let shape = src.shape.clone();
        self.push("log_softmax", Tensor { shape, data: out }, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.rows();
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                normalized[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = src.shape.clone();
        self.push(
            "layer_norm",
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat input list"))?;
        let rows = self.value(first).rows();
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_lastdim",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
        }
        let width: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        self.push("concat_lastdim", Tensor { shape, data: out }, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("reduce_mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("rate", format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() >= rate { keep_scale } else { 0.0 })
            .collect();
        let src = self.value(x);
        let out = src.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = src.shape.clone();
        self.push("dropout", Tensor { shape, data: out }, Op::Dropout(x, mask), &[x])
    }

    /// Selects one entry per row: `[rows, C] -> [rows]`.
    pub fn pick_lastdim(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if indices.len() != src.rows() {
            return Err(Error::Shape {
                op: "pick_lastdim",
                left: src.shape.clone(),
                right: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::invalid("indices", format!("index {bad} out of range for {d} columns")));
        }
        let out = indices.iter().enumerate().map(|(r, &i)| src.data[r * d + i]).collect();
        let n = indices.len();
        self.push("pick_lastdim", Tensor { shape: vec![n], data: out }, Op::Pick(x, indices.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: src.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), src.data.clone())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d]` with rows grouped by sequence;
    /// `d` must be divisible by `heads`. Output has the same shape as `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 || seq_len == 0 || shape[0] % seq_len != 0 {
            return Err(Error::invalid(
                "attention",
                format!("shape {shape:?} incompatible with {heads} heads and sequence length {seq_len}"),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let batches = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batches * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..batches {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let qi = (b * seq_len + i) * d + col;
                    let p = &mut probs[((b * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    for j in 0..seq_len {
                        let kj = (b * seq_len + j) * d + col;
                        p[j] = (0..dh).map(|c| qd[qi + c] * kd[kj + c]).sum::<f64>() * scale;
                    }
                    softmax_in_place(p);
                    for j in 0..seq_len {
                        let vj = (b * seq_len + j) * d + col;
                        for c in 0..dh {
                            out[qi + c] += p[j] * vd[vj + c];
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor { shape, data: out },
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Back-propagates from a scalar root, replacing any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(
                "root",
                format!("backward needs a scalar root, got shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| gemm::gemm_acc(m, n, k, g, false, val(*b), true, ga));
                acc(*b, &mut |gb| gemm::gemm_acc(k, m, n, val(*a), true, g, false, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let period = gb.len().max(1);
                    for row in g.chunks_exact(period) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((s, gi), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *s += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((s, gi), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *s += gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((s, gi), &xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    if xi > 0.0 {
                        *s += gi;
                    }
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((s, gi), yi) in gx.iter_mut().zip(g).zip(out) {
                    *s += gi * yi;
                }
            }),
            Op::Log(x) => acc(*x, &mut |gx| {
                for ((s, gi), xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *s += gi / xi;
                }
            }),
            Op::Softplus(x) => acc(*x, &mut |gx| {
                for ((s, gi), &xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *s += gi * sigmoid(xi);
                }
            }),
            Op::Powf(x, p) => acc(*x, &mut |gx| {
                for ((s, gi), &xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    let d = if xi == 0.0 {
                        if *p == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p * xi.powf(p - 1.0)
                    };
                    *s += gi * d;
                }
            }),
            Op::Elementwise(x, deriv) => acc(*x, &mut |gx| {
                for ((s, gi), di) in gx.iter_mut().zip(g).zip(deriv) {
                    *s += gi * di;
                }
            }),
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), sr) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((gr, yr), sr) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            sr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                acc(*x, &mut |gx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &normalized[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += inv / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, (gi, hi)) in g.iter().zip(normalized).enumerate() {
                        gg[i % d] += gi * hi;
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                });
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * width + offset..r * width + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for ((s, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *s += gi * m;
                }
            }),
            Op::Pick(x, indices) => {
                let d = self.nodes[x.0].value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        gx[r * d + i] += g[r];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (heads, seq_len) = (*heads, *seq_len);
                let d = node.value.last_dim();
                let dh = d / heads;
                let batches = node.value.rows() / seq_len;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                // dS over all (batch, head, i, j), from dO and V.
                let mut dscore = vec![0.0; probs.len()];
                for b in 0..batches {
                    for h in 0..heads {
                        let col = h * dh;
                        for i in 0..seq_len {
                            let base = ((b * heads + h) * seq_len + i) * seq_len;
                            let p = &probs[base..base + seq_len];
                            let oi = (b * seq_len + i) * d + col;
                            let dp: Vec<f64> = (0..seq_len)
                                .map(|j| {
                                    let vj = (b * seq_len + j) * d + col;
                                    (0..dh).map(|c| g[oi + c] * vd[vj + c]).sum()
                                })
                                .collect();
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..seq_len {
                                dscore[base + j] = p[j] * (dp[j] - dot) * scale;
                            }
                        }
                    }
                }
                let each = |f: &mut dyn FnMut(usize, usize, usize, usize, usize)| {
                    for b in 0..batches {
                        for h in 0..heads {
                            for i in 0..seq_len {
                                for j in 0..seq_len {
                                    f(b, h, i, j, ((b * heads + h) * seq_len + i) * seq_len + j);
                                }
                            }
                        }
                    }
                };
                acc(*v, &mut |gv| {
                    each(&mut |b, h, i, j, pij| {
                        let (oi, vj) = ((b * seq_len + i) * d + h * dh, (b * seq_len + j) * d + h * dh);
                        for c in 0..dh {
                            gv[vj + c] += probs[pij] * g[oi + c];
                        }
                    })
                });
                acc(*q, &mut |gq| {
                    each(&mut |b, h, i, j, pij| {
                        let (qi, kj) = ((b * seq_len + i) * d + h * dh, (b * seq_len + j) * d + h * dh);
                        for c in 0..dh {
                            gq[qi + c] += dscore[pij] * kd[kj + c];
                        }
                    })
                });
                acc(*k, &mut |gk| {
                    each(&mut |b, h, i, j, pij| {
                        let (qi, kj) = ((b * seq_len + i) * d + h * dh, (b * seq_len + j) * d + h * dh);
                        for c in 0..dh {
                            gk[kj + c] += dscore[pij] * qd[qi + c];
                        }
                    })
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn gelu(x: f64) -> f64 {
    gelu_with_grad(x).0
}


pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    (value, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
