//! Dynamic computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive appends a
//! node whose index is larger than those of its inputs, so the node vector is
//! already in topological order and [`Graph::backward`] is a single reverse
//! sweep.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which closed form of GELU to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluForm {
    /// `x * Phi(x)` with the error function.
    #[default]
    Exact,
    /// The tanh approximation.
    Tanh,
}

impl GeluForm {
    pub fn as_str(self) -> &'static str {
        match self {
            GeluForm::Exact => "exact",
            GeluForm::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" | "erf" => Ok(GeluForm::Exact),
            "tanh" => Ok(GeluForm::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown gelu form {other:?}"))),
        }
    }
}

const GELU_TANH_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_TANH_A: f64 = 0.044_715;

/// GELU value plus the auxiliary term reused by the derivative: `Phi(x)` for
/// the exact form, `tanh(u)` for the approximation.
fn gelu_forward(x: f64, form: GeluForm) -> (f64, f64) {
    match form {
        GeluForm::Exact => {
            let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
            (x * cdf, cdf)
        }
        GeluForm::Tanh => {
            let t = (GELU_TANH_C * (x + GELU_TANH_A * x * x * x)).tanh();
            (0.5 * x * (1.0 + t), t)
        }
    }
}

fn gelu_derivative(x: f64, aux: f64, form: GeluForm) -> f64 {
    match form {
        GeluForm::Exact => aux + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt(),
        GeluForm::Tanh => {
            0.5 * (1.0 + aux)
                + 0.5 * x * (1.0 - aux * aux) * GELU_TANH_C * (1.0 + 3.0 * GELU_TANH_A * x * x)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Strided general matrix multiply: `C = alpha * A * B + beta * C`.
///
/// Strides are in elements; transposes are expressed by swapping them.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs
    };
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, b_strides) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, c_strides) < c.len(), "gemm: C out of bounds");
    // SAFETY: every accessed offset of A, B and C was bounds-checked above
    // against the backing slices, and C does not alias A or B because it is
    // borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
        form: GeluForm,
        aux: Vec<f64>,
    },
    Sigmoid(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        group: usize,
    },
    PrependToken {
        x: Var,
        token: Var,
        tokens: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Bce {
        pred: Var,
        targets: Vec<f64>,
        clamp: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, with zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// A dynamically built computation graph. Not shareable across threads
/// while being built; each worker builds its own.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = self.node(v);
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    /// Adds a leaf that inherits `requires_grad` from the tensor.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "input",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "constant",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            false,
        )
    }

    /// Adds a leaf from raw parts.
    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant_raw", &shape, &[data.len()]));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    /// Stop-gradient: a copy of `x` that is a constant for backpropagation.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push("detach", shape, value, Op::Leaf, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push("transpose", vec![c, r], out, Op::Transpose(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, factor), rg)
    }

    /// `x[M×D] + tile(y[P×D])` where `P` divides `M`; `y` may be 1-D of
    /// length `D`. Covers bias addition and positional embeddings.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (m, d) = self.dims2(x, "add_broadcast")?;
        let (p, dy) = self.dims2(y, "add_broadcast")?;
        if d != dy || m % p != 0 {
            return Err(Error::shape("add_broadcast", self.shape(x), self.shape(y)));
        }
        let yv = self.value(y);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(p * d) {
            add_into(chunk, yv);
        }
        let rg = self.rg(&[x, y]);
        self.push(
            "add_broadcast",
            self.shape(x).to_vec(),
            out,
            Op::AddBroadcast(x, y),
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Layer normalisation over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Batch normalisation of a `[M × D]` matrix: every column is
    /// standardised with its own batch mean and (biased) variance, then
    /// scaled by `gamma` and shifted by `beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let [m, d] = shape[..] else {
            return Err(Error::shape("batch_norm", &shape, &[0, 0]));
        };
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut mean = vec![0.0; d];
        for row in src.chunks(d) {
            for (mu, v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; d];
        for row in src.chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / m as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            let j = i % d;
            xhat[i] = (v - mean[j]) * inv_std[j];
            out[i] = g[j] * xhat[i] + b[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var, form: GeluForm) -> Result<Var> {
        let (out, aux) = self.value(x).iter().map(|&v| gelu_forward(v, form)).unzip();
        let rg = self.rg(&[x]);
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu { x, form, aux }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push("sigmoid", self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Scales every row to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let src = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        self.push(
            "normalize_rows",
            self.shape(x).to_vec(),
            out,
            Op::NormalizeRows { x, norms },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences of `tokens` rows each. `q`, `k`, `v` are `[batch*tokens × d]`
    /// and each head attends over its own `d / heads` column block.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::shape("attention", self.shape(q), self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if batch * tokens != rows {
            return Err(Error::shape("attention", &[rows, d], &[batch, tokens]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; rows * d];
        let nn = tokens * tokens;
        for b in 0..batch {
            for h in 0..heads {
                let base = b * tokens * d + h * dh;
                let p = &mut probs[(b * heads + h) * nn..(b * heads + h + 1) * nn];
                gemm(
                    tokens,
                    dh,
                    tokens,
                    scale,
                    &qv[base..],
                    (d, 1),
                    &kv[base..],
                    (1, d),
                    0.0,
                    p,
                    (tokens, 1),
                );
                for row in p.chunks_mut(tokens) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - max).exp();
                        total += *e;
                    }
                    for e in row.iter_mut() {
                        *e /= total;
                    }
                }
                gemm(
                    tokens,
                    tokens,
                    dh,
                    1.0,
                    p,
                    (tokens, 1),
                    &vv[base..],
                    (d, 1),
                    0.0,
                    &mut out[base..],
                    (d, 1),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Mean over consecutive groups of `group` rows: `[B*group × D] -> [B × D]`.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "segment_mean")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("segment_mean", &[rows, d], &[group]));
        }
        let segs = rows / group;
        let src = self.value(x);
        let mut out = vec![0.0; segs * d];
        for s in 0..segs {
            for r in 0..group {
                let row = &src[(s * group + r) * d..(s * group + r + 1) * d];
                for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push("segment_mean", vec![segs, d], out, Op::SegmentMean { x, group }, rg)
    }

    /// Inserts `token` (length `D`) in front of each sequence of `tokens` rows.
    pub fn prepend_token(&mut self, x: Var, token: Var, tokens: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "prepend_token")?;
        if self.value(token).len() != d || tokens == 0 || rows % tokens != 0 {
            return Err(Error::shape("prepend_token", &[rows, d], self.shape(token)));
        }
        let batch = rows / tokens;
        let src = self.value(x);
        let tok = self.value(token);
        let mut out = Vec::with_capacity((rows + batch) * d);
        for b in 0..batch {
            out.extend_from_slice(tok);
            out.extend_from_slice(&src[b * tokens * d..(b + 1) * tokens * d]);
        }
        let rg = self.rg(&[x, token]);
        self.push(
            "prepend_token",
            vec![rows + batch, d],
            out,
            Op::PrependToken { x, token, tokens },
            rg,
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.dims2(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("gather_rows needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, d], &[bad]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    /// Mean binary cross-entropy between probabilities `pred` and `targets`,
    /// with predictions clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, pred: Var, targets: &[f64], clamp: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != targets.len() {
            return Err(Error::shape("bce", self.shape(pred), &[targets.len()]));
        }
        if !(0.0..0.5).contains(&clamp) {
            return Err(Error::InvalidArgument(format!("bce clamp {clamp} outside [0, 0.5)")));
        }
        let total: f64 = p
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(clamp, 1.0 - clamp);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let loss = total / p.len() as f64;
        let rg = self.rg(&[pred]);
        self.push(
            "bce",
            vec![1],
            vec![loss],
            Op::Bce {
                pred,
                targets: targets.to_vec(),
                clamp,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of each row of `logits` against a target
    /// column. Entries where `excluded[i*cols + j]` is true are dropped from
    /// the normaliser; a target must not be excluded.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: Option<&[bool]>,
    ) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        if let Some(mask) = excluded {
            if mask.len() != r * c {
                return Err(Error::shape("cross_entropy", &[r, c], &[mask.len()]));
            }
        }
        let keep = |i: usize, j: usize| excluded.is_none_or(|m| !m[i * c + j]);
        let src = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c || !keep(i, t) {
                return Err(Error::Contract(format!(
                    "cross_entropy target {t} invalid for row {i}"
                )));
            }
            let row = &src[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| keep(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..c).filter(|&j| keep(i, j)) {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            total += -(row[t] - max - z.ln());
        }
        let loss = total / r as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Every node up to `loss` is visited
    /// once; nodes that do not require gradients are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC * B^T
                    gemm(m, n, k, 1.0, gout, (n, 1), self.value(*b), (1, n), 1.0, ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = A^T * dC
                    gemm(k, m, n, 1.0, self.value(*a), (1, k), gout, (n, 1), 1.0, gb, (n, 1));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        add_into(g, gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.slot(grads, *b) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for ((g, d), x) in g.iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * f);
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, gout);
                }
                if let Some(g) = self.slot(grads, *y) {
                    let period = g.len();
                    for chunk in gout.chunks(period) {
                        add_into(g, chunk);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(g) = self.slot(grads, *x) {
                    let y = &node.value;
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..*len).map(|j| gout[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                g[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let m = (xhat.len() / d) as f64;
                let gamma_v = self.value(*gamma).to_vec();
                let mut sum_d = vec![0.0; d];
                let mut sum_dx = vec![0.0; d];
                for (i, go) in gout.iter().enumerate() {
                    let j = i % d;
                    sum_d[j] += go;
                    sum_dx[j] += go * xhat[i];
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for j in 0..d {
                        gg[j] += sum_dx[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for j in 0..d {
                        gb[j] += sum_d[j];
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, go) in gout.iter().enumerate() {
                        let j = i % d;
                        gx[i] += gamma_v[j]
                            * inv_std[j]
                            * (go - sum_d[j] / m - xhat[i] * sum_dx[j] / m);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = xhat.len() / d;
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gout[r * d + j];
                        }
                    }
                }
                let gamma_v = self.value(*gamma).to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = gout[off + j] * gamma_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[off + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[off + j] +=
                                inv_std[r] * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { x, form, aux } => {
                if let Some(g) = self.slot(grads, *x) {
                    let xv = self.value(*x);
                    for (((g, d), &v), &a) in g.iter_mut().zip(gout).zip(xv).zip(aux) {
                        *g += d * gelu_derivative(v, a, *form);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, d), y) in g.iter_mut().zip(gout).zip(&node.value) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(g) = self.slot(grads, *x) {
                    let c = node.shape[node.shape.len() - 1];
                    let y = &node.value;
                    for (i, norm) in norms.iter().enumerate() {
                        let off = i * c;
                        let dot: f64 = (0..c).map(|j| gout[off + j] * y[off + j]).sum();
                        for j in 0..c {
                            g[off + j] += (gout[off + j] - y[off + j] * dot) / norm;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => self.backprop_attention(
                gout, grads, *q, *k, *v, *batch, *tokens, *heads, probs,
            ),
            Op::SegmentMean { x, group } => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = node.shape[1];
                    let inv = 1.0 / *group as f64;
                    for (r, grow) in g.chunks_mut(d).enumerate() {
                        let s = r / group;
                        for (gv, dv) in grow.iter_mut().zip(&gout[s * d..(s + 1) * d]) {
                            *gv += dv * inv;
                        }
                    }
                }
            }
            Op::PrependToken { x, token, tokens } => {
                let d = node.shape[1];
                let span = (tokens + 1) * d;
                if let Some(g) = self.slot(grads, *x) {
                    for (b, chunk) in gout.chunks(span).enumerate() {
                        add_into(&mut g[b * tokens * d..(b + 1) * tokens * d], &chunk[d..]);
                    }
                }
                if let Some(g) = self.slot(grads, *token) {
                    for chunk in gout.chunks(span) {
                        add_into(g, &chunk[..d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(g) = self.slot(grads, *x) {
                    let d = node.shape[1];
                    for (o, &i) in rows.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gout[o * d..(o + 1) * d]);
                    }
                }
            }
            Op::Bce {
                pred,
                targets,
                clamp,
            } => {
                if let Some(g) = self.slot(grads, *pred) {
                    let p = self.value(*pred);
                    let n = p.len() as f64;
                    for i in 0..p.len() {
                        if p[i] < *clamp || p[i] > 1.0 - clamp {
                            continue;
                        }
                        let y = targets[i];
                        g[i] += gout[0] * (-y / p[i] + (1.0 - y) / (1.0 - p[i])) / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(g) = self.slot(grads, *logits) {
                    let c = self.shape(*logits)[self.shape(*logits).len() - 1];
                    let r = targets.len();
                    let scale = gout[0] / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            g[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: &[f64],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nn = tokens * tokens;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));

        if let Some(gv) = self.slot(grads, v) {
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * tokens * d + h * dh;
                    let p = &probs[(b * heads + h) * nn..(b * heads + h + 1) * nn];
                    // dV = P^T dO
                    gemm(
                        tokens,
                        tokens,
                        dh,
                        1.0,
                        p,
                        (1, tokens),
                        &gout[base..],
                        (d, 1),
                        1.0,
                        &mut gv[base..],
                        (d, 1),
                    );
                }
            }
        }

        let need_q = self.requires_grad(q);
        let need_k = self.requires_grad(k);
        if !need_q && !need_k {
            return;
        }
        // Score gradients for every (batch, head) block.
        let mut dscores = vec![0.0; probs.len()];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * tokens * d + h * dh;
                let blk = (b * heads + h) * nn..(b * heads + h + 1) * nn;
                let p = &probs[blk.clone()];
                let ds = &mut dscores[blk];
                // dP = dO V^T
                gemm(
                    tokens,
                    dh,
                    tokens,
                    1.0,
                    &gout[base..],
                    (d, 1),
                    &vv[base..],
                    (1, d),
                    0.0,
                    ds,
                    (tokens, 1),
                );
                for (prow, drow) in p.chunks(tokens).zip(ds.chunks_mut(tokens)) {
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
            }
        }
        if let Some(gq) = self.slot(grads, q) {
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * tokens * d + h * dh;
                    let ds = &dscores[(b * heads + h) * nn..(b * heads + h + 1) * nn];
                    // dQ = scale * dS K
                    gemm(
                        tokens,
                        tokens,
                        dh,
                        scale,
                        ds,
                        (tokens, 1),
                        &kv[base..],
                        (d, 1),
                        1.0,
                        &mut gq[base..],
                        (d, 1),
                    );
                }
            }
        }
        if let Some(gk) = self.slot(grads, k) {
            for b in 0..batch {
                for h in 0..heads {
                    let base = b * tokens * d + h * dh;
                    let ds = &dscores[(b * heads + h) * nn..(b * heads + h + 1) * nn];
                    // dK = scale * dS^T Q
                    gemm(
                        tokens,
                        tokens,
                        dh,
                        scale,
                        ds,
                        (1, tokens),
                        &qv[base..],
                        (d, 1),
                        1.0,
                        &mut gk[base..],
                        (d, 1),
                    );
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
