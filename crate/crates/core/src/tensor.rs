//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! Values live in [`Tensor`]. Differentiable computation happens on a
//! [`Tape`]: every op appends a node holding its output, and [`Tape::backward`]
//! walks the nodes once in reverse to accumulate gradients for every leaf that
//! was registered with `requires_grad`.
//!
//! Shapes never broadcast except for scalar scaling ([`Tape::scale`],
//! [`Tape::scale_by`]) and row-vector bias addition ([`Tape::add_row`]).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DsprError, Result};

/// Additive pre-softmax sentinel standing in for `-inf`.
///
/// After max-subtraction `exp(MASK_NEG - max)` underflows to exactly `0.0`.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(DsprError::Contract(format!(
                "tensor axes must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(DsprError::Contract("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn last(&self) -> usize {
        *self.shape.last().unwrap()
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
    Bmm { a: Var, b: Var, trans_b: bool },
    LeftMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Softmax(Var),
    Concat(Var, Var),
    Reshape(Var),
    Transpose(Var),
    IndexRows { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis0(Var),
    Mse(Var, Var),
    NodeEmbed { x: Var, w_val: Var, node: Var, pos: Var },
    WindowWeights { tau: Var, lags: Vec<f64> },
    Attention(Box<AttentionNode>),
}

#[derive(Debug)]
struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    w: Var,
    heads: usize,
    /// Attention weights `a`, laid out `[G, heads, T]`.
    probs: Vec<f64>,
    /// Unweighted normalised exponentials `r` with `a = w * r`.
    ratios: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

// ----------------------------------------------------------------------------
// dense kernels, all accumulate into `out`

/// out[m,n] += a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[r,m]^T * b[r,n]
fn mm_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    for i in 0..r {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..m {
            let a_ip = a[i * m + p];
            if a_ip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,r] * b[n,r]^T
fn mm_nt(a: &[f64], b: &[f64], m: usize, r: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * r..(i + 1) * r];
        for j in 0..n {
            let brow = &b[j * r..(j + 1) * r];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Detached leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(DsprError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(name, value, op, &[x])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(&self.value(a).data, &self.value(b).data, m, k, n, &mut out);
        self.push(
            "matmul",
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = if trans_b { "bmm_nt" } else { "bmm" };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(name, sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(name, sa, sb));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (&self.value(a).data, &self.value(b).data);
        for gi in 0..g {
            let ag = &ad[gi * m * k..(gi + 1) * m * k];
            let bg = &bd[gi * k * n..(gi + 1) * k * n];
            let og = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                mm_nt(ag, bg, m, k, n, og);
            } else {
                mm(ag, bg, m, k, n, og);
            }
        }
        self.push(
            name,
            Tensor {
                shape: vec![g, m, n],
                data: out,
            },
            Op::Bmm { a, b, trans_b },
            &[a, b],
        )
    }

    /// Batched `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `[g,m,k] x [g,n,k]^T -> [g,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    /// Shared left factor: `[m,k] x [g,k,n] -> [g,m,n]`.
    pub fn left_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sx.len() != 3 || sa[1] != sx[1] {
            return Err(shape_err("left_matmul", sa, sx));
        }
        let (m, k, g, n) = (sa[0], sa[1], sx[0], sx[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, xd) = (&self.value(a).data, &self.value(x).data);
        for gi in 0..g {
            mm(
                ad,
                &xd[gi * k * n..(gi + 1) * k * n],
                m,
                k,
                n,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        self.push(
            "left_matmul",
            Tensor {
                shape: vec![g, m, n],
                data: out,
            },
            Op::LeftMatMul(a, x),
            &[a, x],
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of `[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_row", sx, sb));
        }
        let n = sb[0];
        let (tx, tb) = (self.value(x), self.value(bias));
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies `x` by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).data[0];
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v * c).collect(),
        };
        self.push("scale_by", value, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    /// Row-wise softmax over the last axis, stabilised by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last();
        let mut data = t.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push("softmax_rows", value, Op::Softmax(x), &[x])
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", sa, sb));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (ta, tb) = (self.value(a), self.value(b));
        let rows = ta.numel() / na;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * na..(r + 1) * na]);
            data.extend_from_slice(&tb.data[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        self.push("concat_last", Tensor { shape, data }, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let r = t.shape.len();
        if r < 2 {
            return Err(shape_err("transpose_last2", &t.shape, &[2]));
        }
        let (m, n) = (t.shape[r - 2], t.shape[r - 1]);
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data.chunks(m * n).zip(data.chunks_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = t.shape.clone();
        shape.swap(r - 2, r - 1);
        self.push("transpose_last2", Tensor { shape, data }, Op::Transpose(x), &[x])
    }

    /// Selects entries of the first axis: `[R, ...] -> [idx.len(), ...]`.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape[0];
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("index_rows", &t.shape, &[idx.len()]));
        }
        let stride = t.numel() / rows;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&t.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape.clone();
        shape[0] = idx.len();
        self.push(
            "index_rows",
            Tensor { shape, data },
            Op::IndexRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Mean over the first axis: `[R, ...] -> [...]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.len() < 2 {
            return Err(shape_err("mean_axis0", &t.shape, &[2]));
        }
        let rows = t.shape[0];
        let stride = t.numel() / rows;
        let mut data = vec![0.0; stride];
        for chunk in t.data.chunks(stride) {
            for (o, &v) in data.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= rows as f64;
        }
        let shape = t.shape[1..].to_vec();
        self.push("mean_axis0", Tensor { shape, data }, Op::MeanAxis0(x), &[x])
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / ta.numel() as f64);
        self.push("mse", value, Op::Mse(a, b), &[a, b])
    }

    /// Per-node value embedding with node-identity and position offsets.
    ///
    /// `x: [R, C]` with `R = B * P`, row `r` at position `r % P`;
    /// `w_val, node: [C, D]`, `pos: [P, D]`. Output `[R, C, D]` with
    /// `out[r,c,:] = x[r,c] * w_val[c,:] + node[c,:] + pos[r % P,:]`.
    pub fn node_embed(&mut self, x: Var, w_val: Var, node: Var, pos: Var) -> Result<Var> {
        let (sx, sw, sn, sp) = (self.shape(x), self.shape(w_val), self.shape(node), self.shape(pos));
        if sx.len() != 2 || sw.len() != 2 || sw != sn || sw[0] != sx[1] || sp.len() != 2 || sp[1] != sw[1] {
            return Err(shape_err("node_embed", sx, sw));
        }
        if sx[0] % sp[0] != 0 {
            return Err(shape_err("node_embed", sx, sp));
        }
        let (r, c, d, p) = (sx[0], sx[1], sw[1], sp[0]);
        let (tx, tw, tn, tp) = (
            &self.value(x).data,
            &self.value(w_val).data,
            &self.value(node).data,
            &self.value(pos).data,
        );
        let mut data = vec![0.0; r * c * d];
        for ri in 0..r {
            let prow = &tp[(ri % p) * d..(ri % p + 1) * d];
            for ci in 0..c {
                let xv = tx[ri * c + ci];
                let out = &mut data[(ri * c + ci) * d..(ri * c + ci + 1) * d];
                let wrow = &tw[ci * d..(ci + 1) * d];
                let nrow = &tn[ci * d..(ci + 1) * d];
                for k in 0..d {
                    out[k] = xv * wrow[k] + nrow[k] + prow[k];
                }
            }
        }
        self.push(
            "node_embed",
            Tensor {
                shape: vec![r, c, d],
                data,
            },
            Op::NodeEmbed { x, w_val, node, pos },
            &[x, w_val, node, pos],
        )
    }

    /// Soft window weights `w[g,k] = clamp(tau[g] + 1 - lag[k], 0, 1)`.
    ///
    /// Negative lags (future keys) always get weight 0. At integer `tau` the
    /// support is exactly `0 <= lag <= tau`; between integers the oldest key
    /// gets the fractional part, so `w` is continuous in `tau`.
    pub fn window_weights(&mut self, tau: Var, lags: &[f64]) -> Result<Var> {
        let t = self.value(tau);
        if t.shape.len() != 1 || lags.is_empty() {
            return Err(shape_err("window_weights", &t.shape, &[lags.len()]));
        }
        let g = t.shape[0];
        let n = lags.len();
        let mut data = vec![0.0; g * n];
        for gi in 0..g {
            for (k, &lag) in lags.iter().enumerate() {
                if lag >= 0.0 {
                    data[gi * n + k] = (t.data[gi] + 1.0 - lag).clamp(0.0, 1.0);
                }
            }
        }
        self.push(
            "window_weights",
            Tensor {
                shape: vec![g, n],
                data,
            },
            Op::WindowWeights {
                tau,
                lags: lags.to_vec(),
            },
            &[tau],
        )
    }

    /// Multi-head attention of one query per group over weighted keys.
    ///
    /// `q: [G, D]`, `k, v: [G, T, D]`, `w: [G, T]` with `w >= 0`.
    /// Head `h` uses feature slice `h*D/heads..(h+1)*D/heads`;
    /// `a_t = w_t exp(s_t) / sum_j w_j exp(s_j)`, so keys with `w_t = 0`
    /// receive exactly zero attention. Output `[G, D]`.
    pub fn weighted_attention(&mut self, q: Var, k: Var, v: Var, w: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv, sw) = (self.shape(q), self.shape(k), self.shape(v), self.shape(w));
        if sq.len() != 2 || sk.len() != 3 || sk != sv || sk[0] != sq[0] || sk[2] != sq[1] {
            return Err(shape_err("weighted_attention", sq, sk));
        }
        if sw != [sk[0], sk[1]] {
            return Err(shape_err("weighted_attention", sw, &sk[..2]));
        }
        if heads == 0 || sq[1] % heads != 0 {
            return Err(DsprError::Config(format!("{heads} heads do not divide {}", sq[1])));
        }
        let (g, t, d) = (sk[0], sk[1], sk[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv, tw) = (
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
            &self.value(w).data,
        );
        if tw.iter().any(|&x| x < 0.0) {
            return Err(DsprError::Contract("attention weights must be nonnegative".into()));
        }
        let mut out = vec![0.0; g * d];
        let mut probs = vec![0.0; g * heads * t];
        let mut ratios = vec![0.0; g * heads * t];
        let mut scores = vec![0.0; t];
        for gi in 0..g {
            let wrow = &tw[gi * t..(gi + 1) * t];
            if wrow.iter().all(|&x| x == 0.0) {
                return Err(DsprError::Contract("attention row with empty window".into()));
            }
            for h in 0..heads {
                let qh = &tq[gi * d + h * dh..gi * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for ti in 0..t {
                    let kh = &tk[(gi * t + ti) * d + h * dh..(gi * t + ti) * d + (h + 1) * dh];
                    let s: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[ti] = s;
                    if wrow[ti] > 0.0 && s > max {
                        max = s;
                    }
                }
                let mut z = 0.0;
                for ti in 0..t {
                    if wrow[ti] > 0.0 {
                        z += wrow[ti] * (scores[ti] - max).exp();
                    }
                }
                let base = (gi * heads + h) * t;
                let oh = &mut out[gi * d + h * dh..gi * d + (h + 1) * dh];
                for ti in 0..t {
                    let r = (scores[ti] - max).min(700.0).exp() / z;
                    let a = wrow[ti] * r;
                    ratios[base + ti] = r;
                    probs[base + ti] = a;
                    if a != 0.0 {
                        let vh = &tv[(gi * t + ti) * d + h * dh..(gi * t + ti) * d + (h + 1) * dh];
                        for (o, &vv) in oh.iter_mut().zip(vh) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        let node = AttentionNode {
            q,
            k,
            v,
            w,
            heads,
            probs,
            ratios,
        };
        self.push(
            "weighted_attention",
            Tensor {
                shape: vec![g, d],
                data: out,
            },
            Op::Attention(Box::new(node)),
            &[q, k, v, w],
        )
    }

    /// Attention probabilities recorded by a [`Tape::weighted_attention`] node,
    /// laid out `[G, heads, T]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(n) => Some(&n.probs),
            _ => None,
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(DsprError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = (val(*a).shape[0], val(*a).shape[1], val(*b).shape[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    mm_nt(g, &val(*b).data, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    mm_tn(&val(*a).data, g, m, k, n, gb);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (gn, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let n = out.shape[2];
                let (sa, sb, so) = (m * k, k * n, m * n);
                if let Some(ga) = self.slot(grads, *a) {
                    for gi in 0..gn {
                        let (gg, bg) = (&g[gi * so..(gi + 1) * so], &tb.data[gi * sb..(gi + 1) * sb]);
                        let dst = &mut ga[gi * sa..(gi + 1) * sa];
                        if *trans_b {
                            mm(gg, bg, m, n, k, dst);
                        } else {
                            mm_nt(gg, bg, m, n, k, dst);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for gi in 0..gn {
                        let (gg, ag) = (&g[gi * so..(gi + 1) * so], &ta.data[gi * sa..(gi + 1) * sa]);
                        let dst = &mut gb[gi * sb..(gi + 1) * sb];
                        if *trans_b {
                            mm_tn(gg, ag, m, n, k, dst);
                        } else {
                            mm_tn(ag, gg, m, k, n, dst);
                        }
                    }
                }
            }
            Op::LeftMatMul(a, x) => {
                let (ta, tx) = (val(*a), val(*x));
                let (m, k, gn, n) = (ta.shape[0], ta.shape[1], tx.shape[0], tx.shape[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for gi in 0..gn {
                        mm_tn(
                            &ta.data,
                            &g[gi * m * n..(gi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gx[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    for gi in 0..gn {
                        mm_nt(
                            &g[gi * m * n..(gi + 1) * m * n],
                            &tx.data[gi * k * n..(gi + 1) * k * n],
                            m,
                            n,
                            k,
                            ga,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * tb.data[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ta.data[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s).data[0];
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += g.iter().zip(&val(*x).data).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        let y = out.data[i];
                        gx[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let tx = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        if tx.data[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        let y = out.data[i];
                        gx[i] += g[i] * (1.0 - y * y);
                    }
                }
            }
            Op::Square(x) => {
                let tx = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * tx.data[i] * g[i];
                    }
                }
            }
            Op::Abs(x) => {
                let tx = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * tx.data[i].signum() * f64::from(tx.data[i] != 0.0);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.last();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((yr, gr), dst) in out.data.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (na, nb) = (val(*a).last(), val(*b).last());
                let rows = out.numel() / (na + nb);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        for j in 0..na {
                            ga[r * na + j] += g[r * (na + nb) + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..rows {
                        for j in 0..nb {
                            gb[r * nb + j] += g[r * (na + nb) + na + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let r = out.shape.len();
                // out is [.., n, m]; input is [.., m, n]
                let (n, m) = (out.shape[r - 2], out.shape[r - 1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for (src, dst) in g.chunks(m * n).zip(gx.chunks_mut(m * n)) {
                        for i in 0..m {
                            for j in 0..n {
                                dst[i * n + j] += src[j * m + i];
                            }
                        }
                    }
                }
            }
            Op::IndexRows { x, idx } => {
                let stride = out.numel() / idx.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..stride {
                            gx[i * stride + j] += g[o * stride + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let c = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += c);
                }
            }
            Op::MeanAxis0(x) => {
                let rows = val(*x).shape[0];
                let stride = out.numel();
                if let Some(gx) = self.slot(grads, *x) {
                    for chunk in gx.chunks_mut(stride) {
                        for (o, &v) in chunk.iter_mut().zip(g) {
                            *o += v / rows as f64;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / ta.numel() as f64;
                let diff = ta.data.iter().zip(&tb.data).map(|(x, y)| c * (x - y));
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(diff.clone()).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(diff).for_each(|(o, d)| *o -= d);
                }
            }
            Op::NodeEmbed { x, w_val, node, pos } => {
                let (tx, tw) = (val(*x), val(*w_val));
                let (r, c, d, p) = (tx.shape[0], tx.shape[1], tw.shape[1], val(*pos).shape[0]);
                if let Some(gx) = self.slot(grads, *x) {
                    for ri in 0..r {
                        for ci in 0..c {
                            let go = &g[(ri * c + ci) * d..(ri * c + ci + 1) * d];
                            gx[ri * c + ci] += go
                                .iter()
                                .zip(&tw.data[ci * d..(ci + 1) * d])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w_val) {
                    for ri in 0..r {
                        for ci in 0..c {
                            let xv = tx.data[ri * c + ci];
                            let go = &g[(ri * c + ci) * d..(ri * c + ci + 1) * d];
                            for k in 0..d {
                                gw[ci * d + k] += xv * go[k];
                            }
                        }
                    }
                }
                if let Some(gn) = self.slot(grads, *node) {
                    for ri in 0..r {
                        for ci in 0..c {
                            let go = &g[(ri * c + ci) * d..(ri * c + ci + 1) * d];
                            for k in 0..d {
                                gn[ci * d + k] += go[k];
                            }
                        }
                    }
                }
                if let Some(gp) = self.slot(grads, *pos) {
                    for ri in 0..r {
                        let pi = ri % p;
                        for ci in 0..c {
                            let go = &g[(ri * c + ci) * d..(ri * c + ci + 1) * d];
                            for k in 0..d {
                                gp[pi * d + k] += go[k];
                            }
                        }
                    }
                }
            }
            Op::WindowWeights { tau, lags } => {
                let tt = val(*tau);
                let n = lags.len();
                if let Some(gt) = self.slot(grads, *tau) {
                    for (gi, gtau) in gt.iter_mut().enumerate() {
                        for (k, &lag) in lags.iter().enumerate() {
                            let z = tt.data[gi] + 1.0 - lag;
                            if lag >= 0.0 && z > 0.0 && z < 1.0 {
                                *gtau += g[gi * n + k];
                            }
                        }
                    }
                }
            }
            Op::Attention(att) => self.backprop_attention(att, g, grads),
        }
    }

    fn backprop_attention(&self, att: &AttentionNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (tq, tk, tv) = (val(att.q), val(att.k), val(att.v));
        let (gn, t, d) = (tk.shape[0], tk.shape[1], tk.shape[2]);
        let heads = att.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; gn * d];
        let mut dk = vec![0.0; gn * t * d];
        let mut dv = vec![0.0; gn * t * d];
        let mut dw = vec![0.0; gn * t];
        let mut da = vec![0.0; t];
        for gi in 0..gn {
            for h in 0..heads {
                let base = (gi * heads + h) * t;
                let go = &g[gi * d + h * dh..gi * d + (h + 1) * dh];
                let mut c = 0.0;
                for (ti, dai) in da.iter_mut().enumerate() {
                    let vh = &tv.data[(gi * t + ti) * d + h * dh..(gi * t + ti) * d + (h + 1) * dh];
                    *dai = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                    c += att.probs[base + ti] * *dai;
                }
                let qh = &tq.data[gi * d + h * dh..gi * d + (h + 1) * dh];
                for ti in 0..t {
                    let a = att.probs[base + ti];
                    let off = (gi * t + ti) * d + h * dh;
                    if a != 0.0 {
                        for j in 0..dh {
                            dv[off + j] += a * go[j];
                        }
                        let ds = a * (da[ti] - c) * scale;
                        let kh = &tk.data[off..off + dh];
                        for j in 0..dh {
                            dq[gi * d + h * dh + j] += ds * kh[j];
                            dk[off + j] += ds * qh[j];
                        }
                    }
                    dw[gi * t + ti] += att.ratios[base + ti] * (da[ti] - c);
                }
            }
        }
        for (var, src) in [(att.q, dq), (att.k, dk), (att.v, dv), (att.w, dw)] {
            if let Some(dst) = self.slot(grads, var) {
                dst.iter_mut().zip(&src).for_each(|(o, &x)| *o += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2], vec![4.0, 2.5]]).unwrap());
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_sentinel_gives_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.5, MASK_NEG, 2.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, -3.0, 3.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(tape.concat_last(a, bad).is_err());
    }

    #[test]
    fn no_broadcast_on_add() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn linear_loss_grad_is_outer_structure() {
        // loss = sum(W x); dW[i,j] = x[j] for every row i.
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(y), Err(DsprError::Contract(_))));
    }

    #[test]
    fn window_weights_support() {
        let mut tape = Tape::new();
        let tau = tape.constant(Tensor::new(vec![2], vec![1.0, 2.5]).unwrap());
        let lags = [-1.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        let w = tape.window_weights(tau, &lags).unwrap();
        assert_eq!(&tape.value(w).data()[..6], &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&tape.value(w).data()[6..], &[0.0, 1.0, 1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn attention_ignores_zero_weight_keys() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 3, 2], vec![5.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 3, 2], vec![100.0, 100.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.0]).unwrap());
        let o = tape.weighted_attention(q, k, v, w, 1).unwrap();
        let probs = tape.attention_probs(o).unwrap();
        assert_eq!(probs[0], 0.0);
        assert!((tape.value(o).data()[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(o).data()[1] - 2.0).abs() < 1e-12);
    }
}
