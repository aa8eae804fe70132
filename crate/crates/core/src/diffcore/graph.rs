//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulating adjoints in a
//! fixed order, so gradients are as reproducible as the forward pass.
//! Operations that the models need as a unit (attention, normalization,
//! losses) are recorded as fused nodes with hand-written adjoints.

use std::cell::RefCell;
use std::rc::Rc;

use super::rope::rope_heads;
use super::tensor::{dot, log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimensions of the fused latent-attention kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionDims {
    pub heads: usize,
    pub nope_dim: usize,
    pub rope_dim: usize,
    pub value_dim: usize,
    /// Rows per sequence; rows of the batch are `[seq0; seq1; ...]`.
    pub seq_len: usize,
}

impl AttentionDims {
    pub fn scale(&self) -> f64 {
        1.0 / ((self.nope_dim + self.rope_dim) as f64).sqrt()
    }
}

#[derive(Debug)]
struct AttentionSaved {
    qc: Var,
    qr: Var,
    kc: Var,
    kr: Var,
    v: Var,
    dims: AttentionDims,
    /// `[batch, head, t, s]` attention weights, zero above the diagonal.
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    RowSum(Var),
    Recip(Var),
    Silu(Var),
    SumAll(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Rope { x: Var, positions: Rc<Vec<f64>>, base: f64, head_dim: usize },
    SoftmaxRows(Var),
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { src: Var, idx: Vec<usize> },
    Pick { x: Var, pairs: Vec<(usize, usize)> },
    WeightedSum { x: Var, weights: Tensor },
    HiddenZLoss { z: Var, coeff: f64, lse: Vec<f64>, soft: Tensor },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub const RMS_NORM_EPS: f64 = 1e-6;

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), self.rg(&[a]))
    }

    /// `x[i, j] · c[i]` for `x: [n, d]`, `c: [n, 1]`.
    pub fn mul_col(&self, x: Var, c: Var) -> Result<Var> {
        let xv = self.value(x);
        let cv = self.value(c);
        if cv.len() != xv.rows() {
            return Err(Error::Dimension(format!("mul_col: {} column entries for {} rows", cv.len(), xv.rows())));
        }
        let mut out = (*xv).clone();
        let cols = xv.cols();
        for (row, &s) in out.data_mut().chunks_mut(cols).zip(cv.data()) {
            for v in row {
                *v *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(x, c), self.rg(&[x, c])))
    }

    /// Row sums `[n, d] -> [n, 1]`.
    pub fn row_sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().chunks(xv.cols()).map(|r| r.iter().fold(0.0, |a, &b| a + b)).collect();
        let n = data.len();
        let out = Tensor::new(vec![n, 1], data).expect("row sums");
        self.push(out, Op::RowSum(x), self.rg(&[x]))
    }

    pub fn recip(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        self.push(out, Op::Recip(x), self.rg(&[x]))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(out, Op::Silu(x), self.rg(&[x]))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), self.rg(&[x]))
    }

    /// Parameter-free RMS normalization over the last dimension.
    pub fn rms_norm(&self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = (*xv).clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let ms = row.iter().fold(0.0, |a, &b| a + b * b) / cols as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_rms.push(inv);
        }
        self.push(out, Op::RmsNorm { x, inv_rms }, self.rg(&[x]))
    }

    /// Per-head rotary embedding with explicit per-row positions.
    pub fn rope(&self, x: Var, positions: Rc<Vec<f64>>, base: f64, head_dim: usize) -> Result<Var> {
        let out = rope_heads(&self.value(x), &positions, base, head_dim, false)?;
        Ok(self.push(out, Op::Rope { x, positions, base, head_dim }, self.rg(&[x])))
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x), self.rg(&[x]))
    }

    /// Causal multi-head attention with split content/rotary parts.
    ///
    /// Head `h` scores `(qc_h·kc_h + qr_h·kr) / sqrt(nope + rope)`; the rotary
    /// key `kr` is shared by all heads.
    pub fn latent_attention(&self, qc: Var, qr: Var, kc: Var, kr: Var, v: Var, dims: AttentionDims) -> Result<Var> {
        let (qcv, qrv, kcv, krv, vv) = (self.value(qc), self.value(qr), self.value(kc), self.value(kr), self.value(v));
        let rows = qcv.rows();
        let AttentionDims { heads, nope_dim, rope_dim, value_dim, seq_len } = dims;
        let expect = |t: &Tensor, c: usize, name: &str| -> Result<()> {
            if t.rows() != rows || t.cols() != c {
                return Err(Error::Dimension(format!("attention {name}: expected [{rows}, {c}], got {:?}", t.shape())));
            }
            Ok(())
        };
        expect(&qcv, heads * nope_dim, "q content")?;
        expect(&qrv, heads * rope_dim, "q rotary")?;
        expect(&kcv, heads * nope_dim, "k content")?;
        expect(&krv, rope_dim, "k rotary")?;
        expect(&vv, heads * value_dim, "value")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Dimension(format!("{rows} rows is not a multiple of seq_len {seq_len}")));
        }
        let batch = rows / seq_len;
        let scale = dims.scale();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * heads * value_dim];
        let mut scores = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq_len {
                    let rt = b * seq_len + t;
                    let qc_t = &qcv.row(rt)[h * nope_dim..(h + 1) * nope_dim];
                    let qr_t = &qrv.row(rt)[h * rope_dim..(h + 1) * rope_dim];
                    for (s, sc) in scores[..=t].iter_mut().enumerate() {
                        let rs = b * seq_len + s;
                        let kc_s = &kcv.row(rs)[h * nope_dim..(h + 1) * nope_dim];
                        *sc = scale * (dot(qc_t, kc_s) + dot(qr_t, krv.row(rs)));
                    }
                    softmax_in_place(&mut scores[..=t]);
                    let pbase = ((b * heads + h) * seq_len + t) * seq_len;
                    probs[pbase..pbase + t + 1].copy_from_slice(&scores[..=t]);
                    let o = &mut out[(rt * heads + h) * value_dim..(rt * heads + h + 1) * value_dim];
                    for (s, &p) in scores[..=t].iter().enumerate() {
                        let v_s = &vv.row(b * seq_len + s)[h * value_dim..(h + 1) * value_dim];
                        for (oo, &vs) in o.iter_mut().zip(v_s) {
                            *oo += p * vs;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, heads * value_dim], out)?;
        let rg = self.rg(&[qc, qr, kc, kr, v]);
        Ok(self.push(out, Op::Attention(Box::new(AttentionSaved { qc, qr, kc, kr, v, dims, probs })), rg))
    }

    /// Mean token cross-entropy of `logits: [n, V]` against `targets`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Dimension(format!("target {bad} outside vocabulary {vocab}")));
        }
        let mut probs = (*lv).clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, self.rg(&[logits])))
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Dimension(format!("row {i} out of {}", xv.rows())));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, self.rg(&[x])))
    }

    /// `out[idx[i]] += src[i]` into `n` zero rows.
    pub fn scatter_rows(&self, src: Var, idx: &[usize], n: usize) -> Result<Var> {
        let sv = self.value(src);
        if sv.rows() != idx.len() {
            return Err(Error::Dimension("scatter_rows index count mismatch".into()));
        }
        let cols = sv.cols();
        let mut out = Tensor::zeros(&[n, cols]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Dimension(format!("scatter row {i} out of {n}")));
            }
            for (o, &s) in out.row_mut(i).iter_mut().zip(sv.row(r)) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::ScatterRows { src, idx: idx.to_vec() }, self.rg(&[src])))
    }

    /// Column vector `[m, 1]` of `x[r, c]` for each `(r, c)`.
    pub fn pick(&self, x: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(pairs.len());
        for &(r, c) in pairs {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(Error::Dimension(format!("pick ({r}, {c}) out of {:?}", xv.shape())));
            }
            data.push(xv.at(r, c));
        }
        let out = Tensor::new(vec![pairs.len(), 1], data)?;
        Ok(self.push(out, Op::Pick { x, pairs: pairs.to_vec() }, self.rg(&[x])))
    }

    /// Scalar `Σ w ⊙ x` with constant weights.
    pub fn weighted_sum(&self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::Dimension("weighted_sum shape mismatch".into()));
        }
        let out = Tensor::scalar(dot(xv.data(), weights.data()));
        Ok(self.push(out, Op::WeightedSum { x, weights }, self.rg(&[x])))
    }

    /// `coeff / T · Σ_t (log Σ_i exp |z_t,i|)²` over rows of `z: [T, d]`.
    pub fn hidden_z_loss(&self, z: Var, coeff: f64) -> Var {
        let zv = self.value(z);
        let rows = zv.rows();
        let mut soft = zv.map(f64::abs);
        let mut lse = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let l = log_sum_exp(soft.row(r));
            total += l * l;
            lse.push(l);
            softmax_in_place(soft.row_mut(r));
        }
        let out = Tensor::scalar(coeff * total / rows as f64);
        self.push(out, Op::HiddenZLoss { z, coeff, lse, soft }, self.rg(&[z]))
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        Ok(self.push(out, Op::SliceRows { x, start }, self.rg(&[x])))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be a scalar, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, delta: Tensor) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let need = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, g.matmul_nt(val(*b))?)?;
            }
            if need(*b) {
                accumulate(grads, nodes, *b, val(*a).matmul_tn(g)?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone())?;
            accumulate(grads, nodes, *b, g.scale(-1.0))?;
        }
        Op::Mul(a, b) => {
            if need(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y)?)?;
            }
            if need(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y)?)?;
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s))?,
        Op::MulCol(x, c) => {
            let xv = val(*x);
            let cv = val(*c);
            let cols = xv.cols();
            if need(*x) {
                let mut dx = g.clone();
                for (row, &s) in dx.data_mut().chunks_mut(cols).zip(cv.data()) {
                    for v in row {
                        *v *= s;
                    }
                }
                accumulate(grads, nodes, *x, dx)?;
            }
            if need(*c) {
                let data: Vec<f64> =
                    g.data().chunks(cols).zip(xv.data().chunks(cols)).map(|(a, b)| dot(a, b)).collect();
                accumulate(grads, nodes, *c, Tensor::new(cv.shape().to_vec(), data)?)?;
            }
        }
        Op::RowSum(x) => {
            let xv = val(*x);
            let cols = xv.cols();
            let mut dx = Tensor::zeros(xv.shape());
            for (row, &s) in dx.data_mut().chunks_mut(cols).zip(g.data()) {
                row.fill(s);
            }
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::Recip(x) => {
            let y = &node.value;
            let dx = g.zip_map(y, |gg, yy| -gg * yy * yy)?;
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::Silu(x) => {
            let dx = g.zip_map(val(*x), |gg, v| {
                let s = 1.0 / (1.0 + (-v).exp());
                gg * s * (1.0 + v * (1.0 - s))
            })?;
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::SumAll(x) => {
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), g.item()))?;
        }
        Op::RmsNorm { x, inv_rms } => {
            let y = &node.value;
            let cols = y.cols();
            let mut dx = g.clone();
            for (r, &inv) in inv_rms.iter().enumerate() {
                let yr = y.row(r);
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let m = dot(gr, yr) / cols as f64;
                for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = (gr[j] - yr[j] * m) * inv;
                }
            }
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::Rope { x, positions, base, head_dim } => {
            let dx = rope_heads(g, positions, *base, *head_dim, true)?;
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let cols = y.cols();
            let mut dx = g.clone();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let s = dot(&g.data()[r * cols..(r + 1) * cols], yr);
                for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = yr[j] * (*d - s);
                }
            }
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::Attention(saved) => attention_backward(nodes, saved, g, grads)?,
        Op::CrossEntropy { logits, targets, probs } => {
            let n = targets.len() as f64;
            let scale = g.item() / n;
            let mut dl = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let row = dl.row_mut(r);
                row[t] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            accumulate(grads, nodes, *logits, dl)?;
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let mut dx = Tensor::zeros(xv.shape());
            for (r, &i) in idx.iter().enumerate() {
                for (d, &gg) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *d += gg;
                }
            }
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::ScatterRows { src, idx } => {
            let sv = val(*src);
            let cols = sv.cols();
            let mut data = Vec::with_capacity(sv.len());
            for &i in idx {
                data.extend_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *src, Tensor::new(vec![idx.len(), cols], data)?)?;
        }
        Op::Pick { x, pairs } => {
            let xv = val(*x);
            let cols = xv.cols();
            let mut dx = Tensor::zeros(xv.shape());
            for (k, &(r, c)) in pairs.iter().enumerate() {
                dx.data_mut()[r * cols + c] += g.data()[k];
            }
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::WeightedSum { x, weights } => {
            accumulate(grads, nodes, *x, weights.scale(g.item()))?;
        }
        Op::HiddenZLoss { z, coeff, lse, soft } => {
            let zv = val(*z);
            let rows = zv.rows();
            let cols = zv.cols();
            let mut dz = soft.clone();
            for (r, &l) in lse.iter().enumerate() {
                let k = g.item() * coeff * 2.0 * l / rows as f64;
                for (j, d) in dz.row_mut(r).iter_mut().enumerate() {
                    let zz = zv.data()[r * cols + j];
                    *d *= k * zz.signum() * f64::from(u8::from(zz != 0.0));
                }
            }
            accumulate(grads, nodes, *z, dz)?;
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let cols = xv.cols();
            let mut dx = Tensor::zeros(xv.shape());
            dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *x, dx)?;
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let n = pv.len();
                let part = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                offset += n;
                accumulate(grads, nodes, p, part)?;
            }
        }
    }
    Ok(())
}

fn attention_backward(nodes: &[Node], saved: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let AttentionSaved { qc, qr, kc, kr, v, dims, probs } = saved;
    let AttentionDims { heads, nope_dim, rope_dim, value_dim, seq_len } = *dims;
    let (qcv, qrv, kcv, krv, vv) =
        (&nodes[qc.0].value, &nodes[qr.0].value, &nodes[kc.0].value, &nodes[kr.0].value, &nodes[v.0].value);
    let rows = qcv.rows();
    let batch = rows / seq_len;
    let scale = dims.scale();
    let mut dqc = Tensor::zeros(qcv.shape());
    let mut dqr = Tensor::zeros(qrv.shape());
    let mut dkc = Tensor::zeros(kcv.shape());
    let mut dkr = Tensor::zeros(krv.shape());
    let mut dv = Tensor::zeros(vv.shape());
    let mut dp = vec![0.0; seq_len];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq_len {
                let rt = b * seq_len + t;
                let pbase = ((b * heads + h) * seq_len + t) * seq_len;
                let p = &probs[pbase..pbase + t + 1];
                let go = &g.row(rt)[h * value_dim..(h + 1) * value_dim];
                for s in 0..=t {
                    let rs = b * seq_len + s;
                    let v_s = &vv.row(rs)[h * value_dim..(h + 1) * value_dim];
                    dp[s] = dot(go, v_s);
                    for (d, &gg) in dv.row_mut(rs)[h * value_dim..(h + 1) * value_dim].iter_mut().zip(go) {
                        *d += p[s] * gg;
                    }
                }
                let sum = dot(&dp[..=t], p);
                let qc_t = &qcv.row(rt)[h * nope_dim..(h + 1) * nope_dim];
                let qr_t = &qrv.row(rt)[h * rope_dim..(h + 1) * rope_dim];
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rs = b * seq_len + s;
                    let kc_s = &kcv.row(rs)[h * nope_dim..(h + 1) * nope_dim];
                    let kr_s = krv.row(rs);
                    for (d, &k) in dqc.row_mut(rt)[h * nope_dim..(h + 1) * nope_dim].iter_mut().zip(kc_s) {
                        *d += ds * k;
                    }
                    for (d, &q) in dkc.row_mut(rs)[h * nope_dim..(h + 1) * nope_dim].iter_mut().zip(qc_t) {
                        *d += ds * q;
                    }
                    for (d, &k) in dqr.row_mut(rt)[h * rope_dim..(h + 1) * rope_dim].iter_mut().zip(kr_s) {
                        *d += ds * k;
                    }
                    for (d, &q) in dkr.row_mut(rs).iter_mut().zip(qr_t) {
                        *d += ds * q;
                    }
                }
            }
        }
    }
    accumulate(grads, nodes, *qc, dqc)?;
    accumulate(grads, nodes, *qr, dqr)?;
    accumulate(grads, nodes, *kc, dkc)?;
    accumulate(grads, nodes, *kr, dkr)?;
    accumulate(grads, nodes, *v, dv)?;
    Ok(())
}
