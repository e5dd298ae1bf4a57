//! Reverse-mode differentiation over the matrix op set.
//!
//! A [`Tape`] is an append-only list of nodes. Every node caches its forward
//! value, so [`Tape::backward`] only needs the op kind and its operands.

use super::ops::{self, dot, row_moments};
use super::{LinearMap, Matrix, MultiHeadParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + 1 · row`
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// `a ⊙ (1 · row)`
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `s[idx] · a` where `s` is another node.
    ScaleByEntry {
        a: NodeId,
        s: NodeId,
        idx: usize,
    },
    /// Masked columns are exact zeros in the cached output, which zeroes
    /// their gradient as well.
    Softmax(NodeId),
    LayerNorm(NodeId, f64),
    MeanRows(NodeId),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation graph with cached forward values.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    /// Zero gradients shaped like every node of `tape`.
    pub fn zeros_like(tape: &Tape) -> Self {
        Self {
            grads: tape
                .nodes
                .iter()
                .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Matrix> {
        self.grads
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape("mul_row", av.shape(), rv.shape()));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_by_entry(&mut self, a: NodeId, s: NodeId, idx: usize) -> Result<NodeId> {
        let sv = self.value(s);
        if idx >= sv.len() {
            return Err(Error::Usage(format!(
                "entry {idx} out of range for {:?} scale node",
                sv.shape()
            )));
        }
        let c = sv.as_slice()[idx];
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::ScaleByEntry { a, s, idx }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = ops::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn softmax_rows_masked(&mut self, a: NodeId, keep: &[bool]) -> Result<NodeId> {
        if keep.len() != self.value(a).cols() {
            return Err(Error::shape("softmax mask", self.value(a).shape(), (1, keep.len())));
        }
        let v = ops::softmax_rows_masked(self.value(a), Some(keep));
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let v = ops::layer_norm(self.value(a), eps);
        self.push(v, Op::LayerNorm(a, eps))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).rows() == 0 {
            return Err(Error::Usage("mean over zero rows".into()));
        }
        let v = self.value(a).mean_rows();
        Ok(self.push(v, Op::MeanRows(a)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape("slice_cols", av.shape(), (start, len)));
        }
        let mut v = Matrix::zeros(av.rows(), len);
        for i in 0..av.rows() {
            v.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape("concat_cols", (rows, cols), pv.shape()));
            }
            cols += pv.cols();
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// `-log softmax(logits)[target]` for a single-row logit node.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(Error::Usage(format!(
                "cross entropy expects one logit row, got {:?}",
                lv.shape()
            )));
        }
        let loss = ops::cross_entropy(lv.as_slice(), target)?;
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    // Composite helpers.

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul_t(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn cross_attention(&mut self, q: NodeId, kv: NodeId, d_k: usize) -> Result<NodeId> {
        let (qs, ks) = (self.value(q).shape(), self.value(kv).shape());
        if qs.1 != ks.1 || qs.1 != d_k {
            return Err(Error::shape("cross_attention", qs, ks));
        }
        self.attend(q, kv, kv, d_k)
    }

    /// `softmax(q kᵀ / sqrt(d_k)) v`.
    pub fn attend(&mut self, q: NodeId, k: NodeId, v: NodeId, d_k: usize) -> Result<NodeId> {
        let scores = self.matmul_t(q, k)?;
        let scaled = self.scale(scores, 1.0 / (d_k as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    pub fn multi_head_cross_attention(
        &mut self,
        q: NodeId,
        kv: NodeId,
        params: &MultiHeadNodes,
    ) -> Result<NodeId> {
        let head_dim = self.value(params.q_proj[0].weight).rows();
        let mut heads = Vec::with_capacity(params.q_proj.len());
        for h in 0..params.q_proj.len() {
            let qh = params.q_proj[h].apply(self, q)?;
            let kh = params.k_proj[h].apply(self, kv)?;
            let vh = params.v_proj[h].apply(self, kv)?;
            heads.push(self.attend(qh, kh, vh, head_dim)?);
        }
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            self.concat_cols(&heads)?
        };
        params.out_proj.apply(self, concat)
    }

    /// Gradients of the scalar node `output` with respect to every node.
    /// Nodes that `output` does not depend on receive zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not on this tape", output.0)));
        }
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {out_shape:?}"
            )));
        }
        let mut g = Gradients::zeros_like(self);
        g.grads[output.0] = Matrix::scalar(1.0);
        for idx in (0..=output.0).rev() {
            let gout = std::mem::replace(&mut g.grads[idx], Matrix::zeros(0, 0));
            if gout.as_slice().iter().all(|&v| v == 0.0) {
                g.grads[idx] = gout;
                continue;
            }
            self.propagate(idx, &gout, &mut g.grads)?;
            g.grads[idx] = gout;
        }
        Ok(g)
    }

    fn propagate(&self, idx: usize, gout: &Matrix, grads: &mut [Matrix]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // d(AB) = dC Bᵀ, Aᵀ dC
                let da = ops::matmul_t(gout, self.value(*b))?;
                let db = ops::t_matmul(self.value(*a), gout)?;
                grads[a.0].axpy(1.0, &da);
                grads[b.0].axpy(1.0, &db);
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let da = ops::matmul(gout, self.value(*b))?;
                let db = ops::t_matmul(gout, self.value(*a))?;
                grads[a.0].axpy(1.0, &da);
                grads[b.0].axpy(1.0, &db);
            }
            Op::Add(a, b) => {
                grads[a.0].axpy(1.0, gout);
                grads[b.0].axpy(1.0, gout);
            }
            Op::AddRow(a, row) => {
                grads[a.0].axpy(1.0, gout);
                let mut dr = Matrix::zeros(1, gout.cols());
                for r in gout.row_iter() {
                    for (d, &v) in dr.as_mut_slice().iter_mut().zip(r) {
                        *d += v;
                    }
                }
                grads[row.0].axpy(1.0, &dr);
            }
            Op::Hadamard(a, b) => {
                let da = gout.hadamard(self.value(*b))?;
                let db = gout.hadamard(self.value(*a))?;
                grads[a.0].axpy(1.0, &da);
                grads[b.0].axpy(1.0, &db);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let mut da = gout.clone();
                let mut dr = Matrix::zeros(1, rv.cols());
                for i in 0..gout.rows() {
                    for j in 0..gout.cols() {
                        da[(i, j)] *= rv[(0, j)];
                        dr[(0, j)] += gout[(i, j)] * av[(i, j)];
                    }
                }
                grads[a.0].axpy(1.0, &da);
                grads[row.0].axpy(1.0, &dr);
            }
            Op::Scale(a, c) => grads[a.0].axpy(*c, gout),
            Op::ScaleByEntry { a, s, idx } => {
                let c = self.value(*s).as_slice()[*idx];
                grads[a.0].axpy(c, gout);
                let ds = dot(gout.as_slice(), self.value(*a).as_slice());
                grads[s.0].as_mut_slice()[*idx] += ds;
            }
            Op::Softmax(a) => {
                // dx = y ⊙ (g - <g, y>) per row; dropped columns have y = 0
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = dot(gout.row(i), y.row(i));
                    for ((d, &yv), &gv) in da.row_mut(i).iter_mut().zip(y.row(i)).zip(gout.row(i)) {
                        *d = yv * (gv - inner);
                    }
                }
                grads[a.0].axpy(1.0, &da);
            }
            Op::LayerNorm(a, eps) => {
                // dx = inv_std * (g - mean(g) - y * mean(g ⊙ y))
                let x = self.value(*a);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (_, inv_std) = row_moments(x.row(i), *eps);
                    let g = gout.row(i);
                    let g_mean = g.iter().sum::<f64>() / n;
                    let gy_mean = dot(g, y.row(i)) / n;
                    for ((d, &gv), &yv) in da.row_mut(i).iter_mut().zip(g).zip(y.row(i)) {
                        *d = inv_std * (gv - g_mean - yv * gy_mean);
                    }
                }
                grads[a.0].axpy(1.0, &da);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                let target = &mut grads[a.0];
                for i in 0..rows {
                    for (d, &gv) in target.row_mut(i).iter_mut().zip(gout.as_slice()) {
                        *d += gv * inv;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let target = &mut grads[a.0];
                for i in 0..gout.rows() {
                    let dst = &mut target.row_mut(i)[*start..*start + gout.cols()];
                    for (d, &gv) in dst.iter_mut().zip(gout.row(i)) {
                        *d += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    let target = &mut grads[p.0];
                    for i in 0..gout.rows() {
                        for (d, &gv) in target
                            .row_mut(i)
                            .iter_mut()
                            .zip(&gout.row(i)[offset..offset + width])
                        {
                            *d += gv;
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let target = &mut grads[p.0];
                    for i in 0..rows {
                        for (d, &gv) in target.row_mut(i).iter_mut().zip(gout.row(offset + i)) {
                            *d += gv;
                        }
                    }
                    offset += rows;
                }
            }
            Op::Sum(a) => {
                let g = gout.as_slice()[0];
                grads[a.0].as_mut_slice().iter_mut().for_each(|d| *d += g);
            }
            Op::CrossEntropy { logits, target } => {
                let g = gout.as_slice()[0];
                let mut p = ops::softmax_rows(self.value(*logits));
                p.as_mut_slice()[*target] -= 1.0;
                grads[logits.0].axpy(g, &p);
            }
        }
        Ok(())
    }
}

/// A [`LinearMap`] whose weight and bias live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

impl LinearNodes {
    pub fn bind(tape: &mut Tape, map: &LinearMap) -> Self {
        let weight = tape.leaf(map.weight.clone());
        let bias = map.bias.as_ref().map(|b| tape.leaf(b.clone()));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadNodes {
    pub q_proj: Vec<LinearNodes>,
    pub k_proj: Vec<LinearNodes>,
    pub v_proj: Vec<LinearNodes>,
    pub out_proj: LinearNodes,
}

impl MultiHeadNodes {
    /// Leaf order: for each head q, k, v; then the output projection.
    pub fn bind(tape: &mut Tape, params: &MultiHeadParams) -> Result<Self> {
        params.validate()?;
        let mut q_proj = Vec::with_capacity(params.heads);
        let mut k_proj = Vec::with_capacity(params.heads);
        let mut v_proj = Vec::with_capacity(params.heads);
        for h in 0..params.heads {
            q_proj.push(LinearNodes::bind(tape, &params.q_proj[h]));
            k_proj.push(LinearNodes::bind(tape, &params.k_proj[h]));
            v_proj.push(LinearNodes::bind(tape, &params.v_proj[h]));
        }
        let out_proj = LinearNodes::bind(tape, &params.out_proj);
        Ok(Self {
            q_proj,
            k_proj,
            v_proj,
            out_proj,
        })
    }
}
