//! Forward kernels shared by the eager API and the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    let bs = b.as_slice();
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = &bs[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, without materializing the transpose.
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_t", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn t_matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("t_matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    softmax_rows_masked(m, None)
}

/// Row-wise softmax over the columns where `keep[j]` is true. Dropped columns
/// come out as exact zeros. A row whose columns are all dropped is all zeros.
pub fn softmax_rows_masked(m: &Matrix, keep: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| kept(j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(i);
        let mut total = 0.0;
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            if kept(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        let inv = 1.0 / total;
        orow.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Per-row standardization `(x - mean) / sqrt(var + eps)`, biased variance,
/// no affine.
pub fn layer_norm(m: &Matrix, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let (mean, inv_std) = row_moments(m.row(i), eps);
        for (o, &v) in out.row_mut(i).iter_mut().zip(m.row(i)) {
            *o = (v - mean) * inv_std;
        }
    }
    out
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    // eps = 0 on a constant row: the centered row is all zeros already
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv_std)
}

/// Single-head scaled dot-product attention with a shared key/value context:
/// `softmax(q kvᵀ / sqrt(d_k)) kv`.
pub fn cross_attention(q: &Matrix, kv: &Matrix, d_k: usize) -> Result<Matrix> {
    if q.cols() != kv.cols() || q.cols() != d_k {
        return Err(Error::shape("cross_attention", q.shape(), kv.shape()));
    }
    let scores = matmul_t(q, kv)?.scale(1.0 / (d_k as f64).sqrt());
    matmul(&softmax_rows(&scores), kv)
}

/// Numerically stable `-log softmax(logits)[target]` for a single logit row.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Usage(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[target]).max(0.0))
}

/// Affine map `y = x Wᵀ + b` applied to every row of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    /// `out x in`.
    pub weight: Matrix,
    /// `1 x out`.
    pub bias: Option<Matrix>,
}

impl LinearMap {
    pub fn new(weight: Matrix, bias: Option<Matrix>) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::Validation("linear weight is not finite".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != (1, weight.rows()) {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: None,
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: bias.then(|| Matrix::zeros(1, output)),
        }
    }

    /// Uniform Glorot-style init, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(output, input, -limit, limit, rng),
            bias: bias.then(|| Matrix::zeros(1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let mut y = matmul_t(x, &self.weight)?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (o, &bv) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
                    *o += bv;
                }
            }
        }
        Ok(y)
    }
}

/// Parameters of a multi-head cross-attention block.
///
/// Each head owns its query, key and value projections into a `head_dim`
/// subspace; concatenated head outputs go through `out_proj`. Scores are
/// scaled by `sqrt(head_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub q_proj: Vec<LinearMap>,
    pub k_proj: Vec<LinearMap>,
    pub v_proj: Vec<LinearMap>,
    pub out_proj: LinearMap,
}

impl MultiHeadParams {
    fn check_heads(model_dim: usize, heads: usize) -> Result<usize> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(model_dim / heads)
    }

    /// Randomly initialized block. Queries have `model_dim` columns, the
    /// key/value context has `kv_dim`; output has `model_dim` columns.
    pub fn random<R: Rng + ?Sized>(
        model_dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_dim = Self::check_heads(model_dim, heads)?;
        let mut proj = |input: usize| -> Vec<LinearMap> {
            (0..heads)
                .map(|_| LinearMap::random(input, head_dim, false, rng))
                .collect()
        };
        let q_proj = proj(model_dim);
        let k_proj = proj(kv_dim);
        let v_proj = proj(kv_dim);
        Ok(Self {
            heads,
            q_proj,
            k_proj,
            v_proj,
            out_proj: LinearMap::random(model_dim, model_dim, false, rng),
        })
    }

    /// Each head sees its own slice of the channels unchanged; the output
    /// projection is the identity. With one head this is plain
    /// `cross_attention`.
    pub fn identity(model_dim: usize, heads: usize) -> Result<Self> {
        let head_dim = Self::check_heads(model_dim, heads)?;
        let slice = |h: usize| {
            let mut w = Matrix::zeros(head_dim, model_dim);
            for i in 0..head_dim {
                w[(i, h * head_dim + i)] = 1.0;
            }
            LinearMap {
                weight: w,
                bias: None,
            }
        };
        let maps: Vec<LinearMap> = (0..heads).map(slice).collect();
        Ok(Self {
            heads,
            q_proj: maps.clone(),
            k_proj: maps.clone(),
            v_proj: maps,
            out_proj: LinearMap::identity(model_dim),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.out_proj.output_dim()
    }

    pub fn kv_dim(&self) -> usize {
        self.k_proj[0].input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.q_proj[0].output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.heads;
        if n == 0 || self.q_proj.len() != n || self.k_proj.len() != n || self.v_proj.len() != n {
            return Err(Error::Config(format!(
                "expected {n} per-head projections, got q={} k={} v={}",
                self.q_proj.len(),
                self.k_proj.len(),
                self.v_proj.len()
            )));
        }
        Self::check_heads(self.out_proj.input_dim(), n)?;
        let head_dim = self.out_proj.input_dim() / n;
        let kv = self.k_proj[0].input_dim();
        let q = self.q_proj[0].input_dim();
        for h in 0..n {
            let ok = self.q_proj[h].weight.shape() == (head_dim, q)
                && self.k_proj[h].weight.shape() == (head_dim, kv)
                && self.v_proj[h].weight.shape() == (head_dim, kv);
            if !ok {
                return Err(Error::Config(format!("head {h} projections have inconsistent shapes")));
            }
        }
        Ok(())
    }
}

/// Split-project-attend-concat-project cross-attention.
pub fn multi_head_cross_attention(
    q: &Matrix,
    kv: &Matrix,
    params: &MultiHeadParams,
) -> Result<Matrix> {
    params.validate()?;
    let head_dim = params.head_dim();
    let mut concat = Matrix::zeros(q.rows(), head_dim * params.heads);
    for h in 0..params.heads {
        let qh = params.q_proj[h].forward(q)?;
        let kh = params.k_proj[h].forward(kv)?;
        let vh = params.v_proj[h].forward(kv)?;
        let scores = matmul_t(&qh, &kh)?.scale(1.0 / (head_dim as f64).sqrt());
        let out = matmul(&softmax_rows(&scores), &vh)?;
        for i in 0..q.rows() {
            concat.row_mut(i)[h * head_dim..(h + 1) * head_dim].copy_from_slice(out.row(i));
        }
    }
    params.out_proj.forward(&concat)
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_diff(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut x = at.clone();
    for i in 0..at.len() {
        let orig = x.as_slice()[i];
        x.as_mut_slice()[i] = orig + h;
        let plus = f(&x);
        x.as_mut_slice()[i] = orig - h;
        let minus = f(&x);
        x.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}
