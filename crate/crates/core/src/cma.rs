//! Cross-modal abstractor.
//!
//! `K` learnable tokens first read the question through multi-head
//! cross-attention (with a residual and layer norm), then use the result as
//! queries over the fused scene tokens. The output always has `K` rows,
//! however long the scene sequence is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cross_attention, layer_norm, multi_head_cross_attention, Matrix, MultiHeadNodes,
    MultiHeadParams, NodeId, Tape, LN_EPS,
};

/// Token counts accepted by default validation.
pub const TOKEN_COUNTS: [usize; 4] = [8, 16, 24, 32];
pub const DEFAULT_TOKENS: usize = 16;
pub const TOKEN_INIT_STD: f64 = 0.02;

/// The learnable `K x D` matrix of abstract tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractTokens(pub Matrix);

impl AbstractTokens {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() == 0 {
            return Err(Error::Config("need at least one abstract token".into()));
        }
        if !a.is_finite() {
            return Err(Error::Validation("abstract tokens are not finite".into()));
        }
        Ok(Self(a))
    }

    /// N(0, 0.02²) entries.
    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::new(Matrix::random_normal(k, dim, 0.0, TOKEN_INIT_STD, rng))
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    /// Question-reading attention. Stage two has no parameters.
    pub stage1: MultiHeadParams,
    pub ln_eps: f64,
}

impl CmaParams {
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        question_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            stage1: MultiHeadParams::random(dim, question_dim, heads, rng)?,
            ln_eps: LN_EPS,
        })
    }

    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            stage1: MultiHeadParams::identity(dim, heads)?,
            ln_eps: LN_EPS,
        })
    }
}

fn check_stage1(tokens: &AbstractTokens, question: &Matrix, params: &CmaParams) -> Result<()> {
    params.stage1.validate()?;
    if tokens.dim() != params.stage1.model_dim() {
        return Err(Error::shape("absorb_question", tokens.0.shape(), params.stage1.out_proj.weight.shape()));
    }
    if question.cols() != params.stage1.kv_dim() || question.rows() == 0 {
        return Err(Error::shape("absorb_question", tokens.0.shape(), question.shape()));
    }
    Ok(())
}

/// `Q_A = LayerNorm(A + MultiHead(A, F_Q))`.
pub fn absorb_question(
    tokens: &AbstractTokens,
    question: &Matrix,
    params: &CmaParams,
) -> Result<Matrix> {
    check_stage1(tokens, question, params)?;
    let attended = multi_head_cross_attention(&tokens.0, question, &params.stage1)?;
    Ok(layer_norm(&tokens.0.add(&attended)?, params.ln_eps))
}

/// `F_A = softmax(Q_A Fᵀ / sqrt(D)) F`.
pub fn abstract_scene(q_a: &Matrix, fused: &Matrix) -> Result<Matrix> {
    if q_a.cols() != fused.cols() || fused.rows() == 0 {
        return Err(Error::shape("abstract_scene", q_a.shape(), fused.shape()));
    }
    cross_attention(q_a, fused, q_a.cols())
}

pub fn cma_forward(
    tokens: &AbstractTokens,
    question: &Matrix,
    fused: &Matrix,
    params: &CmaParams,
) -> Result<Matrix> {
    let q_a = absorb_question(tokens, question, params)?;
    abstract_scene(&q_a, fused)
}

/// [`AbstractTokens`] and [`CmaParams`] bound to a tape.
#[derive(Debug, Clone)]
pub struct CmaNodes {
    pub tokens: NodeId,
    pub stage1: MultiHeadNodes,
    pub ln_eps: f64,
}

impl CmaNodes {
    /// Leaf order: tokens, then the stage-one attention.
    pub fn bind(tape: &mut Tape, tokens: &AbstractTokens, params: &CmaParams) -> Result<Self> {
        let t = tape.leaf(tokens.0.clone());
        let stage1 = MultiHeadNodes::bind(tape, &params.stage1)?;
        Ok(Self {
            tokens: t,
            stage1,
            ln_eps: params.ln_eps,
        })
    }

    pub fn absorb(&self, tape: &mut Tape, question: NodeId) -> Result<NodeId> {
        let attended = tape.multi_head_cross_attention(self.tokens, question, &self.stage1)?;
        let res = tape.add(self.tokens, attended)?;
        Ok(tape.layer_norm(res, self.ln_eps))
    }

    pub fn forward(&self, tape: &mut Tape, question: NodeId, fused: NodeId) -> Result<NodeId> {
        let q_a = self.absorb(tape, question)?;
        let d = tape.value(q_a).cols();
        tape.cross_attention(q_a, fused, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_question_token_adds_to_each_abstract_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = AbstractTokens::random(3, 4, &mut rng).unwrap();
        let v = Matrix::row_vector(&[0.5, -1.0, 2.0, 0.25]);
        let q_a = absorb_question(&a, &v, &CmaParams::identity(4, 1).unwrap()).unwrap();
        for k in 0..3 {
            let pre: Vec<f64> = a.0.row(k).iter().zip(v.as_slice()).map(|(x, y)| x + y).collect();
            let expected = layer_norm(&Matrix::row_vector(&pre), LN_EPS);
            assert!(Matrix::row_vector(q_a.row(k)).max_abs_diff(&expected) < 1e-14);
        }
    }

    #[test]
    fn stage_two_trivial_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q_a = Matrix::random_uniform(4, 3, -1.0, 1.0, &mut rng);
        let v = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let out = abstract_scene(&q_a, &v).unwrap();
        assert_eq!(out.shape(), (4, 3));
        for r in out.row_iter() {
            assert_eq!(r, v.as_slice());
        }
        let same = Matrix::vstack(&[&v, &v, &v, &v, &v]).unwrap();
        let out = abstract_scene(&q_a, &same).unwrap();
        for r in out.row_iter() {
            assert!(Matrix::row_vector(r).max_abs_diff(&Matrix::row_vector(out.row(0))) < 1e-15);
        }
        assert!(abstract_scene(&q_a, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_tokens_composed_case() {
        // A = 0: every token attends uniformly to the single question token
        // v, so Q_A rows all equal LayerNorm(v); stage two over one row
        // returns that row.
        let a = AbstractTokens::new(Matrix::zeros(2, 4)).unwrap();
        let v = Matrix::row_vector(&[3.0, -1.0, 0.0, 2.0]);
        let params = CmaParams::identity(4, 1).unwrap();
        let q_a = absorb_question(&a, &v, &params).unwrap();
        let ln_v = layer_norm(&v, LN_EPS);
        for r in q_a.row_iter() {
            assert!(Matrix::row_vector(r).max_abs_diff(&ln_v) < 1e-15);
        }
        let scene = Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]);
        let out = cma_forward(&a, &v, &scene, &params).unwrap();
        assert_eq!(out, Matrix::vstack(&[&scene, &scene]).unwrap());
    }

    #[test]
    fn output_has_k_rows_for_any_scene_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AbstractTokens::random(5, 8, &mut rng).unwrap();
        let params = CmaParams::random(8, 6, 2, &mut rng).unwrap();
        let q = Matrix::random_uniform(3, 6, -1.0, 1.0, &mut rng);
        for s in [1, 10, 100] {
            let fused = Matrix::random_uniform(s, 8, -1.0, 1.0, &mut rng);
            assert_eq!(cma_forward(&a, &q, &fused, &params).unwrap().shape(), (5, 8));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AbstractTokens::random(2, 4, &mut rng).unwrap();
        let params = CmaParams::identity(4, 2).unwrap();
        assert!(absorb_question(&a, &Matrix::zeros(2, 3), &params).is_err());
        assert!(absorb_question(&a, &Matrix::zeros(0, 4), &params).is_err());
        assert!(AbstractTokens::new(Matrix::zeros(0, 4)).is_err());
    }
}
