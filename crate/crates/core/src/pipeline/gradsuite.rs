//! Analytic versus central-difference gradients for every differentiable
//! building block and for the TMM, CMA and full toy model end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cma::{AbstractTokens, CmaNodes, CmaParams};
use crate::error::Result;
use crate::numerics::{
    check_gradients, GradCheck, LinearMap, LinearNodes, Matrix, MultiHeadNodes, MultiHeadParams, NodeId, Tape,
};
use crate::tmm::{FusionInputs, GateControl, TmmDims, TmmNodes, TmmParams};

use super::config::RunConfig;
use super::model::{Model, ModelNodes, RawSample};

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Hands out pre-created leaf ids in order.
struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [NodeId]) -> Self {
        Self { ids, pos: 0 }
    }

    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn linear(&mut self, map: &LinearMap) -> LinearNodes {
        let weight = self.next();
        let bias = map.bias.as_ref().map(|_| self.next());
        LinearNodes { weight, bias }
    }

    fn multi_head(&mut self, p: &MultiHeadParams) -> MultiHeadNodes {
        let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..p.heads {
            q.push(self.linear(&p.q_proj[h]));
            k.push(self.linear(&p.k_proj[h]));
            v.push(self.linear(&p.v_proj[h]));
        }
        MultiHeadNodes {
            q_proj: q,
            k_proj: k,
            v_proj: v,
            out_proj: self.linear(&p.out_proj),
        }
    }

    fn tmm(&mut self, p: &TmmParams) -> TmmNodes {
        let projections = [self.linear(&p.proj_lidar), self.linear(&p.proj_occ), self.linear(&p.proj_desc)];
        let question_proj = p.question_proj.as_ref().map(|q| self.linear(q));
        TmmNodes {
            projections,
            question_proj,
            weight_predictor: self.linear(&p.weight_predictor),
            ln_eps: p.ln_eps,
        }
    }
}

fn linear_mats(map: &LinearMap, out: &mut Vec<Matrix>) {
    out.push(map.weight.clone());
    out.extend(map.bias.iter().cloned());
}

fn multi_head_mats(p: &MultiHeadParams, out: &mut Vec<Matrix>) {
    for h in 0..p.heads {
        linear_mats(&p.q_proj[h], out);
        linear_mats(&p.k_proj[h], out);
        linear_mats(&p.v_proj[h], out);
    }
    linear_mats(&p.out_proj, out);
}

fn tmm_mats(p: &TmmParams, out: &mut Vec<Matrix>) {
    linear_mats(&p.proj_lidar, out);
    linear_mats(&p.proj_occ, out);
    linear_mats(&p.proj_desc, out);
    if let Some(q) = &p.question_proj {
        linear_mats(q, out);
    }
    linear_mats(&p.weight_predictor, out);
}

fn normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(rows, cols, 0.0, 1.0, rng)
}

/// `sum(x ⊙ R)` with a fixed random `R`, so every output entry matters.
fn project_scalar(tape: &mut Tape, x: NodeId, r: &Matrix) -> Result<NodeId> {
    let w = tape.leaf(r.clone());
    let p = tape.hadamard(x, w)?;
    Ok(tape.sum(p))
}

fn run(name: &'static str, inputs: &[Matrix], build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Result<CaseResult> {
    let GradCheck { max_rel_error, checked } = check_gradients(inputs, build)?;
    Ok(CaseResult {
        name,
        max_rel_error,
        checked,
    })
}

pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let x = normal(3, 4, &mut rng);
        let w = normal(5, 4, &mut rng);
        let b = normal(1, 5, &mut rng);
        let r = normal(3, 5, &mut rng);
        out.push(run("linear", &[x, w, b], |t, ids| {
            let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
            project_scalar(t, y, &r)
        })?);
    }
    {
        let x = normal(4, 5, &mut rng).scale(2.0);
        let r = normal(4, 5, &mut rng);
        out.push(run("softmax", &[x], |t, ids| {
            let y = t.softmax_rows(ids[0]);
            project_scalar(t, y, &r)
        })?);
    }
    {
        let x = normal(4, 6, &mut rng);
        let r = normal(4, 6, &mut rng);
        out.push(run("layer_norm", &[x], |t, ids| {
            let y = t.layer_norm(ids[0], crate::numerics::LN_EPS);
            project_scalar(t, y, &r)
        })?);
    }
    {
        let q = normal(3, 4, &mut rng);
        let kv = normal(5, 4, &mut rng);
        let r = normal(3, 4, &mut rng);
        out.push(run("cross_attention", &[q, kv], |t, ids| {
            let y = t.cross_attention(ids[0], ids[1], 4)?;
            project_scalar(t, y, &r)
        })?);
    }
    {
        let params = MultiHeadParams::random(6, 5, 2, &mut rng)?;
        let mut inputs = vec![normal(3, 6, &mut rng), normal(4, 5, &mut rng)];
        multi_head_mats(&params, &mut inputs);
        let r = normal(3, 6, &mut rng);
        out.push(run("multi_head_attention", &inputs, |t, ids| {
            let nodes = Cursor::new(&ids[2..]).multi_head(&params);
            let y = t.multi_head_cross_attention(ids[0], ids[1], &nodes)?;
            project_scalar(t, y, &r)
        })?);
    }
    {
        let logits = normal(1, 5, &mut rng).scale(2.0);
        let target = rng.random_range(0..5);
        out.push(run("cross_entropy", &[logits], |t, ids| t.cross_entropy(ids[0], target))?);
    }

    let dims = TmmDims {
        lidar: 5,
        occ: 3,
        desc: 4,
        question: 3,
        latent: 4,
    };
    let tmm = TmmParams::random(dims, true, &mut rng);
    let bundle = [
        normal(3, dims.latent, &mut rng),
        normal(2, dims.lidar, &mut rng),
        normal(4, dims.occ, &mut rng),
        normal(3, dims.desc, &mut rng),
        normal(2, dims.question, &mut rng),
    ];
    for (name, control) in [
        ("tmm", GateControl::default()),
        ("tmm_masked", GateControl::default().with_enabled([true, false, true])),
    ] {
        let mut inputs = bundle.to_vec();
        tmm_mats(&tmm, &mut inputs);
        let r = normal(3, dims.latent, &mut rng);
        out.push(run(name, &inputs, |t, ids| {
            let nodes = Cursor::new(&ids[5..]).tmm(&tmm);
            let [lidar, occ, desc] = nodes.project(t, [ids[1], ids[2], ids[3]])?;
            let f = nodes.fuse(
                t,
                &FusionInputs {
                    image: ids[0],
                    lidar,
                    occ,
                    desc,
                    question: ids[4],
                },
                &control,
            )?;
            project_scalar(t, f.fused, &r)
        })?);
    }

    {
        let tokens = AbstractTokens::random(3, 4, &mut rng)?;
        // unit-scale tokens keep the layer norm well conditioned
        let tokens = AbstractTokens::new(tokens.0.scale(50.0))?;
        let cma = CmaParams::random(4, 3, 2, &mut rng)?;
        let mut inputs = vec![normal(2, 3, &mut rng), normal(5, 4, &mut rng), tokens.0.clone()];
        multi_head_mats(&cma.stage1, &mut inputs);
        let r = normal(3, 4, &mut rng);
        out.push(run("cma", &inputs, |t, ids| {
            let nodes = CmaNodes {
                tokens: ids[2],
                stage1: Cursor::new(&ids[3..]).multi_head(&cma.stage1),
                ln_eps: cma.ln_eps,
            };
            let y = nodes.forward(t, ids[0], ids[1])?;
            project_scalar(t, y, &r)
        })?);
    }

    {
        let mut config = RunConfig::default();
        config.dims.latent = 4;
        config.dims.question = 3;
        config.dims.lidar = 3;
        config.dims.occ = 2;
        config.dims.desc = 3;
        config.dims.image_tokens = 2;
        config.dims.question_tokens = 2;
        config.dims.lidar_tokens = 2;
        config.dims.occ_tokens = 2;
        config.dims.desc_tokens = 2;
        config.dims.classes = 3;
        config.cma.num_tokens = 8;
        let mut model = Model::new(&config, &mut rng)?;
        model.tokens = AbstractTokens::new(model.tokens.0.scale(50.0))?;
        let d = &config.dims;
        let sample = RawSample {
            image: normal(d.image_tokens, d.latent, &mut rng),
            lidar: normal(d.lidar_tokens, d.lidar, &mut rng),
            occ: normal(d.occ_tokens, d.occ, &mut rng),
            desc: normal(d.desc_tokens, d.desc, &mut rng),
            question: normal(d.question_tokens, d.question, &mut rng),
        };
        let label = rng.random_range(0..d.classes);
        let inputs: Vec<Matrix> = model.params_mut().into_iter().map(|m| m.clone()).collect();
        let control = Model::control(&config);
        out.push(run("toy_model", &inputs, |t, ids| {
            let mut c = Cursor::new(ids);
            let tmm = c.tmm(&model.tmm);
            let tokens = c.next();
            let stage1 = c.multi_head(&model.cma.stage1);
            let decoder = c.linear(&model.decoder);
            let nodes = ModelNodes {
                tmm,
                cma: CmaNodes {
                    tokens,
                    stage1,
                    ln_eps: model.cma.ln_eps,
                },
                decoder,
                param_count: ids.len(),
            };
            let f = model.forward(&nodes, t, &sample, &control, true)?;
            t.cross_entropy(f.logits, label)
        })?);
    }

    Ok(out)
}

/// Largest relative error across all cases.
pub fn worst(results: &[CaseResult]) -> f64 {
    results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}
