use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cma::{AbstractTokens, CmaNodes, CmaParams};
use crate::error::{Error, Result};
use crate::numerics::{LinearMap, LinearNodes, Matrix, NodeId, Tape};
use crate::tmm::{FusionInputs, GateControl, GateMode, ModalityBundle, TmmDims, TmmNodes, TmmParams};

use super::config::RunConfig;
use super::sequence::{assemble_sequence, AssembledSequence, SpecialTokens};

/// Raw encoder outputs for one sample, before the modality projections.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub image: Matrix,
    pub lidar: Matrix,
    pub occ: Matrix,
    pub desc: Matrix,
    pub question: Matrix,
}

/// Everything the toy model learns, plus the fixed marker and question
/// embeddings used only for sequence assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub tmm: TmmParams,
    pub tokens: AbstractTokens,
    pub cma: CmaParams,
    pub decoder: LinearMap,
    pub specials: SpecialTokens,
    pub question_embed: LinearMap,
}

/// Forward results for one sample.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub weights: NodeId,
    pub fused: NodeId,
    /// `None` when CMA is off.
    pub abstraction: Option<NodeId>,
    pub logits: NodeId,
}

/// Trainable parameters bound as the first leaves of a tape.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub tmm: TmmNodes,
    pub cma: CmaNodes,
    pub decoder: LinearNodes,
    pub param_count: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = &config.dims;
        let mut tmm = TmmParams::random(
            TmmDims {
                lidar: d.lidar,
                occ: d.occ,
                desc: d.desc,
                question: d.question,
                latent: d.latent,
            },
            config.predictor_bias,
            rng,
        );
        tmm.ln_eps = config.ln_eps;
        let tokens = AbstractTokens::random(config.cma.num_tokens, d.latent, rng)?;
        let mut cma = CmaParams::random(d.latent, d.question, config.cma.heads, rng)?;
        cma.ln_eps = config.ln_eps;
        let decoder = LinearMap::random(d.latent, d.classes, true, rng);
        let specials = SpecialTokens::random(d.latent, rng);
        let question_embed = LinearMap::random(d.question, d.latent, false, rng);
        Ok(Self {
            tmm,
            tokens,
            cma,
            decoder,
            specials,
            question_embed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.decoder.output_dim()
    }

    /// Trainable matrices in the same order [`Model::bind`] creates leaves.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        fn linear<'a>(out: &mut Vec<&'a mut Matrix>, l: &'a mut LinearMap) {
            out.push(&mut l.weight);
            if let Some(b) = l.bias.as_mut() {
                out.push(b);
            }
        }
        let tmm = &mut self.tmm;
        linear(&mut out, &mut tmm.proj_lidar);
        linear(&mut out, &mut tmm.proj_occ);
        linear(&mut out, &mut tmm.proj_desc);
        if let Some(q) = tmm.question_proj.as_mut() {
            linear(&mut out, q);
        }
        linear(&mut out, &mut tmm.weight_predictor);
        out.push(&mut self.tokens.0);
        let s1 = &mut self.cma.stage1;
        for ((q, k), v) in s1.q_proj.iter_mut().zip(s1.k_proj.iter_mut()).zip(s1.v_proj.iter_mut()) {
            linear(&mut out, q);
            linear(&mut out, k);
            linear(&mut out, v);
        }
        linear(&mut out, &mut s1.out_proj);
        linear(&mut out, &mut self.decoder);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().len()
    }

    /// Binds every trainable matrix. Must be called on an empty tape so that
    /// parameter `i` of [`Model::params_mut`] is `NodeId(i)`.
    pub fn bind(&self, tape: &mut Tape) -> Result<ModelNodes> {
        if !tape.is_empty() {
            return Err(Error::Usage("model must be bound on an empty tape".into()));
        }
        let tmm = TmmNodes::bind(tape, &self.tmm);
        let cma = CmaNodes::bind(tape, &self.tokens, &self.cma)?;
        let decoder = LinearNodes::bind(tape, &self.decoder);
        Ok(ModelNodes {
            tmm,
            cma,
            decoder,
            param_count: tape.len(),
        })
    }

    /// `tmm = false` replaces the learned gate with the uniform one;
    /// `cma = false` feeds the mean of the fused rows to the decoder.
    pub fn control(config: &RunConfig) -> GateControl {
        let base = if config.modules.tmm {
            GateControl::default()
        } else {
            GateControl::uniform()
        };
        base.with_enabled(config.modalities.as_mask())
    }

    pub fn forward(
        &self,
        nodes: &ModelNodes,
        tape: &mut Tape,
        sample: &RawSample,
        control: &GateControl,
        use_cma: bool,
    ) -> Result<ForwardNodes> {
        let image = tape.leaf(sample.image.clone());
        let raw = [
            tape.leaf(sample.lidar.clone()),
            tape.leaf(sample.occ.clone()),
            tape.leaf(sample.desc.clone()),
        ];
        let question = tape.leaf(sample.question.clone());
        let [lidar, occ, desc] = nodes.tmm.project(tape, raw)?;
        let fusion = nodes.tmm.fuse(
            tape,
            &FusionInputs {
                image,
                lidar,
                occ,
                desc,
                question,
            },
            control,
        )?;
        let (abstraction, pooled) = if use_cma {
            let f_a = nodes.cma.forward(tape, question, fusion.fused)?;
            (Some(f_a), tape.mean_rows(f_a)?)
        } else {
            (None, tape.mean_rows(fusion.fused)?)
        };
        let logits = nodes.decoder.apply(tape, pooled)?;
        Ok(ForwardNodes {
            weights: fusion.weights,
            fused: fusion.fused,
            abstraction,
            logits,
        })
    }

    /// Inference on a fresh tape.
    pub fn predict(&self, sample: &RawSample, control: &GateControl, use_cma: bool) -> Result<Prediction> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape)?;
        let f = self.forward(&nodes, &mut tape, sample, control, use_cma)?;
        let logits = tape.value(f.logits).as_slice().to_vec();
        let class = argmax(&logits);
        Ok(Prediction {
            class,
            logits,
            weights: tape.value(f.weights).as_slice().try_into().expect("three weights"),
            fused: tape.value(f.fused).clone(),
            abstraction: f.abstraction.map(|a| tape.value(a).clone()),
        })
    }

    /// `[Q] question [/Q] [ABS] F_A [/ABS] [IMG] E_fused [/IMG]`, with the
    /// question embedded to the latent width.
    pub fn assemble(&self, question: &Matrix, abstraction: &Matrix, fused: &Matrix) -> Result<AssembledSequence> {
        let q = self.question_embed.forward(question)?;
        assemble_sequence(&q, abstraction, fused, &self.specials)
    }

    pub fn bundle_dims_ok(&self, bundle: &ModalityBundle) -> Result<()> {
        bundle.validate()?;
        if bundle.latent_dim() != self.latent_dim() {
            return Err(Error::Config(format!(
                "image features have {} columns, model latent width is {}",
                bundle.latent_dim(),
                self.latent_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
    pub weights: [f64; 3],
    pub fused: Matrix,
    pub abstraction: Option<Matrix>,
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A learned gate restricted to the given modalities.
pub fn learned_with(enabled: [bool; 3]) -> GateControl {
    GateControl {
        mode: GateMode::Learned,
        enabled,
    }
}
