//! Text-oriented multimodal modulator.
//!
//! The question is average-pooled into one vector, a bias-free linear map
//! turns it into three gate logits, and a softmax gives the fusion weights
//! `[lidar, occ, desc]`. Image tokens then attend separately to each
//! projected modality, the three results are mixed with those weights and
//! layer-normalized, and the image tokens are added back as a residual:
//!
//! ```text
//! E_m     = softmax(F_I F_mᵀ / sqrt(D)) F_m          m ∈ {lidar, occ, desc}
//! E_fused = F_I + LayerNorm(ω_lidar E_lidar + ω_occ E_occ + ω_desc E_desc)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LinearMap, LinearNodes, Matrix, NodeId, Tape, LN_EPS};

/// The three gated streams, in gate order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lidar,
    Occ,
    Desc,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Lidar, Modality::Occ, Modality::Desc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            Modality::Occ => "occ",
            Modality::Desc => "desc",
        }
    }
}

/// One sample's features, with LiDAR / occupancy / description already in
/// the shared latent width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    pub image: Matrix,
    pub lidar: Matrix,
    pub occ: Matrix,
    pub desc: Matrix,
    pub question: Matrix,
}

impl ModalityBundle {
    pub fn latent_dim(&self) -> usize {
        self.image.cols()
    }

    pub fn modality(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Lidar => &self.lidar,
            Modality::Occ => &self.occ,
            Modality::Desc => &self.desc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        for m in Modality::ALL {
            let f = self.modality(m);
            if f.cols() != d {
                return Err(Error::Config(format!(
                    "{} features have {} columns, image has {d}",
                    m.name(),
                    f.cols()
                )));
            }
            if f.rows() == 0 {
                return Err(Error::Config(format!("{} features have no tokens", m.name())));
            }
        }
        if self.question.rows() == 0 {
            return Err(Error::Usage("question has no tokens".into()));
        }
        let all = [&self.image, &self.lidar, &self.occ, &self.desc, &self.question];
        if !all.iter().all(|m| m.is_finite()) {
            return Err(Error::Validation("bundle contains non-finite features".into()));
        }
        Ok(())
    }
}

/// Point on the 3-simplex: `[ω_lidar, ω_occ, ω_desc]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(pub [f64; 3]);

impl FusionWeights {
    pub const UNIFORM: FusionWeights = FusionWeights([1.0 / 3.0; 3]);

    pub fn new(omega: [f64; 3]) -> Result<Self> {
        let w = FusionWeights(omega);
        w.validate()?;
        Ok(w)
    }

    pub fn one_hot(m: Modality) -> Self {
        let mut w = [0.0; 3];
        w[m.index()] = 1.0;
        FusionWeights(w)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("{:?} is not on the simplex", self.0)));
        }
        Ok(())
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.0[m.index()]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmmParams {
    pub proj_lidar: LinearMap,
    pub proj_occ: LinearMap,
    pub proj_desc: LinearMap,
    /// Optional map from the question width to the predictor's input width.
    pub question_proj: Option<LinearMap>,
    /// `W_ω`, three outputs.
    pub weight_predictor: LinearMap,
    pub ln_eps: f64,
}

/// Shapes for [`TmmParams::random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TmmDims {
    pub lidar: usize,
    pub occ: usize,
    pub desc: usize,
    pub question: usize,
    pub latent: usize,
}

impl TmmParams {
    pub fn random<R: Rng + ?Sized>(dims: TmmDims, predictor_bias: bool, rng: &mut R) -> Self {
        Self {
            proj_lidar: LinearMap::random(dims.lidar, dims.latent, false, rng),
            proj_occ: LinearMap::random(dims.occ, dims.latent, false, rng),
            proj_desc: LinearMap::random(dims.desc, dims.latent, false, rng),
            question_proj: None,
            weight_predictor: LinearMap::random(dims.question, 3, predictor_bias, rng),
            ln_eps: LN_EPS,
        }
    }

    pub fn projection(&self, m: Modality) -> &LinearMap {
        match m {
            Modality::Lidar => &self.proj_lidar,
            Modality::Occ => &self.proj_occ,
            Modality::Desc => &self.proj_desc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_predictor.output_dim() != 3 {
            return Err(Error::Config(format!(
                "weight predictor must have 3 outputs, has {}",
                self.weight_predictor.output_dim()
            )));
        }
        let d = self.proj_lidar.output_dim();
        for m in Modality::ALL {
            if self.projection(m).output_dim() != d {
                return Err(Error::Config(format!(
                    "{} projection outputs {} columns, expected {d}",
                    m.name(),
                    self.projection(m).output_dim()
                )));
            }
        }
        if let Some(qp) = &self.question_proj {
            if qp.output_dim() != self.weight_predictor.input_dim() {
                return Err(Error::Config("question projection does not feed the predictor".into()));
            }
        }
        Ok(())
    }
}

/// How the gate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// Softmax of the predicted logits.
    Learned,
    /// Equal weight on every enabled modality (the module switched off).
    Uniform,
    /// Fixed weights, for tests and ablations.
    Forced(FusionWeights),
}

/// Gate mode plus the per-modality enable mask. A disabled modality gets
/// weight exactly zero and the remaining weights renormalize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateControl {
    pub mode: GateMode,
    pub enabled: [bool; 3],
}

impl Default for GateControl {
    fn default() -> Self {
        Self {
            mode: GateMode::Learned,
            enabled: [true; 3],
        }
    }
}

impl GateControl {
    pub fn forced(w: FusionWeights) -> Self {
        Self {
            mode: GateMode::Forced(w),
            enabled: [true; 3],
        }
    }

    pub fn uniform() -> Self {
        Self {
            mode: GateMode::Uniform,
            enabled: [true; 3],
        }
    }

    pub fn with_enabled(mut self, enabled: [bool; 3]) -> Self {
        self.enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::Config("at least one gated modality must stay enabled".into()));
        }
        if let GateMode::Forced(w) = self.mode {
            w.validate()?;
        }
        Ok(())
    }
}

/// Everything [`modulated_fusion`] computes.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub fused: Matrix,
    pub weights: FusionWeights,
    pub lidar: Matrix,
    pub occ: Matrix,
    pub desc: Matrix,
    /// `Σ ω_m E_m` before the layer norm.
    pub mixed: Matrix,
}

/// Projects raw LiDAR / occupancy / description features to the latent width.
pub fn project_modalities(
    lidar: &Matrix,
    occ: &Matrix,
    desc: &Matrix,
    params: &TmmParams,
) -> Result<[Matrix; 3]> {
    let mut out = Vec::with_capacity(3);
    for (m, raw) in Modality::ALL.into_iter().zip([lidar, occ, desc]) {
        let p = params.projection(m);
        if raw.cols() != p.input_dim() {
            return Err(Error::Config(format!(
                "{} features have {} columns, projection expects {}",
                m.name(),
                raw.cols(),
                p.input_dim()
            )));
        }
        out.push(p.forward(raw)?);
    }
    Ok(out.try_into().expect("three modalities"))
}

/// Column mean over the question tokens.
pub fn pool_question(question: &Matrix) -> Result<Matrix> {
    if question.rows() == 0 {
        return Err(Error::Usage("question has no tokens".into()));
    }
    Ok(question.mean_rows())
}

pub fn predict_weights(pooled: &Matrix, params: &TmmParams) -> Result<FusionWeights> {
    let mut tape = Tape::new();
    let pooled = tape.leaf(pooled.clone());
    let nodes = TmmNodes::bind(&mut tape, params);
    let w = nodes.gate(&mut tape, pooled, &GateControl::default())?;
    Ok(weights_from(tape.value(w)))
}

fn weights_from(m: &Matrix) -> FusionWeights {
    let s = m.as_slice();
    FusionWeights([s[0], s[1], s[2]])
}

pub fn modulated_fusion(bundle: &ModalityBundle, params: &TmmParams) -> Result<FusionOutput> {
    modulated_fusion_with(bundle, params, &GateControl::default())
}

pub fn modulated_fusion_with(
    bundle: &ModalityBundle,
    params: &TmmParams,
    control: &GateControl,
) -> Result<FusionOutput> {
    bundle.validate()?;
    let mut tape = Tape::new();
    let nodes = TmmNodes::bind(&mut tape, params);
    let inputs = FusionInputs {
        image: tape.leaf(bundle.image.clone()),
        lidar: tape.leaf(bundle.lidar.clone()),
        occ: tape.leaf(bundle.occ.clone()),
        desc: tape.leaf(bundle.desc.clone()),
        question: tape.leaf(bundle.question.clone()),
    };
    let out = nodes.fuse(&mut tape, &inputs, control)?;
    Ok(FusionOutput {
        fused: tape.value(out.fused).clone(),
        weights: weights_from(tape.value(out.weights)),
        lidar: tape.value(out.per_modality[0]).clone(),
        occ: tape.value(out.per_modality[1]).clone(),
        desc: tape.value(out.per_modality[2]).clone(),
        mixed: tape.value(out.mixed).clone(),
    })
}

/// Tape handles for a bundle whose modality streams are already projected.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs {
    pub image: NodeId,
    pub lidar: NodeId,
    pub occ: NodeId,
    pub desc: NodeId,
    pub question: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub fused: NodeId,
    /// `1 x 3` gate.
    pub weights: NodeId,
    pub per_modality: [NodeId; 3],
    pub mixed: NodeId,
}

/// [`TmmParams`] bound to a tape.
#[derive(Debug, Clone)]
pub struct TmmNodes {
    pub projections: [LinearNodes; 3],
    pub question_proj: Option<LinearNodes>,
    pub weight_predictor: LinearNodes,
    pub ln_eps: f64,
}

impl TmmNodes {
    /// Leaf order: lidar, occ, desc projections, question projection if
    /// present, then the weight predictor.
    pub fn bind(tape: &mut Tape, params: &TmmParams) -> Self {
        let projections = Modality::ALL.map(|m| LinearNodes::bind(tape, params.projection(m)));
        let question_proj = params.question_proj.as_ref().map(|q| LinearNodes::bind(tape, q));
        let weight_predictor = LinearNodes::bind(tape, &params.weight_predictor);
        Self {
            projections,
            question_proj,
            weight_predictor,
            ln_eps: params.ln_eps,
        }
    }

    pub fn project(&self, tape: &mut Tape, raw: [NodeId; 3]) -> Result<[NodeId; 3]> {
        let mut out = [raw[0]; 3];
        for m in Modality::ALL {
            let x = raw[m.index()];
            let p = &self.projections[m.index()];
            let (xs, ws) = (tape.value(x).shape(), tape.value(p.weight).shape());
            if xs.1 != ws.1 {
                return Err(Error::Config(format!(
                    "{} features have {} columns, projection expects {}",
                    m.name(),
                    xs.1,
                    ws.1
                )));
            }
            out[m.index()] = p.apply(tape, x)?;
        }
        Ok(out)
    }

    /// `1 x 3` fusion weights from the pooled question.
    pub fn gate(&self, tape: &mut Tape, pooled: NodeId, control: &GateControl) -> Result<NodeId> {
        control.validate()?;
        match control.mode {
            GateMode::Learned => {
                let f = match &self.question_proj {
                    Some(q) => q.apply(tape, pooled)?,
                    None => pooled,
                };
                let (fs, ws) = (tape.value(f).shape(), tape.value(self.weight_predictor.weight).shape());
                if fs.1 != ws.1 {
                    return Err(Error::Config(format!(
                        "pooled question has {} dims, weight predictor expects {}",
                        fs.1, ws.1
                    )));
                }
                let logits = self.weight_predictor.apply(tape, f)?;
                tape.softmax_rows_masked(logits, &control.enabled)
            }
            GateMode::Uniform => {
                let zeros = tape.leaf(Matrix::zeros(1, 3));
                tape.softmax_rows_masked(zeros, &control.enabled)
            }
            GateMode::Forced(w) => {
                let mut masked = w.0;
                for (v, &on) in masked.iter_mut().zip(&control.enabled) {
                    if !on {
                        *v = 0.0;
                    }
                }
                let total: f64 = masked.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Config("forced weights vanish on enabled modalities".into()));
                }
                masked.iter_mut().for_each(|v| *v /= total);
                Ok(tape.leaf(Matrix::row_vector(&masked)))
            }
        }
    }

    pub fn fuse(&self, tape: &mut Tape, x: &FusionInputs, control: &GateControl) -> Result<FusionNodes> {
        let d = tape.value(x.image).cols();
        if tape.value(x.question).rows() == 0 {
            return Err(Error::Usage("question has no tokens".into()));
        }
        let pooled = tape.mean_rows(x.question)?;
        let weights = self.gate(tape, pooled, control)?;

        let streams = [x.lidar, x.occ, x.desc];
        let mut per_modality = [x.image; 3];
        let mut mixed: Option<NodeId> = None;
        for m in Modality::ALL {
            let e = tape.cross_attention(x.image, streams[m.index()], d)?;
            per_modality[m.index()] = e;
            let weighted = tape.scale_by_entry(e, weights, m.index())?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let mixed = mixed.expect("three modalities");
        let normed = tape.layer_norm(mixed, self.ln_eps);
        let fused = tape.add(x.image, normed)?;
        Ok(FusionNodes {
            fused,
            weights,
            per_modality,
            mixed,
        })
    }
}
