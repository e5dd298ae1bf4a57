//! Synthetic routing task. Each sample hides its class label in one
//! modality's tokens (a noisy class prototype). The other two modalities
//! carry noise: with `distractors` on, a noisy prototype of an independently
//! drawn label, otherwise unit Gaussian noise. The question marks the
//! relevant modality with a one-hot channel in its first three columns.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tmm::Modality;

use super::config::{Dims, TaskConfig};
use super::model::RawSample;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample: RawSample,
    pub relevant: Modality,
    pub label: usize,
}

/// Class prototypes per modality, shared by the train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// Indexed by [`Modality::index`]; `classes x width`.
    pub per_modality: [Matrix; 3],
}

impl Prototypes {
    pub fn random<R: Rng + ?Sized>(dims: &Dims, rng: &mut R) -> Self {
        let widths = [dims.lidar, dims.occ, dims.desc];
        Self {
            per_modality: widths.map(|w| Matrix::random_normal(dims.classes, w, 0.0, 1.0, rng)),
        }
    }
}

fn noise<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    Matrix::random_normal(rows, cols, 0.0, std, rng)
}

pub fn make_example<R: Rng + ?Sized>(
    dims: &Dims,
    task: &TaskConfig,
    protos: &Prototypes,
    relevant: Modality,
    label: usize,
    rng: &mut R,
) -> Result<Example> {
    if label >= dims.classes {
        return Err(Error::Usage(format!("label {label} out of range for {} classes", dims.classes)));
    }
    let widths = [dims.lidar, dims.occ, dims.desc];
    let tokens = [dims.lidar_tokens, dims.occ_tokens, dims.desc_tokens];
    let image = noise(dims.image_tokens, dims.latent, task.image_scale, rng);
    let mut streams = Vec::with_capacity(3);
    for m in Modality::ALL {
        let i = m.index();
        let class = if m == relevant {
            Some(label)
        } else if task.distractors {
            Some(rng.random_range(0..dims.classes))
        } else {
            None
        };
        let x = match class {
            Some(c) => {
                let proto = protos.per_modality[i].row(c);
                let mut x = noise(tokens[i], widths[i], task.feature_noise, rng);
                for r in 0..tokens[i] {
                    for (v, p) in x.row_mut(r).iter_mut().zip(proto) {
                        *v += p;
                    }
                }
                x
            }
            None => noise(tokens[i], widths[i], 1.0, rng),
        };
        streams.push(x);
    }
    let mut question = noise(dims.question_tokens, dims.question, task.question_noise, rng);
    for r in 0..dims.question_tokens {
        question.row_mut(r)[relevant.index()] += 1.0;
    }
    let desc = streams.pop().expect("desc");
    let occ = streams.pop().expect("occ");
    let lidar = streams.pop().expect("lidar");
    Ok(Example {
        sample: RawSample {
            image,
            lidar,
            occ,
            desc,
            question,
        },
        relevant,
        label,
    })
}

/// `n` examples with the relevant modality cycling lidar, occ, desc and
/// uniformly drawn labels.
pub fn make_split<R: Rng + ?Sized>(
    dims: &Dims,
    task: &TaskConfig,
    protos: &Prototypes,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..n)
        .map(|i| {
            let relevant = Modality::ALL[i % 3];
            let label = rng.random_range(0..dims.classes);
            make_example(dims, task, protos, relevant, label, rng)
        })
        .collect()
}
