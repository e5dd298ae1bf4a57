use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::tmm::{GateControl, Modality};

use super::config::{RunConfig, Schedule};
use super::model::{Model, RawSample};
use super::task::{make_split, Example, Prototypes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the per-sample losses seen during the epoch, summed in
    /// sample order.
    pub loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `mean_weights[q][m]`: mean ω of modality `m` on test samples whose
    /// relevant modality is `q`.
    pub mean_weights: [[f64; 3]; 3],
    /// Test accuracy with the relevant modality's gate masked. `None` when
    /// masking it would leave no enabled modality.
    pub masked_accuracy: Option<f64>,
    pub param_count: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// Mean weight of the relevant modality per query type.
    pub fn relevant_weights(&self) -> [f64; 3] {
        [0, 1, 2].map(|q| self.mean_weights[q][q])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&format!("epoch {:>4}  loss {:.6}  lr {:.3e}\n", e.epoch, e.loss, e.learning_rate));
        }
        s.push_str(&format!("train accuracy  {:.4}\n", self.train_accuracy));
        s.push_str(&format!("test accuracy   {:.4}\n", self.test_accuracy));
        match self.masked_accuracy {
            Some(a) => s.push_str(&format!("masked accuracy {a:.4}\n")),
            None => s.push_str("masked accuracy n/a\n"),
        }
        s.push_str("query   w_lidar  w_occ    w_desc\n");
        for m in Modality::ALL {
            let w = self.mean_weights[m.index()];
            s.push_str(&format!("{:<7} {:.4}   {:.4}   {:.4}\n", m.name(), w[0], w[1], w[2]));
        }
        s
    }
}

pub fn learning_rate(config: &RunConfig, epoch: usize) -> f64 {
    let o = &config.optimizer;
    match o.schedule {
        Schedule::Constant => o.learning_rate,
        Schedule::Cosine => {
            let t = epoch as f64 / o.epochs.max(1) as f64;
            0.5 * o.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Train and test splits drawn from `config.seed`.
pub struct ToyData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn toy_data(config: &RunConfig) -> Result<ToyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let protos = Prototypes::random(&config.dims, &mut rng);
    let train = make_split(&config.dims, &config.task, &protos, config.task.train_samples, &mut rng)?;
    let test = make_split(&config.dims, &config.task, &protos, config.task.test_samples, &mut rng)?;
    Ok(ToyData { train, test })
}

fn sample_loss_and_grads(
    model: &Model,
    sample: &RawSample,
    label: usize,
    control: &GateControl,
    use_cma: bool,
    acc: &mut [Matrix],
) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = model.bind(&mut tape)?;
    let f = model.forward(&nodes, &mut tape, sample, control, use_cma)?;
    let loss = tape.cross_entropy(f.logits, label)?;
    let value = tape.value(loss).as_slice()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    for (i, a) in acc.iter_mut().enumerate() {
        a.axpy(1.0, grads.get(NodeId(i)));
    }
    Ok(value)
}

/// Fraction of `examples` classified correctly under the gate `control_for`
/// returns per example.
pub fn accuracy(
    model: &Model,
    examples: &[Example],
    use_cma: bool,
    control_for: impl Fn(&Example) -> GateControl,
) -> Result<f64> {
    let mut correct = 0usize;
    for ex in examples {
        if model.predict(&ex.sample, &control_for(ex), use_cma)?.class == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

pub fn train_toy(config: &RunConfig) -> Result<(TrainReport, Model)> {
    config.validate()?;
    let data = toy_data(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut model = Model::new(config, &mut rng)?;
    let report = train_on(config, &data, &mut model, &mut rng)?;
    Ok((report, model))
}

pub fn train_on(
    config: &RunConfig,
    data: &ToyData,
    model: &mut Model,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    let control = Model::control(config);
    let use_cma = config.modules.cma;
    let opt = &config.optimizer;
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = vec![0.0; n];
    let mut epochs = Vec::with_capacity(opt.epochs);
    let shapes: Vec<(usize, usize)> = model.params_mut().iter().map(|m| m.shape()).collect();

    for epoch in 0..opt.epochs {
        let lr = learning_rate(config, epoch);
        order.shuffle(rng);
        for batch in order.chunks(opt.batch_size) {
            let mut acc: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            for &i in batch {
                let ex = &data.train[i];
                let l = sample_loss_and_grads(model, &ex.sample, ex.label, &control, use_cma, &mut acc)?;
                if !l.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: format!("non-finite loss on sample {i}"),
                    });
                }
                losses[i] = l;
            }
            let scale = 1.0 / batch.len() as f64;
            for (p, g) in model.params_mut().into_iter().zip(&acc) {
                let decay = 1.0 - lr * opt.weight_decay;
                for (v, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *v = *v * decay - lr * scale * d;
                }
                if !p.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: "parameters diverged".into(),
                    });
                }
            }
        }
        let loss = losses.iter().sum::<f64>() / n as f64;
        epochs.push(EpochStats {
            epoch,
            loss,
            learning_rate: lr,
        });
    }

    let train_accuracy = accuracy(model, &data.train, use_cma, |_| control)?;
    let test_accuracy = accuracy(model, &data.test, use_cma, |_| control)?;

    let mut sums = [[0.0; 3]; 3];
    let mut counts = [0usize; 3];
    for ex in &data.test {
        let p = model.predict(&ex.sample, &control, use_cma)?;
        let q = ex.relevant.index();
        counts[q] += 1;
        for m in 0..3 {
            sums[q][m] += p.weights[m];
        }
    }
    let mean_weights = [0, 1, 2].map(|q| sums[q].map(|s| s / counts[q].max(1) as f64));

    let maskable = data.test.iter().all(|ex| {
        let mut en = control.enabled;
        en[ex.relevant.index()] = false;
        en.iter().any(|&e| e)
    });
    let masked_accuracy = if maskable {
        Some(accuracy(model, &data.test, use_cma, |ex| {
            let mut c = control;
            c.enabled[ex.relevant.index()] = false;
            c
        })?)
    } else {
        None
    };

    let param_count = shapes.len();
    Ok(TrainReport {
        seed: config.seed,
        epochs,
        train_accuracy,
        test_accuracy,
        mean_weights,
        masked_accuracy,
        param_count,
    })
}
