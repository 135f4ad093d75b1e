//! Minibatch training with Adam and a step-decay learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_fused, gradients, ModelConfig, ModelError, ModelParams, ParamGrads};
use crate::density::DensityStack;
use crate::loss::{composition_loss, LossConfig};
use crate::raster::GrayImage;

/// Optimizer and schedule settings. The learning rate is
/// `initial_lr * lr_decay^floor((epoch - 1) / lr_step_epochs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 16,
            initial_lr: 1e-3,
            lr_decay: 0.5,
            lr_step_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        debug_assert!(epoch >= 1);
        let steps = (epoch - 1) / self.lr_step_epochs.max(1);
        self.initial_lr * self.lr_decay.powi(steps as i32)
    }
}

/// One training example: a grayscale patch and its target stack.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub patch: GrayImage,
    pub target: DensityStack,
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_c_mae: f64,
}

/// Full training record; `best_epoch` is the epoch whose parameters were
/// returned (lowest validation count MAE).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Adam with standard bias correction. Operates on flat parameter vectors.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

fn validate_dataset(
    name: &'static str,
    samples: &[TrainSample],
    mcfg: &ModelConfig,
) -> Result<(), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset(name));
    }
    for s in samples {
        if s.patch.width() != mcfg.input_size || s.patch.height() != mcfg.input_size {
            return Err(ModelError::PatchSize {
                got_w: s.patch.width(),
                got_h: s.patch.height(),
                expected: mcfg.input_size,
            });
        }
        if s.target.levels() != mcfg.levels {
            return Err(ModelError::LevelsMismatch {
                model: mcfg.levels.clone(),
                loss: s.target.levels(),
            });
        }
    }
    Ok(())
}

/// Train from scratch, returning the parameters of the epoch with the lowest
/// validation count MAE together with the per-epoch history.
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<(ModelParams, TrainHistory), ModelError> {
    if tcfg.epochs == 0 {
        return Err(ModelError::BadEpochs);
    }
    if tcfg.batch_size == 0 {
        return Err(ModelError::BadBatch);
    }
    lcfg.validate()?;
    if lcfg.levels != mcfg.levels {
        return Err(ModelError::LevelsMismatch {
            model: mcfg.levels.clone(),
            loss: lcfg.levels.clone(),
        });
    }
    validate_dataset("training set", train_set, mcfg)?;
    validate_dataset("validation set", val_set, mcfg)?;

    let mut params = ModelParams::init(mcfg)?;
    let n_params = params.param_count();
    let mut adam = Adam::new(n_params, tcfg.beta1, tcfg.beta2, tcfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=tcfg.epochs {
        let lr = tcfg.learning_rate(epoch);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let mut batch_grads = ParamGrads::zeros(n_params);
            let mut batch_loss = 0.0f64;
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let sample = &train_set[i];
                let (report, grads) =
                    match gradients(&params, &sample.patch, &sample.target, lcfg) {
                        Ok(out) => out,
                        Err(ModelError::NonFinite { .. }) => {
                            return Err(ModelError::Diverged {
                                epoch,
                                batch: batch_idx,
                            })
                        }
                        Err(e) => return Err(e),
                    };
                batch_loss += report.total;
                batch_grads.add_scaled(&grads, inv);
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;
            let mut flat: Vec<f64> = params.flatten().iter().map(|&v| v as f64).collect();
            adam.step(&mut flat, &batch_grads.flat, lr);
            let narrowed: Vec<f32> = flat.iter().map(|&v| v as f32).collect();
            params.assign_flat(&narrowed);
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let mut val_loss = 0.0f64;
        let mut val_c_mae = 0.0f64;
        for sample in val_set {
            let pred = match forward_fused(&params, &sample.patch, lcfg.fusion_mode) {
                Ok(p) => p,
                Err(ModelError::NonFinite { .. }) => {
                    return Err(ModelError::Diverged { epoch, batch: 0 })
                }
                Err(e) => return Err(e),
            };
            let report = composition_loss(&pred.stack, &sample.target, lcfg)?;
            val_loss += report.total;
            val_c_mae += (pred.stack.count() - sample.target.count()).abs();
        }
        val_loss /= val_set.len() as f64;
        val_c_mae /= val_set.len() as f64;
        if !val_loss.is_finite() || !val_c_mae.is_finite() {
            return Err(ModelError::Diverged { epoch, batch: 0 });
        }

        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_c_mae,
        });
        let improved = match &best {
            None => true,
            Some((best_mae, _, _)) => val_c_mae < *best_mae,
        };
        if improved {
            best = Some((val_c_mae, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        TrainHistory {
            epochs: history,
            best_epoch,
        },
    ))
}
