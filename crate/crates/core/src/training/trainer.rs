use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, Metrics};
use crate::data::Dataset;
use crate::model::{AttentionMode, BrainAgeModel, ModelConfig};
use crate::{Error, Result, Tensor};

const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mae,
    Mse,
}

impl Loss {
    /// Mean loss over the batch and its gradient with respect to each prediction.
    fn eval(self, pred: &[f32], target: &[f64]) -> (f64, Vec<f32>) {
        let n = pred.len() as f64;
        let mut total = 0.0;
        let grad = pred
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let r = p as f64 - t;
                match self {
                    Loss::Mae => {
                        total += r.abs();
                        (if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }) / n
                    }
                    Loss::Mse => {
                        total += r * r;
                        2.0 * r / n
                    }
                }
            })
            .map(|g| g as f32)
            .collect();
        (total / n, grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    pub shuffle: bool,
    /// Start the output bias at the mean training age.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 0,
            loss: Loss::Mae,
            shuffle: true,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,train_mae,val_mae,loss`; `val_mae` is empty without a validation set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mae,val_mae,loss\n");
        for r in &self.epochs {
            let val = r.val_mae.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(out, "{},{:.6},{},{:.6}", r.epoch, r.train_mae, val, r.loss).expect("string write");
        }
        out
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_shape(model: &BrainAgeModel, data: &Dataset) -> Result<()> {
    if model.config().input_shape != data.shape {
        return Err(Error::Shape(format!(
            "dataset {} has volumes of shape {:?}, model expects {:?}",
            data.name,
            data.shape,
            model.config().input_shape
        )));
    }
    Ok(())
}

/// Evaluation-mode predictions in dataset order.
pub fn predict(model: &BrainAgeModel, data: &Dataset) -> Result<Vec<f64>> {
    check_shape(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let p = model.predict(&data.batch(chunk)?)?;
        out.extend(p.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

pub fn evaluate(model: &BrainAgeModel, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    Metrics::compute(&predict(model, data)?, &data.ages())
}

/// Trains in place with Adam. When `validation` is given its MAE is logged
/// each epoch; it never influences the parameters.
pub fn train(
    model: &mut BrainAgeModel,
    data: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    check_shape(model, data)?;
    if let Some(v) = validation {
        check_shape(model, v)?;
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let ages = data.ages();
    if config.init_output_bias {
        let mean = ages.iter().sum::<f64>() / ages.len() as f64;
        let head = model.dense.last_mut().expect("dense head");
        head.bias = Tensor::full(&[1], mean as f32);
    }

    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, &model.parameters());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x5348_5546, 0));
    let mut history = History::default();

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut abs_err = 0.0;
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = data.batch(chunk)?;
            let targets: Vec<f64> = chunk.iter().map(|&i| ages[i]).collect();
            let fwd = model.forward(&batch, true, mix(config.seed, epoch as u64 + 1, b as u64))?;
            let (loss, grad) = config.loss.eval(fwd.predictions.data(), &targets);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch: epoch + 1, batch: b + 1 });
            }
            abs_err += fwd
                .predictions
                .data()
                .iter()
                .zip(&targets)
                .map(|(&p, t)| (p as f64 - t).abs())
                .sum::<f64>();
            loss_sum += loss * chunk.len() as f64;

            let back = model.backward(&fwd.caches, &Tensor::new(&[chunk.len()], grad)?)?;
            state.step(model.parameters_mut(), &back.grads.tensors())?;
        }
        let n = data.len() as f64;
        let val_mae = validation.map(|v| evaluate(model, v)).transpose()?.map(|m| m.mae);
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_mae: abs_err / n,
            val_mae,
            loss: loss_sum / n,
        });
    }
    Ok(history)
}

/// Evaluation of a trained model on a cohort it never saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub trained_on: String,
    pub evaluated_on: String,
    pub cross: bool,
    pub metrics: Metrics,
}

impl CrossReport {
    pub fn to_kv(&self) -> String {
        format!(
            "trained_on={}\nevaluated_on={}\ncross={}\n{}",
            self.trained_on,
            self.evaluated_on,
            self.cross,
            self.metrics.to_kv()
        )
    }
}

/// Evaluates without any parameter update.
pub fn cross_evaluate(model: &BrainAgeModel, trained_on: &str, data: &Dataset) -> Result<CrossReport> {
    Ok(CrossReport {
        trained_on: trained_on.to_string(),
        evaluated_on: data.name.clone(),
        cross: true,
        metrics: evaluate(model, data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub shared: Metrics,
    pub per_layer: Metrics,
    /// Shared MAE minus per-layer MAE.
    pub delta_mae: f64,
}

impl AblationReport {
    pub fn to_kv(&self) -> String {
        format!(
            "shared_mae={:.4}\nshared_rmse={:.4}\nper_layer_mae={:.4}\nper_layer_rmse={:.4}\ndelta_mae={:.4}\n",
            self.shared.mae, self.shared.rmse, self.per_layer.mae, self.per_layer.rmse, self.delta_mae
        )
    }
}

/// Trains a shared-attention model and an untied model that starts from
/// identical values, then evaluates both on `test`. With zero epochs the
/// initial models are evaluated as-is.
pub fn ablate_sharing(
    train_set: &Dataset,
    test: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<AblationReport> {
    let base = ModelConfig {
        attention_mode: AttentionMode::Shared,
        ..model_config.clone()
    };
    let shared = BrainAgeModel::build(&base, config.seed)?;
    let untied = shared.with_attention_mode(AttentionMode::PerLayer)?;
    let mut results = Vec::with_capacity(2);
    for mut model in [shared, untied] {
        if config.epochs > 0 {
            train(&mut model, train_set, None, config)?;
        }
        results.push(evaluate(&model, test)?);
    }
    let per_layer = results.pop().expect("two runs");
    let shared = results.pop().expect("two runs");
    Ok(AblationReport {
        delta_mae: shared.mae - per_layer.mae,
        shared,
        per_layer,
    })
}
