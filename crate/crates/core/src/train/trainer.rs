//! Epoch loop shared by full-precision and quantization-aware training.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::frontend::augment::AugmentConfig;
use crate::io::container::Container;
use crate::io::model::{graph_from_container, model_container};
use crate::nn::{count_ops, count_params, ModelGraph, Mode};
use crate::quant::{add_bitwidth_penalty_grad, calibrate_ranges, lr_scales, summarize_bitwidths, trained_bitwidth_loss};
use crate::seed;
use crate::tensor::Tensor;
use crate::train::batch::{make_batch, shuffled_batches};
use crate::train::eval::{evaluate, Evaluation, EVAL_BATCH};
use crate::train::loss::cross_entropy;
use crate::train::optim::{LrSchedule, Optimizer, OptimizerConfig};

pub const CHECKPOINT_KIND: &str = "checkpoint";

fn default_patience() -> usize {
    15
}
fn default_bits_lr_scale() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without a new best validation accuracy before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Trained-bit-width penalty weights; zero for fixed or no quantization.
    #[serde(default)]
    pub lambda_w: f64,
    #[serde(default)]
    pub lambda_a: f64,
    /// Learning-rate multiplier for continuous bit-widths.
    #[serde(default = "default_bits_lr_scale")]
    pub bits_lr_scale: f64,
    /// Initialize trainable activation ranges from one pass over the
    /// training set before the first epoch.
    #[serde(default = "default_true")]
    pub calibrate: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::default(),
            batch_size,
            epochs,
            seed: 0,
            patience: default_patience(),
            augment: None,
            lambda_w: 0.0,
            lambda_a: 0.0,
            bits_lr_scale: default_bits_lr_scale(),
            calibrate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lambda_w >= 0.0 && self.lambda_a >= 0.0 && self.bits_lr_scale >= 0.0) {
            return Err(Error::Config("lambda_w, lambda_a and bits_lr_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub params: u64,
    pub ops: u64,
    pub b_w: Option<f64>,
    pub b_a: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub format_version: u32,
    pub tag: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub valid_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub params: u64,
    pub ops: u64,
    pub b_w: Option<f64>,
    pub b_a: Option<f64>,
    pub ops_convention: String,
}

/// Resumable loop state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub next_epoch: usize,
    pub optimizer: Optimizer,
    pub best_valid: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub calibrated: bool,
}

impl TrainerState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            next_epoch: 0,
            optimizer: Optimizer::new(config.optimizer),
            best_valid: f64::NEG_INFINITY,
            best_epoch: 0,
            history: Vec::new(),
            calibrated: false,
        }
    }
}

/// Current weights, the loop state and the best-so-far weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelGraph<f32>,
    pub best: ModelGraph<f32>,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn fresh(model: &ModelGraph<f32>, config: &TrainConfig) -> Self {
        Self {
            model: model.clone(),
            best: model.clone(),
            state: TrainerState::new(config),
        }
    }

    /// Two model containers (current and best) behind one file; the loop
    /// state, optimizer moments included, lives in the header.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = model_container(&self.model, Value::Null)?;
        c.kind = CHECKPOINT_KIND.into();
        let best = model_container(&self.best, Value::Null)?;
        c.meta.insert("trainer".into(), serde_json::to_value(&self.state)?);
        c.meta.insert("best_layers".into(), best.meta["layers"].clone());
        for t in best.tensors {
            c.tensors.push(crate::io::NamedTensor {
                name: format!("best.{}", t.name),
                ..t
            });
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a `{CHECKPOINT_KIND}` container, found `{}`", c.kind)));
        }
        let model = graph_from_container(c)?;
        let mut best_c = Container::new("model");
        best_c.meta.insert("input_shape".into(), c.meta["input_shape"].clone());
        best_c.meta.insert("layers".into(), c.meta_field::<Value>("best_layers")?);
        for t in &c.tensors {
            if let Some(name) = t.name.strip_prefix("best.") {
                best_c.tensors.push(crate::io::NamedTensor {
                    name: name.to_string(),
                    ..t.clone()
                });
            }
        }
        Ok(Self {
            model,
            best: graph_from_container(&best_c)?,
            state: c.meta_field("trainer")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

fn train_epoch(
    model: &mut ModelGraph<f32>,
    data: &Splits,
    config: &TrainConfig,
    opt: &mut Optimizer,
    scales: &[f64],
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let mut rng = seed::stream(config.seed, seed::EPOCH, epoch as u64);
    let quant_penalty = config.lambda_w > 0.0 || config.lambda_a > 0.0;
    let mut total = 0.0;
    for idx in shuffled_batches(data.train.len(), config.batch_size, &mut rng) {
        let (x, y) = make_batch::<f32, _>(&data.train, &idx, config.augment.as_ref(), &data.noise, &mut rng)?;
        let (logits, cache) = model.forward(&x, Mode::Train)?;
        let (ce, g) = cross_entropy(&logits, &y)?;
        let loss = trained_bitwidth_loss(ce, model, config.lambda_w, config.lambda_a);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let mut grads = model.backward(&cache, &g)?;
        if quant_penalty {
            add_bitwidth_penalty_grad(model, &mut grads, config.lambda_w, config.lambda_a);
        }
        let flat: Vec<Option<Tensor<f32>>> = grads.flatten(model).into_iter().map(Some).collect();
        opt.step_scaled(lr, model.trainables_mut(), &flat, scales)?;
        model.project_quantizers();
        if !model.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        total += loss * idx.len() as f64;
    }
    Ok(total / data.train.len() as f64)
}

fn eval_or_nan(model: &mut ModelGraph<f32>, clips: &[crate::data::LabeledClip]) -> Result<Option<Evaluation>> {
    if clips.is_empty() {
        return Ok(None);
    }
    evaluate(model, clips).map(Some)
}

/// Runs epochs `checkpoint.state.next_epoch..config.epochs` with early
/// stopping. On return the checkpoint's `model` holds the best weights seen.
/// Divergence restores the best weights and returns `Error::Diverged`.
pub fn train(
    mut checkpoint: Checkpoint,
    data: &Splits,
    config: &TrainConfig,
    tag: &str,
    mut on_epoch: impl FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Input("training needs non-empty train and validation sets".into()));
    }
    let params = count_params(&checkpoint.model);
    let ops = count_ops(&checkpoint.model)?;
    let quantized = checkpoint
        .model
        .layers
        .iter()
        .any(|l| l.weight_quant.is_some() || l.act_quant.is_some());
    if config.calibrate && quantized && !checkpoint.state.calibrated {
        calibrate_ranges(&mut checkpoint.model, &data.train, EVAL_BATCH)?;
        checkpoint.state.calibrated = true;
    }
    let scales = lr_scales(&checkpoint.model, config.bits_lr_scale);
    let start = Instant::now();

    while checkpoint.state.next_epoch < config.epochs {
        let epoch = checkpoint.state.next_epoch;
        let lr = config.schedule.lr(config.optimizer.lr(), epoch);
        let step = train_epoch(
            &mut checkpoint.model,
            data,
            config,
            &mut checkpoint.state.optimizer,
            &scales,
            lr,
            epoch,
        );
        let train_loss = match step {
            Ok(l) => l,
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {
                checkpoint.model = checkpoint.best.clone();
                return Err(Error::Diverged { epoch });
            }
            Err(e) => return Err(e),
        };
        let valid = evaluate(&mut checkpoint.model, &data.valid)?;
        let test = eval_or_nan(&mut checkpoint.model, &data.test)?;
        let summary = quantized.then(|| summarize_bitwidths(&checkpoint.model));
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss,
            valid_accuracy: valid.accuracy,
            test_accuracy: test.map(|t| t.accuracy),
            params,
            ops,
            b_w: summary.as_ref().map(|s| s.b_w),
            b_a: summary.as_ref().map(|s| s.b_a),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if valid.accuracy > checkpoint.state.best_valid {
            checkpoint.state.best_valid = valid.accuracy;
            checkpoint.state.best_epoch = epoch;
            checkpoint.best = checkpoint.model.clone();
        }
        checkpoint.state.history.push(m.clone());
        checkpoint.state.next_epoch = epoch + 1;
        on_epoch(&m, &checkpoint)?;
        if epoch - checkpoint.state.best_epoch >= config.patience {
            break;
        }
    }

    let mut best = checkpoint.best.clone();
    let valid = evaluate(&mut best, &data.valid)?;
    let test = eval_or_nan(&mut best, &data.test)?;
    let summary = quantized.then(|| summarize_bitwidths(&best));
    let metrics = RunMetrics {
        format_version: 1,
        tag: tag.to_string(),
        epochs: checkpoint.state.history.clone(),
        best_epoch: checkpoint.state.best_epoch,
        valid_accuracy: valid.accuracy,
        test_accuracy: test.as_ref().map(|t| t.accuracy),
        confusion: test.map(|t| t.confusion),
        params,
        ops,
        b_w: summary.as_ref().map(|s| s.b_w),
        b_a: summary.as_ref().map(|s| s.b_a),
        ops_convention: crate::nn::OPS_CONVENTION.to_string(),
    };
    checkpoint.model = best;
    Ok(TrainOutcome { metrics, checkpoint })
}
