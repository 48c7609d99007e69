//! Training loop, evaluation, the learning-rate grid, and the
//! finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{evaluate, flatten_batch, loss_and_grad, ModelConfig, ModelParams};
use super::optim::{cosine_lr, AdamW};
use crate::error::Result;
use crate::tasks::{Split, TaskDataset};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.98,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(crate::error::Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(crate::error::Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub batch_index: usize,
}

/// Outcome of one run. Divergence ends the run early and is recorded, not
/// raised: an unstable configuration is itself a data point.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub metrics: Vec<EpochMetrics>,
    pub best_eval_accuracy: f64,
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub diverged: Option<Divergence>,
}

impl TrainResult {
    pub fn write_metrics_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,eval_acc")?;
        for m in &self.metrics {
            writeln!(w, "{},{},{}", m.epoch, m.loss, m.eval_acc)?;
        }
        Ok(())
    }
}

/// Deterministic training on the dataset's train split, evaluating on its
/// eval split once per epoch. Keeps the best-accuracy checkpoint. Zero
/// epochs returns initialization metrics only.
pub fn train_loop(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &TaskDataset,
) -> Result<TrainResult> {
    model_config.validate()?;
    train_config.validate()?;
    let train: Vec<_> = data.split(Split::Train).collect();
    let eval: Vec<_> = data.split(Split::Eval).collect();

    let mut params = ModelParams::init(model_config, train_config.seed)?;
    let mut opt = AdamW::new(&params, train_config.beta1, train_config.beta2, train_config.weight_decay);

    let init_acc = evaluate(&params, model_config, &eval)?;
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        loss: f64::NAN,
        eval_acc: init_acc,
    }];
    let mut best_eval_accuracy = init_acc;
    let mut best_params = params.clone();
    let mut diverged = None;

    let steps_per_epoch = train.len().div_ceil(train_config.batch_size);
    let total_steps = steps_per_epoch * train_config.epochs;
    let mut step = 0usize;

    'epochs: for epoch in 1..=train_config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(train_config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let (tokens, targets) = flatten_batch(&batch);
            let lr = if train_config.cosine_decay {
                cosine_lr(train_config.learning_rate, step, total_steps)
            } else {
                train_config.learning_rate
            };
            match loss_and_grad(&params, model_config, &tokens, &targets) {
                Ok((loss, grads)) => {
                    epoch_loss += loss;
                    batches += 1;
                    opt.update(&mut params, &grads, lr);
                }
                Err(_) => {
                    diverged = Some(Divergence { epoch, batch_index });
                    break 'epochs;
                }
            }
            if !params.all_finite() {
                diverged = Some(Divergence { epoch, batch_index });
                break 'epochs;
            }
            step += 1;
        }
        let eval_acc = evaluate(&params, model_config, &eval)?;
        metrics.push(EpochMetrics {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            eval_acc,
        });
        if eval_acc > best_eval_accuracy {
            best_eval_accuracy = eval_acc;
            best_params = params.clone();
        }
    }

    Ok(TrainResult {
        metrics,
        best_eval_accuracy,
        best_params,
        final_params: params,
        diverged,
    })
}

/// One run per learning rate; the sweep the desk experiments use.
pub fn train_grid(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &TaskDataset,
    learning_rates: &[f64],
) -> Result<Vec<(f64, TrainResult)>> {
    let mut out = Vec::with_capacity(learning_rates.len());
    for &lr in learning_rates {
        let mut cfg = train_config.clone();
        cfg.learning_rate = lr;
        out.push((lr, train_loop(model_config, &cfg, data)?));
    }
    Ok(out)
}

/// Per-parameter worst relative disagreement between reverse accumulation
/// and central finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub name: String,
    pub max_relative_error: f64,
}

/// Check every coordinate of every parameter on one batch. The relative
/// error uses `max(|fd|, |ad|, 1e-4)` as the scale so near-zero gradients
/// compare absolutely.
pub fn finite_difference_check(
    model_config: &ModelConfig,
    params: &ModelParams,
    tokens: &[&[u32]],
    targets: &[u32],
    step: f64,
) -> Result<Vec<FdReport>> {
    let (_, grads) = loss_and_grad(params, model_config, tokens, targets)?;
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut ft = super::model::forward_tape(p, model_config, tokens, super::model::EvalPath::Dense)?;
        let id = ft.tape.cross_entropy(ft.logits, targets.to_vec())?;
        Ok(ft.tape.value(id)[[0, 0]])
    };
    let mut out = Vec::new();
    for (name, grad) in &grads {
        let idx = params.index_of(name).unwrap();
        let mut worst = 0.0f64;
        let base = &params.entries[idx].value;
        for r in 0..base.nrows() {
            for c in 0..base.ncols() {
                let mut plus = params.clone();
                plus.entries[idx].value[[r, c]] += step;
                let mut minus = params.clone();
                minus.entries[idx].value[[r, c]] -= step;
                let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * step);
                let ad = grad[[r, c]];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        out.push(FdReport {
            name: name.clone(),
            max_relative_error: worst,
        });
    }
    Ok(out)
}

/// Gradient names present for a config, to assert that disabled features
/// leave no trace in the gradient set.
pub fn gradient_names(
    model_config: &ModelConfig,
    params: &ModelParams,
    tokens: &[&[u32]],
    targets: &[u32],
) -> Result<Vec<String>> {
    let (_, grads) = loss_and_grad(params, model_config, tokens, targets)?;
    Ok(grads.into_iter().map(|(n, _)| n).collect())
}

/// Checkpoint serialization: parameters as JSON.
pub fn save_checkpoint(params: &ModelParams, mut w: impl std::io::Write) -> Result<()> {
    let text = serde_json::to_string(params)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(r: impl std::io::Read) -> Result<ModelParams> {
    Ok(serde_json::from_reader(r)?)
}
