use canopy_tensor::{AdamConfig, EarlyStopping, Graph, NormMode, OneCycle, OptimizerState, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::Model;
use crate::error::{Error, Result};
use crate::pipeline::PatchBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping; `None` runs
    /// every epoch.
    pub patience: Option<usize>,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            weight_decay: 1e-4,
            patience: Some(5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Pixel-weighted mean of the mini-batch losses, m².
    pub train_loss: f64,
    /// Masked-MSE pooled over all validation pixels (eval mode), m².
    pub val_loss: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub selected_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Rows `idx` of a batch.
pub(crate) fn gather<T: Real>(batch: &PatchBatch<T>, idx: &[usize]) -> Result<PatchBatch<T>> {
    let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let shape = t.shape();
        let row: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        Ok(Tensor::from_vec(&out_shape, data)?)
    };
    Ok(PatchBatch {
        features: pick(&batch.features)?,
        reference: pick(&batch.reference)?,
        mask: pick(&batch.mask)?,
    })
}

/// Mean and population standard deviation of reference heights under the mask.
pub(crate) fn target_moments<T: Real>(batch: &PatchBatch<T>) -> Option<(f64, f64)> {
    let vals: Vec<f64> = batch
        .reference
        .data()
        .iter()
        .zip(batch.mask.data())
        .filter(|(_, &m)| m == T::one())
        .map(|(r, _)| r.to_f64_lossy())
        .collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Eval-mode masked-MSE pooled over every valid pixel of `batch`.
pub fn evaluate_loss<T: Real>(model: &mut Model<T>, batch: &PatchBatch<T>, chunk: usize) -> Result<f64> {
    let n = batch.len();
    let mut sq = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = gather(batch, &idx)?;
        let pixels = part.valid_pixels();
        if pixels == 0 {
            continue;
        }
        let mut running = std::mem::take(&mut model.running);
        let mut g = Graph::new();
        let x = g.input(part.features.clone());
        let pred = model.forward_with(&mut g, &model.params, Some(&mut running), x, NormMode::Eval);
        model.running = running;
        let loss = g.masked_mse(pred?, &part.reference, &part.mask)?;
        sq += g.value(loss).item().to_f64_lossy() * pixels as f64;
        count += pixels;
    }
    if count == 0 {
        return Err(Error::Data("no valid reference pixels to evaluate".into()));
    }
    Ok(sq / count as f64)
}

/// Adam with decoupled weight decay under a one-cycle schedule spanning
/// `epochs * ceil(n / batch_size)` steps. The output scaling is set from the
/// training targets first. After every epoch the validation loss is logged
/// and the parameters of the best epoch so far are kept; those are restored
/// on return.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &PatchBatch<T>,
    val_set: &PatchBatch<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be nonempty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Usage("batch size and epoch count must be positive".into()));
    }
    let (mean, std) =
        target_moments(train_set).ok_or_else(|| Error::Data("training set has no valid reference pixels".into()))?;
    model.target_mean = mean;
    model.target_std = if std > 1e-6 { std } else { 1.0 };

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let schedule = OneCycle::new(config.lr, config.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopper = EarlyStopping::new(config.patience.unwrap_or(usize::MAX));
    let mut best = (model.params.clone(), model.running.clone());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sq = 0.0;
        let mut count = 0usize;
        let mut lr = config.lr;
        for idx in order.chunks(config.batch_size) {
            lr = schedule.lr(step)?;
            step += 1;
            let batch = gather(train_set, idx)?;
            let pixels = batch.valid_pixels();
            if pixels == 0 {
                continue;
            }
            let mut running = std::mem::take(&mut model.running);
            let mut g = Graph::new();
            let x = g.input(batch.features.clone());
            let pred = model.forward_with(&mut g, &model.params, Some(&mut running), x, NormMode::Train);
            model.running = running;
            let loss = g.masked_mse(pred?, &batch.reference, &batch.mask)?;
            let value = g.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("training loss {value} at step {step}"),
                });
            }
            model.params.zero_grad();
            g.backward_into(loss, &mut model.params)?;
            opt.adam_step(&mut model.params, lr)?;
            sq += value * pixels as f64;
            count += pixels;
        }
        let train_loss = if count > 0 { sq / count as f64 } else { f64::NAN };
        let val_loss = evaluate_loss(model, val_set, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.2e}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if stopper.observe(epoch, val_loss) {
            best = (model.params.clone(), model.running.clone());
        }
        if config.patience.is_some() && stopper.should_stop() {
            stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }
    let (selected_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    (model.params, model.running) = best;
    model.params.zero_grad();
    Ok(TrainOutcome {
        log,
        selected_epoch,
        best_val_loss,
        stopped_early,
    })
}
