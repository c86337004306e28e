//! End-to-end steps shared by the command line and the benchmarks: split a
//! raw stack, normalize with training statistics, fit a network or a
//! baseline.

use serde::{Deserialize, Serialize};

use crate::baselines::{knn_fit, mlr_fit, rf_fit, BaselineArtifact, BaselineKind, BaselineModel, PixelTable, RfConfig, DEFAULT_K};
use crate::error::{Error, Result};
use crate::models::{build_model, train, ModelCheckpoint, ModelConfig, ModelKind, TrainConfig};
use crate::pipeline::{extract_batch, split_dataset, tile_patches, zscore_apply, zscore_fit, DatasetSplit, FeatureStack};

/// Non-overlapping tiles of `patch_size` split 60/20/20 by `seed`.
pub fn split_stack(stack: &FeatureStack, patch_size: usize, seed: u64) -> Result<DatasetSplit> {
    split_dataset(tile_patches(stack, patch_size, patch_size)?, patch_size, patch_size, seed)
}

/// Normalizes `raw` with statistics from the training pixels of `split`.
pub fn normalize_for(raw: &FeatureStack, split: &DatasetSplit) -> Result<FeatureStack> {
    if raw.is_normalized() {
        return Err(Error::Usage("expected an un-normalized stack".into()));
    }
    let stats = zscore_fit(raw, &split.train_pixels(raw.width()))?;
    zscore_apply(raw, &stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub levels: usize,
    pub base_channels: usize,
    pub se_reduction: usize,
}

impl NetworkSpec {
    pub fn new(kind: ModelKind) -> Self {
        let d = ModelConfig::new(kind, 1);
        Self {
            kind,
            levels: d.levels,
            base_channels: d.base_channels,
            se_reduction: d.se_reduction,
        }
    }

    pub fn config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            se_reduction: self.se_reduction,
            ..ModelConfig::new(self.kind, in_channels).with_size(self.levels, self.base_channels)
        }
    }
}

/// Builds a network initialized from `seed` and trains it on the training
/// patches of `split`, selecting on the validation patches. The shuffle
/// seed in `train_config` is used as given.
pub fn train_network(
    raw: &FeatureStack,
    split: &DatasetSplit,
    spec: &NetworkSpec,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<ModelCheckpoint> {
    let stack = normalize_for(raw, split)?;
    let size = split.patch_size;
    let train_set = extract_batch::<f32>(&stack, &split.train_patches(), size)?;
    let val_set = extract_batch::<f32>(&stack, &split.val_patches(), size)?;
    let mut model = build_model(spec.config(stack.n_bands()), seed)?;
    let outcome = train(&mut model, &train_set, &val_set, train_config)?;
    let ckpt = ModelCheckpoint {
        model,
        band_tags: stack.band_tags(),
        band_stats: stack.stats().expect("normalized").to_vec(),
        combo: stack.combo.clone(),
        resolution: stack.resolution,
        scene_fingerprint: stack.fingerprint.clone(),
        split: Some(split.clone()),
        train: *train_config,
        log: outcome.log,
        selected_epoch: outcome.selected_epoch,
        seed,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineOptions {
    pub k: usize,
    pub rf: RfConfig,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            rf: RfConfig::default(),
        }
    }
}

/// Fits a pixelwise baseline on every labelled pixel of the training patches.
pub fn fit_baseline(
    raw: &FeatureStack,
    split: &DatasetSplit,
    kind: BaselineKind,
    options: &BaselineOptions,
) -> Result<BaselineArtifact> {
    let stack = normalize_for(raw, split)?;
    let table = PixelTable::from_stack(&stack, &split.train_pixels(stack.width()))?;
    let model = match kind {
        BaselineKind::Mlr => BaselineModel::Mlr(mlr_fit(&table)?),
        BaselineKind::Knn => BaselineModel::Knn(knn_fit(&table, options.k)?),
        BaselineKind::Rf => BaselineModel::Rf(rf_fit(&table, &options.rf)?),
    };
    Ok(BaselineArtifact {
        model,
        band_tags: stack.band_tags(),
        band_stats: stack.stats().expect("normalized").to_vec(),
        combo: stack.combo.clone(),
        resolution: stack.resolution,
        scene_fingerprint: stack.fingerprint.clone(),
        split: Some(split.clone()),
        seed: options.rf.seed,
    })
}
