use std::path::Path;

use canopy_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::{build_model, Model};
use super::train::{EpochLog, TrainConfig};
use crate::container;
use crate::error::{Error, Result};
use crate::pipeline::{BandStats, DatasetSplit};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CNPYCKP1";
const FORMAT_VERSION: u32 = 1;

/// A trained network with everything needed to apply it to new stacks and
/// to audit how it was produced.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    /// Canonical band tags, in input-channel order.
    pub band_tags: Vec<String>,
    pub band_stats: Vec<BandStats>,
    pub combo: String,
    pub resolution: u32,
    pub scene_fingerprint: String,
    pub split: Option<DatasetSplit>,
    pub train: TrainConfig,
    pub log: Vec<EpochLog>,
    pub selected_epoch: usize,
    /// Initialization seed.
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    target_mean: f64,
    target_std: f64,
    band_tags: Vec<String>,
    band_stats: Vec<BandStats>,
    combo: String,
    resolution: u32,
    scene_fingerprint: String,
    split: Option<DatasetSplit>,
    train: TrainConfig,
    log: Vec<EpochLog>,
    selected_epoch: usize,
    seed: u64,
    dtype: String,
    /// Payload order: every parameter in this order, then for each BN layer
    /// its running mean followed by its running variance.
    params: Vec<TensorEntry>,
    bn_channels: Vec<usize>,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        let c = self.model.config.in_channels;
        if self.band_stats.len() != c || self.band_tags.len() != c {
            return Err(Error::Config(format!(
                "checkpoint has {} band tags and {} band statistics for a {c}-channel model",
                self.band_tags.len(),
                self.band_stats.len()
            )));
        }
        if let Some(best) = self.log.iter().map(|l| l.val_loss).reduce(f64::min) {
            let selected = self.log.iter().find(|l| l.epoch == self.selected_epoch);
            if selected.map_or(true, |l| l.val_loss != best) {
                return Err(Error::Config(format!(
                    "selected epoch {} does not hold the minimum validation loss",
                    self.selected_epoch
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let m = &self.model;
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: m.config,
            target_mean: m.target_mean,
            target_std: m.target_std,
            band_tags: self.band_tags.clone(),
            band_stats: self.band_stats.clone(),
            combo: self.combo.clone(),
            resolution: self.resolution,
            scene_fingerprint: self.scene_fingerprint.clone(),
            split: self.split.clone(),
            train: self.train,
            log: self.log.clone(),
            selected_epoch: self.selected_epoch,
            seed: self.seed,
            dtype: "f32le".into(),
            params: m
                .params
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            bn_channels: m.running.iter().map(|r| r.channels()).collect(),
        };
        let values = m
            .params
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .chain(m.running.iter().flat_map(|r| r.mean.iter().chain(&r.var).copied()));
        container::write(path, CHECKPOINT_MAGIC, &header, &container::f32_payload(values))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (CheckpointHeader, Vec<u8>) = container::read(path, CHECKPOINT_MAGIC)?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if h.format_version != FORMAT_VERSION || h.dtype != "f32le" {
            return Err(bad(format!("unsupported version/dtype {}/{}", h.format_version, h.dtype)));
        }
        let mut model: Model<f32> = build_model(h.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.params.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        let declared: Vec<(String, Vec<usize>)> = h.params.into_iter().map(|e| (e.name, e.shape)).collect();
        if expected != declared {
            return Err(bad("parameter layout does not match the declared architecture".into()));
        }
        let bn: Vec<usize> = model.running.iter().map(|r| r.channels()).collect();
        if bn != h.bn_channels {
            return Err(bad("batch-norm layout does not match the declared architecture".into()));
        }
        let n_values = model.params.numel() + 2 * bn.iter().sum::<usize>();
        let values = container::decode_f32(&payload);
        if payload.len() != 4 * n_values {
            return Err(bad(format!("payload holds {} bytes, expected {}", payload.len(), 4 * n_values)));
        }
        let mut rest = values.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        for p in model.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::from_vec(&shape, take(shape.iter().product()))?;
        }
        for r in model.running.iter_mut() {
            let c = r.channels();
            r.mean = take(c);
            r.var = take(c);
        }
        model.target_mean = h.target_mean;
        model.target_std = h.target_std;
        let ckpt = ModelCheckpoint {
            model,
            band_tags: h.band_tags,
            band_stats: h.band_stats,
            combo: h.combo,
            resolution: h.resolution,
            scene_fingerprint: h.scene_fingerprint,
            split: h.split,
            train: h.train,
            log: h.log,
            selected_epoch: h.selected_epoch,
            seed: h.seed,
        };
        ckpt.validate().map_err(|e| bad(e.to_string()))?;
        Ok(ckpt)
    }
}
