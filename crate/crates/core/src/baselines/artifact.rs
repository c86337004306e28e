use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::forest::{Node, RandomForest, RfConfig, Tree};
use super::knn::{knn_predict, KnnModel};
use super::mlr::{mlr_predict, MlrModel};
use super::table::{feature_rows, PixelTable};
use super::rf_predict;
use crate::container;
use crate::error::{Error, Result};
use crate::pipeline::{conform_stack, BandStats, DatasetSplit, FeatureStack};
use crate::raster::Raster;

pub const BASELINE_MAGIC: &[u8; 8] = b"CNPYBSL1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Mlr,
    Knn,
    Rf,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Mlr, BaselineKind::Knn, BaselineKind::Rf];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Mlr => "mlr",
            BaselineKind::Knn => "knn",
            BaselineKind::Rf => "rf",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlr" | "linear" => Ok(BaselineKind::Mlr),
            "knn" => Ok(BaselineKind::Knn),
            "rf" | "forest" | "random-forest" => Ok(BaselineKind::Rf),
            other => Err(Error::Config(format!("unknown baseline '{other}' (mlr, knn, rf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineModel {
    Mlr(MlrModel),
    Knn(KnnModel),
    Rf(RandomForest),
}

impl BaselineModel {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineModel::Mlr(_) => BaselineKind::Mlr,
            BaselineModel::Knn(_) => BaselineKind::Knn,
            BaselineModel::Rf(_) => BaselineKind::Rf,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            BaselineModel::Mlr(m) => m.coefficients.len(),
            BaselineModel::Knn(m) => m.table.n_features(),
            BaselineModel::Rf(m) => m.n_features,
        }
    }

    pub fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        match self {
            BaselineModel::Mlr(m) => mlr_predict(m, rows),
            BaselineModel::Knn(m) => knn_predict(m, rows),
            BaselineModel::Rf(m) => rf_predict(m, rows),
        }
    }
}

/// A fitted baseline with the provenance a checkpoint carries.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineArtifact {
    pub model: BaselineModel,
    pub band_tags: Vec<String>,
    pub band_stats: Vec<BandStats>,
    pub combo: String,
    pub resolution: u32,
    pub scene_fingerprint: String,
    pub split: Option<DatasetSplit>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineHeader {
    format_version: u32,
    kind: BaselineKind,
    n_features: usize,
    band_tags: Vec<String>,
    band_stats: Vec<BandStats>,
    combo: String,
    resolution: u32,
    scene_fingerprint: String,
    split: Option<DatasetSplit>,
    seed: u64,
    dtype: String,
    /// mlr: intercept then coefficients. knn: `rows x n_features` features
    /// then `rows` targets. rf: per tree, per node the quadruple
    /// (feature or -1 for a leaf, left, right, threshold or leaf mean).
    layout: String,
    ridge: bool,
    k: usize,
    rows: usize,
    rf: Option<RfConfig>,
    oob_rmse: Option<f64>,
    tree_nodes: Vec<usize>,
}

impl BaselineArtifact {
    pub fn validate(&self) -> Result<()> {
        let d = self.model.n_features();
        if self.band_tags.len() != d || self.band_stats.len() != d {
            return Err(Error::Config(format!(
                "baseline has {} band tags and {} band statistics for {d} features",
                self.band_tags.len(),
                self.band_stats.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut h = BaselineHeader {
            format_version: FORMAT_VERSION,
            kind: self.model.kind(),
            n_features: self.model.n_features(),
            band_tags: self.band_tags.clone(),
            band_stats: self.band_stats.clone(),
            combo: self.combo.clone(),
            resolution: self.resolution,
            scene_fingerprint: self.scene_fingerprint.clone(),
            split: self.split.clone(),
            seed: self.seed,
            dtype: "f64le".into(),
            layout: String::new(),
            ridge: false,
            k: 0,
            rows: 0,
            rf: None,
            oob_rmse: None,
            tree_nodes: Vec::new(),
        };
        let mut values: Vec<f64> = Vec::new();
        match &self.model {
            BaselineModel::Mlr(m) => {
                h.layout = "intercept,coefficients".into();
                h.ridge = m.ridge;
                values.push(m.intercept);
                values.extend(&m.coefficients);
            }
            BaselineModel::Knn(m) => {
                h.layout = "features,targets".into();
                h.k = m.k;
                h.rows = m.table.len();
                values.extend(m.table.features());
                values.extend(m.table.targets());
            }
            BaselineModel::Rf(f) => {
                h.layout = "trees:feature,left,right,value".into();
                h.rf = Some(f.config);
                h.oob_rmse = f.oob_rmse;
                h.tree_nodes = f.trees.iter().map(Tree::n_nodes).collect();
                for t in &f.trees {
                    for n in &t.nodes {
                        let feature = if n.feature == u32::MAX { -1.0 } else { n.feature as f64 };
                        values.extend([feature, n.left as f64, n.right as f64, n.value]);
                    }
                }
            }
        }
        container::write(path, BASELINE_MAGIC, &h, &container::f64_payload(values.into_iter()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (BaselineHeader, Vec<u8>) = container::read(path, BASELINE_MAGIC)?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if h.format_version != FORMAT_VERSION || h.dtype != "f64le" {
            return Err(bad(format!("unsupported version/dtype {}/{}", h.format_version, h.dtype)));
        }
        let values = container::decode_f64(&payload);
        let d = h.n_features;
        let expected = match h.kind {
            BaselineKind::Mlr => 1 + d,
            BaselineKind::Knn => h.rows * (d + 1),
            BaselineKind::Rf => 4 * h.tree_nodes.iter().sum::<usize>(),
        };
        if payload.len() != 8 * expected {
            return Err(bad(format!("payload holds {} bytes, expected {}", payload.len(), 8 * expected)));
        }
        let model = match h.kind {
            BaselineKind::Mlr => BaselineModel::Mlr(MlrModel {
                intercept: values[0],
                coefficients: values[1..].to_vec(),
                ridge: h.ridge,
            }),
            BaselineKind::Knn => {
                let (features, targets) = values.split_at(h.rows * d);
                let table = PixelTable::new(d, features.to_vec(), targets.to_vec()).map_err(|e| bad(e.to_string()))?;
                BaselineModel::Knn(KnnModel { k: h.k, table })
            }
            BaselineKind::Rf => {
                let mut trees = Vec::with_capacity(h.tree_nodes.len());
                let mut quads = values.chunks_exact(4);
                for &count in &h.tree_nodes {
                    let mut nodes = Vec::with_capacity(count);
                    for q in quads.by_ref().take(count) {
                        let feature = if q[0] < 0.0 { u32::MAX } else { q[0] as u32 };
                        let (left, right) = (q[1] as u32, q[2] as u32);
                        if feature != u32::MAX
                            && (feature as usize >= d || left as usize >= count || right as usize >= count)
                        {
                            return Err(bad("tree node refers outside its tree".into()));
                        }
                        nodes.push(Node {
                            feature,
                            left,
                            right,
                            value: q[3],
                        });
                    }
                    if nodes.is_empty() {
                        return Err(bad("empty tree".into()));
                    }
                    trees.push(Tree { nodes });
                }
                BaselineModel::Rf(RandomForest {
                    config: h.rf.unwrap_or_default(),
                    n_features: d,
                    trees,
                    oob_rmse: h.oob_rmse,
                })
            }
        };
        let artifact = BaselineArtifact {
            model,
            band_tags: h.band_tags,
            band_stats: h.band_stats,
            combo: h.combo,
            resolution: h.resolution,
            scene_fingerprint: h.scene_fingerprint,
            split: h.split,
            seed: h.seed,
        };
        artifact.validate().map_err(|e| bad(e.to_string()))?;
        Ok(artifact)
    }
}

/// Per-pixel prediction over the whole stack. Pixels outside the validity
/// mask or with a missing band are nodata.
pub fn predict_stack(artifact: &BaselineArtifact, stack: &FeatureStack) -> Result<Raster> {
    let stack = conform_stack(stack, &artifact.band_tags, &artifact.band_stats)?;
    let all: Vec<usize> = (0..stack.width() * stack.height()).collect();
    let (rows, kept) = feature_rows(&stack, &all);
    let mut out = Raster::filled(stack.width(), stack.height(), stack.spacing(), f64::NAN).with_role("height_pred", "m");
    if !kept.is_empty() {
        let pred = artifact.model.predict(&rows)?;
        for (i, v) in kept.into_iter().zip(pred) {
            out.values_mut()[i] = v;
        }
    }
    Ok(out)
}
