//! Pooled-pixel accuracy metrics, report tables and scatter exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{predict_stack, BaselineArtifact};
use crate::error::{io_err, Error, Result};
use crate::models::{predict_raster, ModelCheckpoint};
use crate::pipeline::{ComboSpec, DatasetSplit, FeatureStack};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean of prediction minus reference, m.
    pub me: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

fn valid_pairs(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != reference.len() || pred.len() != mask.len() {
        return Err(Error::Usage(format!(
            "length mismatch: {} predictions, {} references, {} mask entries",
            pred.len(),
            reference.len(),
            mask.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = mask
        .iter()
        .zip(pred.iter().zip(reference))
        .filter(|(m, _)| **m)
        .map(|(_, (&p, &r))| (p, r))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Usage("no valid pixels to score".into()));
    }
    if pairs.iter().any(|(p, r)| !p.is_finite() || !r.is_finite()) {
        return Err(Error::Data("non-finite value under the mask".into()));
    }
    Ok(pairs)
}

pub fn mean_error(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = valid_pairs(pred, reference, mask)?;
    Ok(pairs.iter().map(|(p, r)| p - r).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = valid_pairs(pred, reference, mask)?;
    Ok((pairs.iter().map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / pairs.len() as f64).sqrt())
}

/// `1 - SS_res / SS_tot` around the valid-pixel reference mean.
pub fn r2(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = valid_pairs(pred, reference, mask)?;
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|(_, r)| r).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, r)| (r - mean) * (r - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Usage("R² is undefined for a constant reference".into()));
    }
    let ss_res: f64 = pairs.iter().map(|(p, r)| (p - r) * (p - r)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn metrics(pred: &[f64], reference: &[f64], mask: &[bool]) -> Result<Metrics> {
    Ok(Metrics {
        me: mean_error(pred, reference, mask)?,
        rmse: rmse(pred, reference, mask)?,
        r2: r2(pred, reference, mask)?,
        n: mask.iter().filter(|m| **m).count(),
    })
}

/// One evaluated (model, combo, resolution, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub combo: String,
    pub model: String,
    pub resolution_m: u32,
    pub polarizations: String,
    pub me_m: f64,
    pub rmse_m: f64,
    pub r2: f64,
    pub n_pixels: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

impl EvalReport {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>().map_err(csv_err(path))?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        if self.rows.is_empty() {
            w.write_record(REPORT_COLUMNS).map_err(csv_err(path))?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Adds `row` to the report file at `path`, creating it if needed.
    pub fn append(path: &Path, row: ReportRow) -> Result<()> {
        let mut report = if path.exists() { Self::read(path)? } else { Self::default() };
        report.rows.push(row);
        report.write(path)
    }

    /// Mean test RMSE per combo (rows) and model at resolution (columns),
    /// averaged over seeds, as aligned text.
    pub fn rmse_table(&self) -> String {
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut columns = BTreeSet::new();
        for r in &self.rows {
            let col = format!("{}@{}m", r.model, r.resolution_m);
            columns.insert(col.clone());
            cells.entry((r.combo.clone(), col)).or_default().push(r.rmse_m);
        }
        let combos: BTreeSet<&String> = cells.keys().map(|(c, _)| c).collect();
        let first = combos.iter().map(|c| c.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<first$}", "combo");
        for c in &columns {
            out.push_str(&format!("  {c:>14}"));
        }
        out.push('\n');
        for combo in combos {
            out.push_str(&format!("{combo:<first$}"));
            for c in &columns {
                match cells.get(&(combo.clone(), c.clone())) {
                    Some(v) => {
                        let mean = v.iter().sum::<f64>() / v.len() as f64;
                        out.push_str(&format!("  {:>9.3} (n={})", mean, v.len()));
                    }
                    None => out.push_str(&format!("  {:>14}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const REPORT_COLUMNS: [&str; 9] =
    ["combo", "model", "resolution_m", "polarizations", "me_m", "rmse_m", "r2", "n_pixels", "seed"];

/// Two-column `reference,predicted` text for scatterplots.
pub fn write_scatter(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["reference", "predicted"]).map_err(csv_err(path))?;
    for (r, p) in pairs {
        w.write_record([r.to_string(), p.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Something that maps a feature stack to a height raster and records the
/// split it was trained on.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Network(&'a ModelCheckpoint),
    Baseline(&'a BaselineArtifact),
}

impl Predictor<'_> {
    pub fn model_id(&self) -> String {
        match self {
            Predictor::Network(c) => c.model.config.kind.to_string(),
            Predictor::Baseline(b) => b.model.kind().to_string(),
        }
    }

    fn provenance(&self) -> (&Option<DatasetSplit>, &str, &str, u32, u64) {
        match self {
            Predictor::Network(c) => (&c.split, &c.scene_fingerprint, &c.combo, c.resolution, c.seed),
            Predictor::Baseline(b) => (&b.split, &b.scene_fingerprint, &b.combo, b.resolution, b.seed),
        }
    }

    pub fn predict(&self, stack: &FeatureStack) -> Result<Raster> {
        match self {
            Predictor::Network(c) => predict_raster(c, stack),
            Predictor::Baseline(b) => predict_stack(b, stack),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub row: ReportRow,
    /// `(reference, predicted)` per scored pixel.
    pub scatter: Vec<(f64, f64)>,
    pub prediction: Raster,
}

/// Scores `predictor` on the test patches of `split`, pooling every pixel
/// that has a reference height and a prediction. Refuses when the predictor
/// was trained on another split, scene, combo or resolution, or when the
/// split's test pixels overlap its training or validation pixels.
pub fn evaluate_run(predictor: Predictor<'_>, stack: &FeatureStack, split: &DatasetSplit) -> Result<RunEvaluation> {
    let (trained_split, fingerprint, combo, resolution, seed) = predictor.provenance();
    match trained_split {
        None => return Err(Error::Config("model records no training split; cannot certify a held-out test".into())),
        Some(s) if s != split => {
            return Err(Error::Config(format!(
                "split provenance mismatch: model trained on split seed {} ({} train patches), evaluation split seed {} ({} train patches)",
                s.seed,
                s.train.len(),
                split.seed,
                split.train.len()
            )))
        }
        Some(_) => {}
    }
    if !fingerprint.is_empty() && !stack.fingerprint.is_empty() && fingerprint != stack.fingerprint {
        return Err(Error::Config(format!(
            "model was trained on scene {fingerprint}, stack comes from {}",
            stack.fingerprint
        )));
    }
    if combo != stack.combo || resolution != stack.resolution {
        return Err(Error::Config(format!(
            "model was trained on '{combo}' at {resolution} m, stack is '{}' at {} m",
            stack.combo, stack.resolution
        )));
    }
    let Some(reference) = &stack.reference else {
        return Err(Error::Usage("stack carries no reference heights".into()));
    };
    let w = stack.width();
    let pixels_of = |patches: Vec<crate::pipeline::Patch>| -> BTreeSet<usize> {
        patches.iter().flat_map(|p| p.pixels(split.patch_size, w).collect::<Vec<_>>()).collect()
    };
    let test = pixels_of(split.test_patches());
    let seen = pixels_of([split.train_patches(), split.val_patches()].concat());
    if test.iter().any(|i| seen.contains(i)) {
        return Err(Error::Config("test pixels overlap training or validation pixels".into()));
    }

    let prediction = predictor.predict(stack)?;
    let idx: Vec<usize> = test
        .into_iter()
        .filter(|&i| stack.target_valid(i) && prediction.values()[i].is_finite())
        .collect();
    let pred: Vec<f64> = idx.iter().map(|&i| prediction.values()[i]).collect();
    let refs: Vec<f64> = idx.iter().map(|&i| reference.values()[i]).collect();
    let m = metrics(&pred, &refs, &vec![true; idx.len()])?;
    let polarizations = ComboSpec::parse(combo)
        .map(|c| c.pols.iter().map(|p| p.as_str()).collect::<Vec<_>>().join("+"))
        .unwrap_or_default();
    Ok(RunEvaluation {
        row: ReportRow {
            combo: combo.to_string(),
            model: predictor.model_id(),
            resolution_m: resolution,
            polarizations,
            me_m: m.me,
            rmse_m: m.rmse,
            r2: m.r2,
            n_pixels: m.n,
            seed,
        },
        scatter: refs.into_iter().zip(pred).collect(),
        prediction,
    })
}
