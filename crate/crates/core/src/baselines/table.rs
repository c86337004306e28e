use crate::error::{Error, Result};
use crate::pipeline::FeatureStack;

/// One row per usable pixel: `d` feature values and the reference height.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTable {
    n_features: usize,
    /// Row-major `n x d`.
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl PixelTable {
    pub fn new(n_features: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != n_features * targets.len() {
            return Err(Error::Usage(format!(
                "{} feature values do not form {} rows of {n_features}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Data("pixel table rows must be finite".into()));
        }
        Ok(Self {
            n_features,
            features,
            targets,
        })
    }

    /// Rows for the `pixels` (flat indices) that are target-valid and have
    /// every feature present; others are skipped.
    pub fn from_stack(stack: &FeatureStack, pixels: &[usize]) -> Result<Self> {
        let Some(reference) = &stack.reference else {
            return Err(Error::Usage("stack carries no reference heights".into()));
        };
        let labelled: Vec<usize> = pixels.iter().copied().filter(|&i| stack.target_valid(i)).collect();
        let (rows, kept) = feature_rows(stack, &labelled);
        let targets = kept.iter().map(|&i| reference.values()[i]).collect();
        Self::new(stack.n_bands(), rows, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.len() as f64
    }
}

/// Row-major features of the pixels among `pixels` that lie inside the
/// validity mask with no missing band, and the flat indices they came from.
pub fn feature_rows(stack: &FeatureStack, pixels: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut rows = Vec::with_capacity(pixels.len() * stack.n_bands());
    let mut kept = Vec::with_capacity(pixels.len());
    for &i in pixels {
        if stack.valid_mask.values()[i] != 1.0 {
            continue;
        }
        let start = rows.len();
        rows.extend(stack.bands().iter().map(|(_, r)| r.values()[i]));
        if rows[start..].iter().all(|v| v.is_finite()) {
            kept.push(i);
        } else {
            rows.truncate(start);
        }
    }
    (rows, kept)
}
