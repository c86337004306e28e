use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::stack::FeatureStack;
use crate::error::{Error, Result};

/// Bands whose training standard deviation falls below this map to zeros.
pub const CONSTANT_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    /// Population standard deviation over the fitting pixels.
    pub std: f64,
}

/// Per-band mean and standard deviation over the valid values at
/// `pixels` (flat indices; typically every pixel of the training patches).
pub fn zscore_fit(stack: &FeatureStack, pixels: &[usize]) -> Result<Vec<BandStats>> {
    stack
        .bands()
        .iter()
        .map(|(role, r)| {
            let vals: Vec<f64> = pixels.iter().map(|&i| r.values()[i]).filter(|v| !v.is_nan()).collect();
            if vals.len() < 2 {
                return Err(Error::Data(format!(
                    "band {role} has {} valid training pixels; need at least 2",
                    vals.len()
                )));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            Ok(BandStats { mean, std: var.sqrt() })
        })
        .collect()
}

/// `(x - mean) / std` per band; constant bands become zeros. Nodata stays
/// nodata.
pub fn zscore_apply(stack: &FeatureStack, stats: &[BandStats]) -> Result<FeatureStack> {
    if stack.is_normalized() {
        return Err(Error::Usage("stack is already normalized".into()));
    }
    check_count(stack, stats)?;
    let mut out = stack.clone();
    for ((role, r), s) in out.bands_mut().iter_mut().zip(stats) {
        if s.std < CONSTANT_STD {
            log::warn!("band {role} is constant over the training pixels; mapped to zeros");
            *r = r.map(|_| 0.0);
        } else {
            *r = r.map(|v| (v - s.mean) / s.std);
        }
    }
    out.set_stats(Some(stats.to_vec()));
    Ok(out)
}

/// Undo [`zscore_apply`]. Constant bands come back as their mean.
pub fn zscore_invert(stack: &FeatureStack) -> Result<FeatureStack> {
    let Some(stats) = stack.stats().map(<[BandStats]>::to_vec) else {
        return Err(Error::Usage("stack is not normalized".into()));
    };
    let mut out = stack.clone();
    for ((_, r), s) in out.bands_mut().iter_mut().zip(&stats) {
        *r = if s.std < CONSTANT_STD {
            r.map(|_| s.mean)
        } else {
            r.map(|v| v * s.std + s.mean)
        };
    }
    out.set_stats(None);
    Ok(out)
}

fn check_count(stack: &FeatureStack, stats: &[BandStats]) -> Result<()> {
    if stats.len() != stack.bands().len() {
        return Err(Error::Config(format!(
            "{} band statistics for a {}-band stack",
            stats.len(),
            stack.bands().len()
        )));
    }
    Ok(())
}

/// The stack as a model trained on `tags` with `stats` expects it: band
/// order must match, and an un-normalized stack is normalized with `stats`.
/// A stack normalized with other statistics is refused.
pub fn conform_stack<'a>(stack: &'a FeatureStack, tags: &[String], stats: &[BandStats]) -> Result<Cow<'a, FeatureStack>> {
    let have = stack.band_tags();
    if have != tags {
        return Err(Error::Config(format!(
            "stack bands [{}] do not match model bands [{}]",
            have.join(","),
            tags.join(",")
        )));
    }
    match stack.stats() {
        Some(s) if s == stats => Ok(Cow::Borrowed(stack)),
        Some(_) => Err(Error::Config(
            "stack was normalized with statistics other than the model's".into(),
        )),
        None => Ok(Cow::Owned(zscore_apply(stack, stats)?)),
    }
}
