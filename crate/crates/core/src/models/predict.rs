use super::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::pipeline::{conform_stack, extract_batch, stitch, FeatureStack};
use crate::raster::Raster;

/// Window edge for full-raster inference; windows overlap by half.
pub const PREDICT_PATCH: usize = 128;
const WINDOWS_PER_BATCH: usize = 8;

/// Predicted height for every pixel of `stack`, blended from overlapping
/// windows. Pixels outside the validity mask are nodata. Values are not
/// clamped.
///
/// An un-normalized stack is normalized with the checkpoint statistics; a
/// normalized one must carry exactly those statistics.
pub fn predict_raster(ckpt: &ModelCheckpoint, stack: &FeatureStack) -> Result<Raster> {
    let stack = conform_stack(stack, &ckpt.band_tags, &ckpt.band_stats)?;
    let stack = stack.as_ref();
    let (w, h) = (stack.width(), stack.height());
    let m = ckpt.model.config.size_multiple();
    let size = PREDICT_PATCH.min(w).min(h) / m * m;
    if size == 0 {
        return Err(Error::Usage(format!("{w}x{h} raster is smaller than the model's {m}-pixel granularity")));
    }
    let step = (size / 2).max(1);
    let values = stitch(w, h, size, step, |windows| {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(WINDOWS_PER_BATCH) {
            let batch = extract_batch::<f32>(stack, chunk, size)?;
            let pred = ckpt.model.predict(&batch.features)?;
            out.extend(
                pred.data()
                    .chunks(size * size)
                    .map(|c| c.iter().map(|&v| v as f64).collect::<Vec<f64>>()),
            );
        }
        Ok(out)
    })?;
    let mut raster = Raster::new(w, h, stack.spacing(), values)?.with_role("height_pred", "m");
    for (v, &mk) in raster.values_mut().iter_mut().zip(stack.valid_mask.values()) {
        if mk != 1.0 {
            *v = f64::NAN;
        }
    }
    Ok(raster)
}
