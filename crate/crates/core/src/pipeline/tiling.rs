use canopy_tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stack::FeatureStack;
use crate::error::{Error, Result};

/// Tiles with fewer valid pixels than this fraction are discarded.
pub const MIN_VALID_FRACTION: f64 = 0.05;

/// Top-left corner of a square patch, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
}

impl Patch {
    /// Flat pixel indices covered by the patch.
    pub fn pixels(&self, size: usize, width: usize) -> impl Iterator<Item = usize> + '_ {
        let (x0, y0) = (self.x, self.y);
        (y0..y0 + size).flat_map(move |y| (x0..x0 + size).map(move |x| y * width + x))
    }
}

/// Non-overlapping tiles scanned row-major. Tiles running past the edge are
/// dropped, as are tiles with under [`MIN_VALID_FRACTION`] valid pixels.
pub fn tile_patches(stack: &FeatureStack, size: usize, stride: usize) -> Result<Vec<Patch>> {
    let (w, h) = (stack.width(), stack.height());
    if size == 0 || stride == 0 {
        return Err(Error::Usage("patch size and stride must be positive".into()));
    }
    if w < size || h < size {
        return Err(Error::Usage(format!("{w}x{h} raster is smaller than a {size}x{size} patch")));
    }
    let mut out = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            let p = Patch { x, y };
            let valid = p.pixels(size, w).filter(|&i| stack.target_valid(i)).count();
            if valid as f64 >= MIN_VALID_FRACTION * (size * size) as f64 {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Disjoint train/validation/test assignment of patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub patch_size: usize,
    pub stride: usize,
    pub patches: Vec<Patch>,
    /// Indices into `patches`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn select(&self, which: &[usize]) -> Vec<Patch> {
        which.iter().map(|&i| self.patches[i]).collect()
    }

    pub fn train_patches(&self) -> Vec<Patch> {
        self.select(&self.train)
    }

    pub fn val_patches(&self) -> Vec<Patch> {
        self.select(&self.val)
    }

    pub fn test_patches(&self) -> Vec<Patch> {
        self.select(&self.test)
    }

    /// Flat indices of every pixel in the training patches.
    pub fn train_pixels(&self, width: usize) -> Vec<usize> {
        self.train
            .iter()
            .flat_map(|&i| self.patches[i].pixels(self.patch_size, width).collect::<Vec<_>>())
            .collect()
    }
}

/// Seeded shuffle, then a contiguous 60/20/20 cut.
pub fn split_dataset(patches: Vec<Patch>, patch_size: usize, stride: usize, seed: u64) -> Result<DatasetSplit> {
    let n = patches.len();
    if n < 5 {
        return Err(Error::Usage(format!("need at least 5 patches to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    Ok(DatasetSplit {
        seed,
        patch_size,
        stride,
        patches,
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// Model inputs and targets for a set of patches.
#[derive(Debug, Clone)]
pub struct PatchBatch<T> {
    /// `[B, C, S, S]`
    pub features: Tensor<T>,
    /// `[B, 1, S, S]`, metres; 0 where masked.
    pub reference: Tensor<T>,
    /// `[B, 1, S, S]` of {0, 1}.
    pub mask: Tensor<T>,
}

impl<T: Real> PatchBatch<T> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != T::zero()).count()
    }
}

/// Copies patches out of a stack. Nodata feature values become 0 (the band
/// mean after normalization); the mask is 1 exactly where
/// [`FeatureStack::target_valid`] holds.
pub fn extract_batch<T: Real>(stack: &FeatureStack, patches: &[Patch], size: usize) -> Result<PatchBatch<T>> {
    let (w, h, c) = (stack.width(), stack.height(), stack.n_bands());
    for p in patches {
        if p.x + size > w || p.y + size > h {
            return Err(Error::Usage(format!("patch at ({}, {}) exceeds the {w}x{h} grid", p.x, p.y)));
        }
    }
    let b = patches.len();
    let area = size * size;
    let mut features = Vec::with_capacity(b * c * area);
    let mut reference = Vec::with_capacity(b * area);
    let mut mask = Vec::with_capacity(b * area);
    for p in patches {
        for (_, r) in stack.bands() {
            features.extend(p.pixels(size, w).map(|i| {
                let v = r.values()[i];
                if v.is_nan() {
                    T::zero()
                } else {
                    T::of(v)
                }
            }));
        }
        for i in p.pixels(size, w) {
            let ok = stack.target_valid(i);
            mask.push(if ok { T::one() } else { T::zero() });
            let r = stack.reference.as_ref().map_or(0.0, |r| r.values()[i]);
            reference.push(if ok { T::of(r) } else { T::zero() });
        }
    }
    Ok(PatchBatch {
        features: Tensor::from_vec(&[b, c, size, size], features)?,
        reference: Tensor::from_vec(&[b, 1, size, size], reference)?,
        mask: Tensor::from_vec(&[b, 1, size, size], mask)?,
    })
}

/// Window origins along one axis: every `step` pixels, with the last window
/// aligned to the far edge.
pub fn overlap_origins(len: usize, size: usize, step: usize) -> Result<Vec<usize>> {
    if size == 0 || step == 0 || len < size {
        return Err(Error::Usage(format!("cannot place {size}-pixel windows every {step} on a {len}-pixel axis")));
    }
    let mut out: Vec<usize> = (0..=len - size).step_by(step).collect();
    if *out.last().expect("nonempty") != len - size {
        out.push(len - size);
    }
    Ok(out)
}

/// Runs `predict` on overlapping windows and averages overlaps. `predict`
/// receives a window origin and returns `size * size` row-major values.
pub fn stitch(
    width: usize,
    height: usize,
    size: usize,
    step: usize,
    mut predict: impl FnMut(&[Patch]) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let xs = overlap_origins(width, size, step)?;
    let ys = overlap_origins(height, size, step)?;
    let windows: Vec<Patch> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| Patch { x, y })).collect();
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0u32; width * height];
    let outputs = predict(&windows)?;
    if outputs.len() != windows.len() {
        return Err(Error::Usage("predictor returned the wrong number of windows".into()));
    }
    for (p, vals) in windows.iter().zip(outputs) {
        if vals.len() != size * size {
            return Err(Error::Usage("predictor returned a window of the wrong size".into()));
        }
        for (i, v) in p.pixels(size, width).zip(vals) {
            sum[i] += v;
            count[i] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}
