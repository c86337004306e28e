//! Feature stacks, multi-resolution aggregation, normalization, tiling and
//! dataset splits.

mod aggregate;
mod combo;
mod normalize;
mod source;
mod stack;
mod tiling;

pub use aggregate::{block_aggregate, block_fraction};
pub use combo::{BandRole, ComboSpec, Group};
pub use normalize::{conform_stack, zscore_apply, zscore_fit, zscore_invert, BandStats, CONSTANT_STD};
pub use source::{BandSource, DecayManifest, SceneDir, DECAY_MANIFEST};
pub use stack::{build_feature_stack, build_feature_stack_from, fit_scene_decay, resolution_factor, FeatureStack};
pub use tiling::{
    extract_batch, overlap_origins, split_dataset, stitch, tile_patches, DatasetSplit, Patch, PatchBatch,
    MIN_VALID_FRACTION,
};
