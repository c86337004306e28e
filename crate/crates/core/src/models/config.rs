use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder/decoder with plain skip connections.
    Vanilla,
    /// Dense nested skip pathways (UNet++), final node output only.
    Nested,
    /// Vanilla with squeeze-and-excitation after every double convolution.
    Se,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vanilla, ModelKind::Nested, ModelKind::Se];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Nested => "nested",
            ModelKind::Se => "se",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" | "unet" => Ok(ModelKind::Vanilla),
            "nested" | "unet++" | "nested-unet" => Ok(ModelKind::Nested),
            "se" | "seunet" | "se-unet" => Ok(ModelKind::Se),
            other => Err(Error::Config(format!("unknown model kind '{other}' (vanilla, nested, se)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    /// Encoder depth; level `i` has `base_channels * 2^i` channels.
    pub levels: usize,
    pub base_channels: usize,
    /// Squeeze-and-excitation reduction ratio (se kind only).
    pub se_reduction: usize,
    pub out_channels: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, in_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            levels: 4,
            base_channels: 32,
            se_reduction: 16,
            out_channels: 1,
        }
    }

    pub fn with_size(mut self, levels: usize, base_channels: usize) -> Self {
        self.levels = levels;
        self.base_channels = base_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be at least 4, got {}", self.base_channels)));
        }
        if self.out_channels != 1 {
            return Err(Error::Config("only single-output regression is supported".into()));
        }
        if self.kind == ModelKind::Se && self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}
