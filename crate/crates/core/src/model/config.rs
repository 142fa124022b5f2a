use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Encoder and decoder depth. The bottleneck sits at `resolution / 16`.
pub const DEPTH: usize = 4;
pub const DOWNSAMPLE: usize = 1 << DEPTH;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Length `D` of the style code.
    pub style_dim: usize,
    /// Channel width of the outermost decoder level; encoder block `k`
    /// (1-based) has `base_channels << k` channels.
    pub base_channels: usize,
    /// Residual blocks following each down/up-sampling conv.
    pub res_blocks: usize,
    /// Square working resolution of the network.
    pub resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            style_dim: 256,
            base_channels: 32,
            res_blocks: 2,
            resolution: 256,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale training and tests.
    pub fn toy() -> Self {
        Self {
            style_dim: 32,
            base_channels: 8,
            res_blocks: 1,
            resolution: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("style_dim and base_channels must be positive".into()));
        }
        if self.resolution < DOWNSAMPLE || self.resolution % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of {DOWNSAMPLE}",
                self.resolution
            )));
        }
        Ok(())
    }

    /// Channel count after encoder block `k` (1-based).
    pub fn encoder_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    pub fn bottleneck_size(&self) -> usize {
        self.resolution / DOWNSAMPLE
    }

    /// Stable identifier of the architecture, stored in weight archives.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "iharmon-v1:depth={DEPTH}:style_dim={}:base={}:res_blocks={}:resolution={}",
            self.style_dim, self.base_channels, self.res_blocks, self.resolution
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
