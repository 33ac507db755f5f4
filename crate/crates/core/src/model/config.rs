use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the shared vision-transformer encoder and its attached heads.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub proj_dim_dino: usize,
    pub proj_dim_contrast: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub domain_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            width: 128,
            heads: 4,
            embed_dim: 128,
            proj_dim_dino: 256,
            proj_dim_contrast: 64,
            channels: 3,
            mlp_ratio: 4,
            domain_hidden: 128,
        }
    }
}

/// Number of stride-2 stages in each decoder.
pub const DECODER_STAGES: usize = 4;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("proj_dim_dino", self.proj_dim_dino),
            ("proj_dim_contrast", self.proj_dim_contrast),
            ("channels", self.channels),
            ("mlp_ratio", self.mlp_ratio),
            ("domain_hidden", self.domain_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        let factor = 1 << DECODER_STAGES;
        if self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of {factor} for the {DECODER_STAGES}-stage decoders",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Spatial size of the map the decoders start from.
    pub fn decoder_seed_size(&self) -> usize {
        self.image_size >> DECODER_STAGES
    }

    /// Channel widths through the decoder: seed map, then each transposed-conv output.
    pub fn decoder_channels(&self) -> [usize; DECODER_STAGES + 1] {
        let w = self.width;
        [
            w,
            (w / 2).max(1),
            (w / 4).max(1),
            (w / 8).max(1),
            self.channels,
        ]
    }

    pub fn dino_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}
