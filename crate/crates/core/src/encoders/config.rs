use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes of the dual encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer depth `L`, shared by both towers.
    pub layers: usize,
    pub d_txt: usize,
    pub d_vid: usize,
    /// Width of the joint space both towers project into.
    pub d_embed: usize,
    /// Frames per video `T`.
    pub frames: usize,
    /// Patches per frame `N_p`.
    pub patches: usize,
    /// Maximum caption length `N_w`, excluding SOS/EOS.
    pub max_words: usize,
    pub heads: usize,
    pub vocab: usize,
    pub patch_dim: usize,
    /// Hidden width of the MLP as a multiple of the model width.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            d_txt: 32,
            d_vid: 48,
            d_embed: 32,
            frames: 4,
            patches: 4,
            max_words: 12,
            heads: 4,
            vocab: 64,
            patch_dim: 16,
            mlp_ratio: 4,
        }
    }

    /// Widths and depth of the full-size video-language model.
    pub fn full_size() -> Self {
        Self {
            layers: 12,
            d_txt: 512,
            d_vid: 768,
            d_embed: 256,
            frames: 16,
            patches: 196,
            max_words: 75,
            heads: 8,
            vocab: 49_408,
            patch_dim: 768,
            mlp_ratio: 4,
        }
    }

    /// Tokens in an unprompted caption: SOS, words, EOS.
    pub fn text_len(&self) -> usize {
        self.max_words + 2
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("layers", self.layers),
            ("d_txt", self.d_txt),
            ("d_vid", self.d_vid),
            ("d_embed", self.d_embed),
            ("frames", self.frames),
            ("patches", self.patches),
            ("heads", self.heads),
            ("patch_dim", self.patch_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.d_txt.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.d_txt = {} is not divisible by encoder.heads = {}",
                self.d_txt, self.heads
            )));
        }
        if !self.d_vid.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.d_vid = {} is not divisible by encoder.heads = {}",
                self.d_vid, self.heads
            )));
        }
        if self.vocab < 3 {
            return Err(Error::Config(
                "encoder.vocab must hold PAD, SOS and EOS".into(),
            ));
        }
        Ok(())
    }
}

/// Reserved token ids.
pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
