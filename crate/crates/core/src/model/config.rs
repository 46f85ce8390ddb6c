use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyperparameters. JSON keys match the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub align_layers: usize,
    /// 0 feeds the raw text/vision concatenation to the decoder.
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// 0 runs the decoder with the regression query only.
    pub seg_queries: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// `[rows, cols]` of the visual token grid.
    pub vision_grid: [usize; 2],
    /// `[height, width]` of the input image.
    pub image_size: [usize; 2],
    /// Each patch is average-pooled onto a `pool_subgrid x pool_subgrid`
    /// grid before the token projection; 1 pools each patch to one color.
    pub pool_subgrid: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub freeze_backbone_epochs: usize,
    /// Run the query/text/vision alignment attention after every backbone
    /// step; when off the queries enter the decoder as static embeddings.
    pub triple_alignment: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            align_layers: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            seg_queries: 5,
            heads: 2,
            ffn_dim: 256,
            vision_grid: [8, 8],
            image_size: [64, 64],
            pool_subgrid: 4,
            text_len: 12,
            vocab_size: 64,
            freeze_backbone_epochs: 0,
            triple_alignment: true,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for full-model gradient checks.
    pub fn micro() -> Self {
        Self {
            model_dim: 8,
            align_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            seg_queries: 2,
            heads: 2,
            ffn_dim: 16,
            vision_grid: [2, 2],
            image_size: [8, 8],
            pool_subgrid: 2,
            text_len: 4,
            vocab_size: 64,
            freeze_backbone_epochs: 0,
            triple_alignment: true,
        }
    }

    pub fn visual_tokens(&self) -> usize {
        self.vision_grid[0] * self.vision_grid[1]
    }

    pub fn patch(&self) -> [usize; 2] {
        [
            self.image_size[0] / self.vision_grid[0].max(1),
            self.image_size[1] / self.vision_grid[1].max(1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                reason,
            })
        };
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(
                "heads",
                format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads),
            );
        }
        if self.model_dim % 4 != 0 {
            return bad("model_dim", format!("{} is not a multiple of 4", self.model_dim));
        }
        if self.align_layers == 0 {
            return bad("align_layers", "must be >= 1".into());
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers", "must be >= 1".into());
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be >= 1".into());
        }
        let needed = crate::data::FIRST_WORD_ID + crate::data::WORDS.len();
        if self.vocab_size < needed {
            return bad("vocab_size", format!("{} does not cover the {needed} known tokens", self.vocab_size));
        }
        let [gh, gw] = self.vision_grid;
        let [ih, iw] = self.image_size;
        if gh == 0 || gw == 0 || ih % gh != 0 || iw % gw != 0 {
            return bad(
                "vision_grid",
                format!("image_size {:?} is not divisible by {:?}", self.image_size, self.vision_grid),
            );
        }
        let [ph, pw] = self.patch();
        if self.pool_subgrid == 0 || ph % self.pool_subgrid != 0 || pw % self.pool_subgrid != 0 {
            return bad(
                "pool_subgrid",
                format!("patch {ph}x{pw} is not divisible by {}", self.pool_subgrid),
            );
        }
        if self.text_len < 2 {
            return bad("text_len", "must leave room for the CLS and SEP tokens".into());
        }
        Ok(())
    }
}
