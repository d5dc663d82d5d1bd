use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURS_OF_DAY: usize = 24;
pub const DAYS_OF_YEAR: usize = 366;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    /// Known target values that open the decoder input.
    pub label_len: usize,
    pub lx: usize,
    pub ly: usize,
    pub n_features: usize,
}

impl ModelConfig {
    /// Full-size defaults: width 128, 8 heads, 2 encoder and 1 decoder layer.
    pub fn standard(n_features: usize) -> Self {
        Self {
            d_model: 128,
            d_inner: 2048,
            n_heads: 8,
            enc_layers: 2,
            dec_layers: 1,
            dropout: 0.05,
            label_len: 24,
            lx: 48,
            ly: 24,
            n_features,
        }
    }

    /// A narrow variant that trains in minutes on a single core.
    pub fn desk(n_features: usize) -> Self {
        Self {
            d_model: 16,
            d_inner: 32,
            n_heads: 2,
            ..Self::standard(n_features)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder sequence length: warm-start values plus placeholders.
    pub fn dec_len(&self) -> usize {
        self.label_len + self.ly
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_inner == 0 {
            return bad("model widths and head count must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.label_len > self.lx {
            return bad(format!(
                "label_len {} exceeds input length {}",
                self.label_len, self.lx
            ));
        }
        if self.lx == 0 || self.ly == 0 || self.n_features == 0 {
            return bad("window lengths and feature count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of scalar parameters in the encoder-decoder.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let di = self.d_inner;
        let embed = self.n_features * d + d + (HOURS_OF_DAY + DAYS_OF_YEAR) * d;
        let attn = 4 * (d * d + d);
        let norm = 2 * d;
        let ffn = 2 * d * di + di + d;
        let enc = attn + 2 * norm + ffn;
        let dec = 2 * attn + 3 * norm + ffn;
        embed + self.enc_layers * enc + self.dec_layers * dec + d + 1
    }
}
