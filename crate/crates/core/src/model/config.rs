use serde::{Deserialize, Serialize};

use crate::attention::ChunkConfig;
use crate::cumulative::SelectorConfig;
use crate::error::{Error, Result};

/// Token ids reserved by every vocabulary.
pub const SOS: usize = 0;
pub const EOS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_k: usize,
    /// Optional explicit model width; must equal `heads * d_k` when given.
    pub d_model: Option<usize>,
    pub ffn: usize,
    /// Vocabulary size including `sos` and `eos`.
    pub vocab: usize,
    /// Width of the input frame vectors.
    pub input_dim: usize,
    pub chunks: ChunkConfig,
    pub selector: SelectorConfig,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            d_k: 16,
            d_model: None,
            ffn: 64,
            vocab: 18,
            input_dim: 16,
            chunks: ChunkConfig::default(),
            selector: SelectorConfig::default(),
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.decoder_layers == 0 {
            return bad("the decoder needs at least one layer".into());
        }
        if self.heads == 0 || self.d_k == 0 || self.ffn == 0 || self.input_dim == 0 {
            return bad("heads, d_k, ffn and input_dim must be positive".into());
        }
        if let Some(d) = self.d_model {
            if d != self.d_model() {
                return bad(format!("d_model {d} != heads * d_k = {}", self.d_model()));
            }
        }
        if self.vocab < 3 {
            return bad(format!("vocab {} leaves no room beside sos and eos", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.selector.noise_std < 0.0 || !self.selector.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and >= 0", self.selector.noise_std));
        }
        self.chunks.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_model(), 32);
    }

    #[test]
    fn explicit_width_must_match() {
        let c = ModelConfig {
            heads: 4,
            d_k: 64,
            d_model: Some(256),
            ..Default::default()
        };
        c.validate().unwrap();
        let c = ModelConfig {
            d_model: Some(30),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = ModelConfig::default();
        let s = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: ModelConfig = toml::from_str("heads = 4\nchunks = \"4,4,2\"").unwrap();
        assert_eq!(partial.heads, 4);
        assert_eq!(partial.chunks, ChunkConfig::new(4, 4, 2).unwrap());
        assert!(toml::from_str::<ModelConfig>("hedas = 4").is_err());
    }
}
