use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{ApplyMode, MultiHeadConfig, NormMode};
use crate::error::{Error, Result};
use crate::saliency::TsmConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionEncoderKind {
    /// One-layer LSTM from word embeddings to `d_y`.
    #[default]
    Recurrent,
    /// Position-wise linear map from word embeddings to `d_y`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Width of one image grid feature.
    pub d_x: usize,
    /// Width of the question encoder output.
    pub d_y: usize,
    /// Width of the word embeddings fed to the question encoder.
    pub d_emb: usize,
    pub answer_vocab_size: usize,
    pub fused_dim: usize,
    #[serde(default)]
    pub question_encoder: QuestionEncoderKind,
    /// Text saliency network; built whenever present.
    #[serde(default)]
    pub tsm: Option<TsmConfig>,
    /// Rows of the (frozen) word-embedding table, for accounting only.
    #[serde(default)]
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn toy(d_x: usize, d_emb: usize, answer_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 32,
            heads: 4,
            ffn_hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            d_x,
            d_y: 32,
            d_emb,
            answer_vocab_size,
            fused_dim: 32,
            question_encoder: QuestionEncoderKind::Recurrent,
            tsm: Some(TsmConfig { hidden: 16, heads: 4 }),
            vocab_size: 0,
        }
    }

    /// Full-size dimensions: 512-wide, 8 heads, 6+6 layers, 2048-wide grid
    /// features, 300-d embeddings and 3129 answers.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            ffn_hidden: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            d_x: 2048,
            d_y: 512,
            d_emb: 300,
            answer_vocab_size: 3129,
            fused_dim: 512,
            question_encoder: QuestionEncoderKind::Recurrent,
            tsm: Some(TsmConfig::default()),
            vocab_size: 0,
        }
    }

    pub fn block(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    /// Lists every violated constraint in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("d_emb", self.d_emb),
            ("answer_vocab_size", self.answer_vocab_size),
            ("fused_dim", self.fused_dim),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            bad.push(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if let Some(t) = &self.tsm {
            if let Err(e) = t.validate() {
                bad.push(format!("tsm: {e}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Where the text prior comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPriorSource {
    /// The jointly trained text saliency network.
    #[default]
    Tsm,
    /// A prior supplied with each sample.
    Provided,
}

/// Which layers receive which prior.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    /// 1-based encoder layers whose self-attention uses the text prior.
    #[serde(default)]
    pub text_layers: BTreeSet<usize>,
    /// 1-based decoder layers whose self-attention uses the image prior.
    #[serde(default)]
    pub image_layers: BTreeSet<usize>,
    #[serde(default)]
    pub apply_mode: ApplyMode,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default)]
    pub text_source: TextPriorSource,
}

impl IntegrationConfig {
    /// No prior anywhere.
    pub fn none() -> Self {
        IntegrationConfig::default()
    }

    /// Text prior in the first encoder layer, image prior in the second
    /// decoder layer.
    pub fn multimodal() -> Self {
        IntegrationConfig {
            text_layers: [1].into(),
            image_layers: [2].into(),
            ..Default::default()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.text_layers.is_empty() && self.image_layers.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mut bad = Vec::new();
        for (what, set, depth) in [
            ("text", &self.text_layers, cfg.encoder_layers),
            ("image", &self.image_layers, cfg.decoder_layers),
        ] {
            for &l in set {
                if l == 0 || l > depth {
                    bad.push(format!("{what} layer {l} outside 1..={depth}"));
                }
            }
        }
        if !self.text_layers.is_empty() && self.text_source == TextPriorSource::Tsm && cfg.tsm.is_none() {
            bad.push("text layers use the saliency network but the model has none".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_lists_every_violation() {
        let mut c = ModelConfig::toy(32, 32, 10);
        c.encoder_layers = 0;
        c.heads = 3;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("encoder_layers") && msg.contains("divisible"));
    }

    #[test]
    fn integration_layer_bounds() {
        let c = ModelConfig::toy(32, 32, 10);
        assert!(IntegrationConfig::multimodal().validate(&c).is_ok());
        let bad = IntegrationConfig {
            image_layers: [3].into(),
            ..Default::default()
        };
        assert!(matches!(bad.validate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::paper();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
