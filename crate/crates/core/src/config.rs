//! Flat run configuration shared by training, evaluation and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Regularizers};
use crate::mask_decoder::MaskDecoderConfig;
use crate::pixel_decoder::PixelDecoderConfig;
use crate::synthdata::SplitConfig;
use crate::text_query::TextEncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Full mask transformer.
    Tqdm,
    /// Encoder plus `K` queries scored by cosine similarity.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    Fixed,
    Bipartite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Learnable,
    FixedTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub architecture: Architecture,

    pub crop_size: usize,
    pub patch: usize,
    pub backbone_width: usize,
    pub backbone_blocks: usize,
    pub backbone_heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub decoder_layers: usize,
    pub pixel_decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_hidden: usize,
    pub prompt_len: usize,
    pub text_token_dim: usize,
    pub text_blocks: usize,
    pub text_heads: usize,

    pub use_textual_queries: bool,
    pub use_text_to_pixel: bool,
    pub scaled_text_attention: bool,
    pub matching: Matching,
    pub prompt: PromptMode,
    pub lang_reg: bool,
    pub vl_reg: bool,
    pub v_reg: bool,

    pub bce_weight: f64,
    pub dice_weight: f64,
    pub cls_weight: f64,
    pub temperature: f64,
    pub no_object_weight: f64,

    pub lr: f64,
    pub backbone_lr_factor: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    pub checkpoint_every: usize,

    pub data_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            architecture: Architecture::Tqdm,
            crop_size: 64,
            patch: 8,
            backbone_width: 96,
            backbone_blocks: 4,
            backbone_heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
            feature_dim: 32,
            num_classes: 5,
            decoder_layers: 9,
            pixel_decoder_layers: 6,
            decoder_heads: 4,
            ffn_hidden: 64,
            prompt_len: 8,
            text_token_dim: 64,
            text_blocks: 2,
            text_heads: 4,
            use_textual_queries: true,
            use_text_to_pixel: true,
            scaled_text_attention: true,
            matching: Matching::Fixed,
            prompt: PromptMode::Learnable,
            lang_reg: true,
            vl_reg: true,
            v_reg: true,
            bce_weight: 5.0,
            dice_weight: 5.0,
            cls_weight: 2.0,
            temperature: 0.07,
            no_object_weight: 0.1,
            lr: 1e-3,
            backbone_lr_factor: 0.1,
            weight_decay: 0.05,
            warmup_steps: 150,
            total_steps: 2000,
            batch_size: 8,
            grad_clip: 0.0,
            augment: true,
            checkpoint_every: 500,
            data_seed: 0,
            train_scenes: 500,
            val_scenes: 100,
            test_scenes: 100,
        }
    }
}

impl RunConfig {
    /// Reduced sizes for quick runs on a single core.
    pub fn small() -> Self {
        Self {
            crop_size: 32,
            patch: 4,
            backbone_width: 48,
            backbone_blocks: 2,
            mlp_ratio: 2,
            feature_dim: 32,
            decoder_layers: 3,
            pixel_decoder_layers: 2,
            batch_size: 4,
            total_steps: 400,
            warmup_steps: 30,
            train_scenes: 200,
            val_scenes: 40,
            test_scenes: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.losses().validate()?;
        let positive = [
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("decoder_heads", self.decoder_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("prompt_len", self.prompt_len),
            ("batch_size", self.batch_size),
            ("total_steps", self.total_steps),
            ("train_scenes", self.train_scenes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes {} outside [2, 8]",
                self.num_classes
            )));
        }
        if self.feature_dim % self.decoder_heads != 0 {
            return Err(Error::Config("feature_dim not divisible by decoder_heads".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.backbone_lr_factor < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("optimizer settings must be non-negative, lr positive".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.crop_size,
            patch: self.patch,
            width: self.backbone_width,
            blocks: self.backbone_blocks,
            heads: self.backbone_heads,
            mlp_ratio: self.mlp_ratio,
            embed_dim: self.embed_dim,
            feature_dim: self.feature_dim,
        }
    }

    pub fn text_encoder(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            token_dim: self.text_token_dim,
            embed_dim: self.embed_dim,
            blocks: self.text_blocks,
            heads: self.text_heads,
            max_len: (self.prompt_len + 4).max(16),
        }
    }

    pub fn pixel_decoder(&self) -> PixelDecoderConfig {
        PixelDecoderConfig {
            dim: self.feature_dim,
            layers: self.pixel_decoder_layers,
            heads: self.decoder_heads,
            ffn_hidden: self.ffn_hidden,
            text_to_pixel: self.use_text_to_pixel,
            scaled_logits: self.scaled_text_attention,
        }
    }

    pub fn mask_decoder(&self) -> MaskDecoderConfig {
        MaskDecoderConfig {
            dim: self.feature_dim,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ffn_hidden: self.ffn_hidden,
            num_classes: self.num_classes,
            mask_threshold: 0.5,
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            bce_weight: self.bce_weight,
            dice_weight: self.dice_weight,
            cls_weight: self.cls_weight,
            temperature: self.temperature,
            no_object_weight: self.no_object_weight,
        }
    }

    pub fn regularizers(&self) -> Regularizers {
        Regularizers {
            language: self.lang_reg,
            vision_language: self.vl_reg,
            vision: self.v_reg,
        }
    }

    pub fn splits(&self) -> SplitConfig {
        SplitConfig {
            num_classes: self.num_classes,
            size: self.crop_size,
            train: self.train_scenes,
            val: self.val_scenes,
            test: self.test_scenes,
            seed: self.data_seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides, with values parsed as JSON when possible.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("config is an object");
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            map.insert(k.to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::small()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        assert_ne!(RunConfig::default().hash(), RunConfig::small().hash());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = RunConfig::default()
            .with_overrides(&["seed=7", "matching=bipartite", "use_text_to_pixel=false"])
            .unwrap();
        assert_eq!((c.seed, c.matching, c.use_text_to_pixel), (7, Matching::Bipartite, false));
        assert!(RunConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(RunConfig::from_json(r#"{"nope": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 3}"#).unwrap().seed == 3);
        assert!(RunConfig::default().with_overrides(&["warmup_steps=5000"]).is_err());
    }
}
