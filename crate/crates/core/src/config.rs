//! Pipeline configuration.
//!
//! One record holds every hyperparameter of the three stages. Values
//! serialize to TOML and round-trip exactly; the CLI layers overrides on
//! top with precedence flags > file > defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which loss supervises the translated image against the pseudo ground
/// truth in the supervised branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleLossVariant {
    /// Patch-wise contrastive loss between matching locations (default).
    StylePatchNce,
    /// Plain mean absolute pixel difference.
    L1,
}

/// Complete hyperparameter record for all three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // shared
    pub resolution: usize,
    pub seed: u64,
    pub batch_size: usize,
    // prior providers
    pub embedder_provider: String,
    pub perceptual_provider: String,
    pub seg_provider: String,
    pub fid_extractor: String,
    // stage 1: generator fine-tuning
    pub lambda_lpips: f64,
    pub lambda_global: f64,
    pub lambda_patch: f64,
    pub finetune_iters: usize,
    pub finetune_lr: f64,
    pub finetune_beta1: f64,
    pub finetune_beta2: f64,
    pub r1_gamma: f64,
    pub patch_count_finetune: usize,
    pub patch_size_finetune: usize,
    pub trainable_blocks: usize,
    pub style_dim: usize,
    pub synth_blocks: usize,
    pub mapping_layers: usize,
    pub synth_channel_base: usize,
    pub synth_channel_max: usize,
    pub disc_base_channels: usize,
    // pseudo-pair sampling
    pub truncation: f64,
    pub n_pairs: usize,
    // stage 2: selection
    pub bce_threshold: f64,
    // stage 3: translation training
    pub lambda_style: f64,
    pub lambda_src: f64,
    pub lambda_hdce: f64,
    pub lambda_content: f64,
    pub epochs: usize,
    pub patches_per_layer: usize,
    pub feature_layer_ids: Vec<usize>,
    pub embed_dim: usize,
    pub gen_base_channels: usize,
    pub i2i_lr: f64,
    pub i2i_beta1: f64,
    pub i2i_beta2: f64,
    pub nce_temperature: f64,
    pub hdce_hardness: f64,
    pub style_loss_variant: StyleLossVariant,
    /// Forces the supervised-branch weight to a fixed value; `Some(0.0)`
    /// disables the branch entirely (ablation switch).
    pub lambda_sup_override: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: 256,
            seed: 0,
            batch_size: 1,
            embedder_provider: "mock".into(),
            perceptual_provider: "mock".into(),
            seg_provider: "mock".into(),
            fid_extractor: "mock".into(),
            lambda_lpips: 0.01,
            lambda_global: 1.0,
            lambda_patch: 0.05,
            finetune_iters: 1000,
            finetune_lr: 2e-3,
            finetune_beta1: 0.0,
            finetune_beta2: 0.99,
            r1_gamma: 10.0,
            patch_count_finetune: 16,
            patch_size_finetune: 32,
            trainable_blocks: 3,
            style_dim: 128,
            synth_blocks: 5,
            mapping_layers: 4,
            synth_channel_base: 16,
            synth_channel_max: 128,
            disc_base_channels: 64,
            truncation: 0.7,
            n_pairs: 30000,
            bce_threshold: 5.0,
            lambda_style: 0.05,
            lambda_src: 0.05,
            lambda_hdce: 0.1,
            lambda_content: 0.0,
            epochs: 20,
            patches_per_layer: 256,
            feature_layer_ids: vec![0, 4, 8, 12, 16],
            embed_dim: 256,
            gen_base_channels: 64,
            i2i_lr: 2e-4,
            i2i_beta1: 0.5,
            i2i_beta2: 0.999,
            nce_temperature: 0.07,
            hdce_hardness: 1.0,
            style_loss_variant: StyleLossVariant::StylePatchNce,
            lambda_sup_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_global", self.lambda_global),
            ("lambda_patch", self.lambda_patch),
            ("lambda_style", self.lambda_style),
            ("lambda_src", self.lambda_src),
            ("lambda_hdce", self.lambda_hdce),
            ("lambda_content", self.lambda_content),
        ];
        for (name, v) in lambdas {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(v) = self.lambda_sup_override {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "lambda_sup_override must be >= 0, got {v}"
                )));
            }
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::Config(format!(
                "truncation must be in (0, 1], got {}",
                self.truncation
            )));
        }
        if self.feature_layer_ids.is_empty() {
            return Err(Error::Config("feature_layer_ids must be nonempty".into()));
        }
        for w in self.feature_layer_ids.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "feature_layer_ids must be strictly increasing".into(),
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.synth_blocks == 0 {
            return Err(Error::Config("synth_blocks must be >= 1".into()));
        }
        if self.trainable_blocks == 0 || self.trainable_blocks > self.synth_blocks {
            return Err(Error::Config(format!(
                "trainable_blocks must be in 1..={}, got {}",
                self.synth_blocks, self.trainable_blocks
            )));
        }
        if self.patch_count_finetune < 2 {
            return Err(Error::Config(
                "patch_count_finetune must be >= 2 (each query needs a negative)".into(),
            ));
        }
        if self.patches_per_layer < 2 {
            return Err(Error::Config("patches_per_layer must be >= 2".into()));
        }
        if self.nce_temperature <= 0.0 {
            return Err(Error::Config("nce_temperature must be > 0".into()));
        }
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 4, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn default_weights() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_lpips, 0.01);
        assert_eq!(c.lambda_global, 1.0);
        assert_eq!(c.lambda_patch, 0.05);
        assert_eq!(c.lambda_style, 0.05);
        assert_eq!(c.lambda_src, 0.05);
        assert_eq!(c.lambda_hdce, 0.1);
        assert_eq!(c.bce_threshold, 5.0);
        assert_eq!(c.truncation, 0.7);
        assert_eq!(c.n_pairs, 30000);
        assert_eq!(c.finetune_iters, 1000);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.patch_count_finetune, 16);
        assert_eq!(c.patch_size_finetune, 32);
        assert_eq!(c.patches_per_layer, 256);
        assert_eq!(c.embed_dim, 256);
        assert_eq!(c.feature_layer_ids, vec![0, 4, 8, 12, 16]);
        assert_eq!(c.batch_size, 1);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.truncation = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda_style = -0.1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.feature_layer_ids = vec![0, 4, 4];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.trainable_blocks = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_default() {
        let c = TrainConfig::default();
        let s = c.to_toml().unwrap();
        let back = TrainConfig::from_toml(&s).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_field_rejected() {
        let s = "no_such_field = 3\n";
        assert!(TrainConfig::from_toml(s).is_err());
    }

    proptest! {
        #[test]
        fn toml_roundtrip_exact(
            lam in 0.0f64..10.0,
            trunc in 0.01f64..1.0,
            iters in 1usize..5000,
            seed in any::<u64>(),
            ov in proptest::option::of(0.0f64..2.0),
        ) {
            let mut c = TrainConfig {
                lambda_hdce: lam,
                truncation: trunc,
                finetune_iters: iters,
                seed,
                lambda_sup_override: ov,
                ..TrainConfig::default()
            };
            c.lambda_lpips = lam / 3.0;
            let s = c.to_toml().unwrap();
            let back = TrainConfig::from_toml(&s).unwrap();
            prop_assert_eq!(c, back);
        }
    }
}
