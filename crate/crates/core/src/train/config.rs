use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Beam-pairing strategy for distillation during SCST.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    #[default]
    Best,
    All,
    HungarianBest,
    HungarianAll,
    EmbedderBest,
}

impl Pairing {
    pub const ALL: [Pairing; 5] = [
        Pairing::Best,
        Pairing::All,
        Pairing::HungarianBest,
        Pairing::HungarianAll,
        Pairing::EmbedderBest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pairing::Best => "best",
            Pairing::All => "all",
            Pairing::HungarianBest => "hungarian_best",
            Pairing::HungarianAll => "hungarian_all",
            Pairing::EmbedderBest => "embedder_best",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScstConfig {
    pub strategy: Pairing,
    pub beam_size: usize,
    pub lr: f64,
    pub lambda_kd: f64,
}

/// Everything a run needs, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub num_images: usize,
    pub objects_per_image: usize,
    pub refs_per_image: usize,
    pub num_colors: usize,
    pub num_objects: usize,
    pub grid_size: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub num_val: usize,
    pub num_test: usize,
    pub vocab_size: usize,

    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub num_heads: usize,
    pub num_memory_slots: usize,
    pub dropout: f64,
    pub max_length: usize,
    pub mesh: bool,

    pub batch_size: usize,
    pub xe_steps: u64,
    pub warmup: u64,
    pub lr_scale: f64,
    pub ema_momentum: f64,
    pub ema_enabled: bool,
    pub lambda_kd: f64,
    pub val_every: u64,
    pub val_images: usize,
    pub eval_beam: usize,

    pub scst_steps: u64,
    pub scst_batch_size: usize,
    pub scst_beam: usize,
    pub scst_lr: f64,
    pub scst_lambda_kd: f64,
    pub strategy: Pairing,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            seed: synth.seed,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            num_images: synth.num_images,
            objects_per_image: synth.objects_per_image,
            refs_per_image: synth.refs_per_image,
            num_colors: synth.num_colors,
            num_objects: synth.num_objects,
            grid_size: synth.grid_size,
            feature_dim: synth.feature_dim,
            noise: synth.noise,
            num_val: 30,
            num_test: 30,
            vocab_size: model.vocab_size,
            num_encoder_layers: model.num_encoder_layers,
            num_decoder_layers: model.num_decoder_layers,
            model_dim: model.model_dim,
            feedforward_dim: model.feedforward_dim,
            num_heads: model.num_heads,
            num_memory_slots: model.num_memory_slots,
            dropout: model.dropout,
            max_length: model.max_length,
            mesh: model.mesh,
            batch_size: 10,
            xe_steps: 2000,
            warmup: 400,
            lr_scale: 1.0,
            ema_momentum: 0.99,
            ema_enabled: true,
            lambda_kd: 0.1,
            val_every: 500,
            val_images: 30,
            eval_beam: 5,
            scst_steps: 500,
            scst_batch_size: 2,
            scst_beam: 5,
            scst_lr: 5e-5,
            scst_lambda_kd: 0.1,
            strategy: Pairing::Best,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            num_images: self.num_images,
            objects_per_image: self.objects_per_image,
            refs_per_image: self.refs_per_image,
            num_colors: self.num_colors,
            num_objects: self.num_objects,
            grid_size: self.grid_size,
            feature_dim: self.feature_dim,
            noise: self.noise,
        }
    }

    /// Architecture for a vocabulary of `vocab_len` tokens.
    pub fn model(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            num_encoder_layers: self.num_encoder_layers,
            num_decoder_layers: self.num_decoder_layers,
            model_dim: self.model_dim,
            feedforward_dim: self.feedforward_dim,
            num_heads: self.num_heads,
            num_memory_slots: self.num_memory_slots,
            dropout: self.dropout,
            vocab_size: vocab_len,
            max_length: self.max_length,
            mesh: self.mesh,
            feature_dim: self.feature_dim,
        }
    }

    pub fn scst(&self) -> ScstConfig {
        ScstConfig {
            strategy: self.strategy,
            beam_size: self.scst_beam,
            lr: self.scst_lr,
            lambda_kd: self.scst_lambda_kd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.scst_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1]");
        }
        if self.lambda_kd < 0.0 || self.scst_lambda_kd < 0.0 {
            return bad("distillation weights must be non-negative");
        }
        if self.eval_beam == 0 || self.scst_beam == 0 {
            return bad("beam sizes must be positive");
        }
        if !(self.lr_scale > 0.0 && self.scst_lr >= 0.0) {
            return bad("lr_scale must be positive and scst_lr non-negative");
        }
        self.model(self.vocab_size).validate()
    }

    /// Fields that must agree between a checkpoint's run and a new stage.
    pub fn architecture_matches(&self, other: &RunConfig) -> bool {
        self.model(0) == other.model(0) && self.vocab_size == other.vocab_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            strategy: Pairing::HungarianAll,
            ..RunConfig::default()
        };
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("strategy = \"hungarian_all\""));
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::parse("seed = 3\nlambda_kd = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("model_dim = 65"), Err(Error::Config(_))));
    }
}
