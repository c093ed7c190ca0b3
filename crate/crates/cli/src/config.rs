//! Run configuration: a plain-text file with `[model]`, `[optimizer]` and
//! `[training]` sections of `key = value` lines. Every field has a default;
//! unknown sections or keys are rejected. `--set section.key=value` flags
//! override file values.

use memefuse_core::error::{Error, Result};
use memefuse_core::fusion::{HeadBankConfig, ModelConfig, ModelVariant};
use memefuse_core::image::ImageEncoderConfig;
use memefuse_core::optim::{OptimizerConfig, OptimizerKind};
use memefuse_core::text::TextEncoderConfig;
use memefuse_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub variant: ModelVariant,
    pub model_seed: u64,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub heads: HeadBankConfig,
    pub optimizer: OptimizerConfig,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs_per_phase: usize,
    pub validation_fraction: f64,
    pub train_seed: u64,
    pub cache_frozen_features: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: ModelVariant::Multimodal,
            model_seed: 42,
            text: TextEncoderConfig::desk(512),
            image: ImageEncoderConfig::desk(),
            heads: HeadBankConfig::default(),
            optimizer: OptimizerConfig::new(OptimizerKind::AdamWeightDecay, 5e-4),
            phase1_lr: 5e-4,
            phase2_lr: 5e-5,
            patience: 30,
            batch_size: 16,
            max_epochs_per_phase: 50,
            validation_fraction: 0.10,
            train_seed: 42,
            cache_frozen_features: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_five(section: &str, key: &str, value: &str) -> Result<[usize; 5]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("[{section}] {key}: needs exactly 5 entries")))
}

impl RunConfig {
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match (section, key) {
            ("model", "variant") => self.variant = ModelVariant::parse(value)?,
            ("model", "seed") => self.model_seed = parse_value(section, key, value)?,
            ("model", "vocab_size") => self.text.vocab_size = parse_value(section, key, value)?,
            ("model", "text_embed_dim") => self.text.embed_dim = parse_value(section, key, value)?,
            ("model", "text_hidden_dim") => {
                self.text.hidden_dim = parse_value(section, key, value)?;
            }
            ("model", "text_layers") => self.text.num_layers = parse_value(section, key, value)?,
            ("model", "text_heads") => self.text.num_heads = parse_value(section, key, value)?,
            ("model", "text_ff_dim") => self.text.ff_dim = parse_value(section, key, value)?,
            ("model", "max_seq_len") => self.text.max_seq_len = parse_value(section, key, value)?,
            ("model", "share_layers") => {
                self.text.share_layers = parse_value(section, key, value)?;
            }
            ("model", "factorized_embedding") => {
                self.text.factorized_embedding = parse_value(section, key, value)?;
            }
            ("model", "image_resolution") => {
                self.image.input_resolution = parse_value(section, key, value)?;
            }
            ("model", "image_channels") => {
                self.image.stack_channels = parse_five(section, key, value)?;
            }
            ("model", "image_convs") => {
                self.image.convs_per_stack = parse_five(section, key, value)?;
            }
            ("model", "head_hidden1") => self.heads.hidden1 = parse_value(section, key, value)?,
            ("model", "head_hidden2") => self.heads.hidden2 = parse_value(section, key, value)?,
            ("model", "head_dropout") => {
                self.heads.head_dropout = parse_value(section, key, value)?;
            }
            ("model", "feature_dropout") => {
                self.heads.feature_dropout = parse_value(section, key, value)?;
            }
            ("optimizer", "kind") => self.optimizer.kind = OptimizerKind::parse(value)?,
            ("optimizer", "warmup_fraction") => {
                self.optimizer.warmup_fraction = parse_value(section, key, value)?;
            }
            ("optimizer", "weight_decay") => {
                self.optimizer.weight_decay = parse_value(section, key, value)?;
            }
            ("optimizer", "epsilon") => self.optimizer.epsilon = parse_value(section, key, value)?,
            ("optimizer", "beta1") => self.optimizer.beta1 = parse_value(section, key, value)?,
            ("optimizer", "beta2") => self.optimizer.beta2 = parse_value(section, key, value)?,
            ("optimizer", "decay_after_warmup") => {
                self.optimizer.decay_after_warmup = parse_value(section, key, value)?;
            }
            ("training", "phase1_lr") => self.phase1_lr = parse_value(section, key, value)?,
            ("training", "phase2_lr") => self.phase2_lr = parse_value(section, key, value)?,
            ("training", "patience") => self.patience = parse_value(section, key, value)?,
            ("training", "batch_size") => self.batch_size = parse_value(section, key, value)?,
            ("training", "max_epochs_per_phase") => {
                self.max_epochs_per_phase = parse_value(section, key, value)?;
            }
            ("training", "validation_fraction") => {
                self.validation_fraction = parse_value(section, key, value)?;
            }
            ("training", "seed") => self.train_seed = parse_value(section, key, value)?,
            ("training", "cache_frozen_features") => {
                self.cache_frozen_features = parse_value(section, key, value)?;
            }
            _ => {
                return Err(Error::Config(format!("unknown config key [{section}] {key}")));
            }
        }
        Ok(())
    }

    /// Parse file contents over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name {
                    "model" | "optimizer" | "training" => section = name.to_string(),
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section [{other}]",
                            line_no + 1
                        )));
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key outside any section",
                    line_no + 1
                )));
            }
            config.apply(&section, key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply `--set section.key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for set in sets {
            let (path, value) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set `{set}`: expected section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("--set `{set}`: expected section.key=value")))?;
            self.apply(section, key, value)?;
        }
        Ok(())
    }

    pub fn model_config(&self, variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            text: self.text.clone(),
            image: self.image.clone(),
            heads: self.heads.clone(),
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            phase1_lr: self.phase1_lr,
            phase2_lr: self.phase2_lr,
            patience: self.patience,
            batch_size: self.batch_size,
            max_epochs_per_phase: self.max_epochs_per_phase,
            validation_fraction: self.validation_fraction,
            seed: self.train_seed,
            cache_frozen_features: self.cache_frozen_features,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let config = RunConfig::parse("").unwrap();
        assert_eq!(config.patience, 30);
        assert_eq!(config.phase1_lr, 5e-4);
        assert_eq!(config.text.hidden_dim, 64);
    }

    #[test]
    fn sections_and_keys_apply() {
        let text = "\
[model]
text_hidden_dim = 32
image_channels = 4, 8, 8, 16, 16
[optimizer]
kind = lamb
[training]
batch_size = 4  # trailing comment
";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.text.hidden_dim, 32);
        assert_eq!(config.image.stack_channels, [4, 8, 8, 16, 16]);
        assert_eq!(config.optimizer.kind, OptimizerKind::Lamb);
        assert_eq!(config.batch_size, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\nlearning_rate = 1\n").is_err());
        assert!(RunConfig::parse("[mystery]\nx = 1\n").is_err());
        assert!(RunConfig::parse("stray = 1\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut config = RunConfig::parse("[training]\nbatch_size = 4\n").unwrap();
        config
            .apply_overrides(&["training.batch_size=8".to_string()])
            .unwrap();
        assert_eq!(config.batch_size, 8);
        assert!(config.apply_overrides(&["nope".to_string()]).is_err());
    }
}
