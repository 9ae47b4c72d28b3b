//! Flat run configuration: built-in defaults, then a TOML file, then
//! `--set key=value` overrides, then dedicated flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svs_core::corpus::OracleConfig;
use svs_core::model::ModelConfig;
use svs_core::training::{LossWeights, TrainConfig};

/// Bad flags or configuration; the process exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub run_dir: PathBuf,

    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Loss-log lines between progress messages on stderr.
    pub log_every: u64,

    pub w_pd: f64,
    pub w_sd: f64,
    pub w_m: f64,
    pub w_b: f64,
    pub w_f: f64,
    pub w_u: f64,

    pub hidden_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub conv_kernel_size: usize,
    pub conv_filter_dim: usize,
    pub phoneme_vocab_size: usize,
    pub pitch_vocab_size: usize,
    pub max_note_frames: usize,
    pub dropout: f64,

    pub oracle_seed: u64,
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_log: f64,
    pub transition_frames: usize,
    pub consonant_fraction: f64,
    pub voiced_consonants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default(), &OracleConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(train: &TrainConfig, oracle: &OracleConfig) -> Self {
        let (w, m) = (&train.loss_weights, &train.model);
        Self {
            manifest: None,
            run_dir: PathBuf::from("run"),
            seed: train.seed,
            batch_size: train.batch_size,
            total_steps: train.total_steps,
            warmup_steps: train.warmup_steps,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            log_every: 100,
            w_pd: w.w_pd,
            w_sd: w.w_sd,
            w_m: w.w_m,
            w_b: w.w_b,
            w_f: w.w_f,
            w_u: w.w_u,
            hidden_dim: m.hidden_dim,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            attention_heads: m.attention_heads,
            conv_kernel_size: m.conv_kernel_size,
            conv_filter_dim: m.conv_filter_dim,
            phoneme_vocab_size: m.phoneme_vocab_size,
            pitch_vocab_size: m.pitch_vocab_size,
            max_note_frames: m.max_note_frames,
            dropout: m.dropout,
            oracle_seed: oracle.seed,
            vibrato_rate_hz: oracle.vibrato_rate_hz,
            vibrato_depth_log: oracle.vibrato_depth_log,
            transition_frames: oracle.transition_frames,
            consonant_fraction: oracle.consonant_fraction,
            voiced_consonants: oracle.voiced_consonants.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            seed: self.seed,
            loss_weights: LossWeights {
                w_pd: self.w_pd,
                w_sd: self.w_sd,
                w_m: self.w_m,
                w_b: self.w_b,
                w_f: self.w_f,
                w_u: self.w_u,
            },
            model: ModelConfig {
                hidden_dim: self.hidden_dim,
                encoder_blocks: self.encoder_blocks,
                decoder_blocks: self.decoder_blocks,
                attention_heads: self.attention_heads,
                conv_kernel_size: self.conv_kernel_size,
                conv_filter_dim: self.conv_filter_dim,
                phoneme_vocab_size: self.phoneme_vocab_size,
                pitch_vocab_size: self.pitch_vocab_size,
                max_note_frames: self.max_note_frames,
                dropout: self.dropout,
                ..ModelConfig::tiny()
            },
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            seed: self.oracle_seed,
            vibrato_rate_hz: self.vibrato_rate_hz,
            vibrato_depth_log: self.vibrato_depth_log,
            transition_frames: self.transition_frames,
            consonant_fraction: self.consonant_fraction,
            voiced_consonants: self.voiced_consonants.clone(),
        }
    }

    /// Replaces the training fields with those of `train`, keeping paths,
    /// oracle settings and `log_every`.
    pub fn with_train(&self, train: &TrainConfig) -> Self {
        Self {
            manifest: self.manifest.clone(),
            run_dir: self.run_dir.clone(),
            log_every: self.log_every,
            ..Self::from_parts(train, &self.oracle_config())
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    /// Defaults, overlaid with `file` and then the `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let base = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                Self::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => Self::default(),
        };
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut table = toml::Table::try_from(&base).expect("flat config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got '{item}'")))?;
            table.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("--set: {}", e.message())))
    }
}

/// A TOML literal if `raw` parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
