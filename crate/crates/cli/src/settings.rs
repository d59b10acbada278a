//! Training settings: a flat TOML file whose keys double as command flags.
//! Flags win over file values, file values win over the preset.

use std::path::Path;

use cbag::model::{ModelConfig, VocabSizes};
use cbag::trainer::{LambConfig, TrainConfig};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationMode {
    Sampled,
    Viterbi,
}

#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// Architecture preset the other model keys override
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Total number of optimizer steps; a resumed run continues up to it
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_blocks: Option<usize>,
    #[arg(long)]
    pub decoder_blocks: Option<usize>,
    #[arg(long)]
    pub ff_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Seed for initialization, record order, windows and dropout
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of the records between checkpoints
    #[arg(long)]
    pub epoch_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub segmentation: Option<SegmentationMode>,
    #[arg(long)]
    pub segmentation_temperature: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Log every this many steps
    #[arg(long)]
    pub log_every: Option<u64>,
}

pub const DEFAULT_STEPS: u64 = 2000;
pub const DEFAULT_LOG_EVERY: u64 = 50;

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        TrainSettings { $($field: $flags.$field.or($file.$field)),+ }
    };
}

impl TrainSettings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Fields set here take precedence over `file`.
    pub fn over(self, file: TrainSettings) -> Self {
        overlay!(
            self,
            file,
            preset,
            steps,
            d_model,
            heads,
            encoder_blocks,
            decoder_blocks,
            ff_size,
            dropout,
            max_seq,
            batch_size,
            peak_lr,
            warmup,
            seed,
            epoch_fraction,
            segmentation,
            segmentation_temperature,
            beta1,
            beta2,
            eps,
            weight_decay,
            log_every
        )
    }

    pub fn model_config(&self, sizes: VocabSizes) -> ModelConfig {
        let base = match self.preset.unwrap_or_default() {
            Preset::Toy => ModelConfig::toy(sizes),
            Preset::Full => ModelConfig::full(sizes),
        };
        ModelConfig {
            d_model: self.d_model.unwrap_or(base.d_model),
            heads: self.heads.unwrap_or(base.heads),
            encoder_blocks: self.encoder_blocks.unwrap_or(base.encoder_blocks),
            decoder_blocks: self.decoder_blocks.unwrap_or(base.decoder_blocks),
            ff_size: self.ff_size.unwrap_or(base.ff_size),
            dropout: self.dropout.unwrap_or(base.dropout),
            max_seq: self.max_seq.unwrap_or(base.max_seq),
            ..base
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let base = TrainConfig::default();
        let lamb = LambConfig::default();
        let temperature = self
            .segmentation_temperature
            .or(base.segmentation_temperature)
            .unwrap_or(1.0);
        let segmentation_temperature = match self.segmentation {
            Some(SegmentationMode::Viterbi) => {
                if self.segmentation_temperature.is_some() {
                    return Err(CliError::usage(
                        "segmentation_temperature cannot be combined with segmentation = viterbi",
                    ));
                }
                None
            }
            _ => Some(temperature),
        };
        Ok(TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            peak_lr: self.peak_lr.unwrap_or(base.peak_lr),
            warmup: self.warmup.unwrap_or(base.warmup),
            lamb: LambConfig {
                beta1: self.beta1.unwrap_or(lamb.beta1),
                beta2: self.beta2.unwrap_or(lamb.beta2),
                eps: self.eps.unwrap_or(lamb.eps),
                weight_decay: self.weight_decay.unwrap_or(lamb.weight_decay),
            },
            seed: self.seed.unwrap_or(base.seed),
            epoch_fraction: self.epoch_fraction.unwrap_or(base.epoch_fraction),
            segmentation_temperature,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps.unwrap_or(DEFAULT_STEPS)
    }

    pub fn log_every(&self) -> u64 {
        self.log_every.unwrap_or(DEFAULT_LOG_EVERY).max(1)
    }
}
