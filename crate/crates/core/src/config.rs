//! Run configuration: every tunable constant in one TOML-serializable tree,
//! with the shipped presets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::decode::DecodeConfig;
use crate::encoder::{EncoderConfig, Positional};
use crate::error::{config_err, Error, Result};
use crate::eval::EvalConfig;
use crate::heads::HeadConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::pretrain::PretrainConfig;
use crate::semisup::FinetuneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Long-video regime: `T = 100`, tIoU grid 0.5:0.05:0.95, SoftNMS 0.6.
    Large,
    /// Dense regime: `T = 256`, tIoU grid 0.3..0.7, SoftNMS 0.4.
    Small,
    /// CPU-sized benchmark used by the test suite.
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(Self::Large),
            "small" => Ok(Self::Small),
            "toy" => Ok(Self::Toy),
            other => Err(config_err(format!("unknown preset `{other}` (expected large, small or toy)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Large => "large",
            Self::Small => "small",
            Self::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Large => Self::benchmark(preset, 100, 0.6, EvalConfig::large()),
            Preset::Small => Self::benchmark(preset, 256, 0.4, EvalConfig::small()),
            Preset::Toy => Self::toy(),
        }
    }

    fn benchmark(preset: Preset, t_len: usize, nms: f64, eval: EvalConfig) -> Self {
        let data = SyntheticConfig::default();
        let encoder = EncoderConfig {
            positional: Positional::Sinusoidal,
            ..EncoderConfig::default()
        };
        let heads = HeadConfig {
            mask_hidden: encoder.embed_dim,
            ..HeadConfig::default()
        };
        Self {
            preset,
            seed: 0,
            model: ModelConfig {
                t_len,
                num_classes: data.num_classes,
                input_dim: 2 * data.half_dim,
                encoder,
                heads,
            },
            data,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            decode: DecodeConfig {
                softnms_threshold: nms,
                ..DecodeConfig::default()
            },
            eval,
        }
    }

    fn toy() -> Self {
        let data = SyntheticConfig::default();
        let adam = AdamConfig {
            lr: 2e-3,
            weight_decay: 1.0,
            ..AdamConfig::default()
        };
        Self {
            preset: Preset::Toy,
            seed: 0,
            model: ModelConfig {
                t_len: 40,
                num_classes: data.num_classes,
                input_dim: 2 * data.half_dim,
                encoder: EncoderConfig {
                    embed_dim: 64,
                    heads: 4,
                    layers: 2,
                    ff_dim: 128,
                    refine_dim: 32,
                    class_proj_dim: 32,
                    dropout: 0.0,
                    positional: Positional::Sinusoidal,
                    ..EncoderConfig::default()
                },
                heads: HeadConfig {
                    mask_hidden: 128,
                    ..HeadConfig::default()
                },
            },
            data,
            pretrain: PretrainConfig {
                epochs: 12,
                adam,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 15,
                warmup_epochs: 8,
                adam,
                ..FinetuneConfig::default()
            },
            decode: DecodeConfig::default(),
            eval: EvalConfig::large(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.decode.validate()?;
        self.eval.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(config_err("model.num_classes must equal data.num_classes"));
        }
        if self.model.input_dim != 2 * self.data.half_dim {
            return Err(config_err("model.input_dim must equal 2 * data.half_dim"));
        }
        if self.finetune.warmup_epochs > self.finetune.epochs {
            return Err(config_err("finetune.warmup_epochs exceeds finetune.epochs"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(reason) => Error::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}
