//! Experiment configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::synthetic::SyntheticTaskSpec;
use crate::data::{check_fractions, ResolutionFactors};
use crate::nn::{ConvSpec, LayerSpec, PoolSpec};
use crate::train::pipeline::ConcurrencySettings;
use crate::train::{Clock, PhaseSettings, ReductionPath, StagePlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// One layer as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        #[serde(default)]
        stride: Option<Vec<usize>>,
        #[serde(default)]
        padding: Option<Vec<usize>>,
    },
    AvgPool {
        kernel: Vec<usize>,
        #[serde(default)]
        stride: Option<Vec<usize>>,
    },
    BatchNorm {
        channels: usize,
    },
    Relu {},
    Tanh {},
    Flatten {},
    Fc {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerConfig {
    pub fn to_spec(&self) -> LayerSpec {
        match self {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let mut c = ConvSpec::new(*in_channels, *out_channels, kernel);
                if let Some(s) = stride {
                    c = c.with_stride(s);
                }
                if let Some(p) = padding {
                    c = c.with_padding(p);
                }
                LayerSpec::Conv(c)
            }
            LayerConfig::AvgPool { kernel, stride } => LayerSpec::AvgPool(PoolSpec {
                kernel: kernel.clone(),
                stride: stride.clone().unwrap_or_else(|| kernel.clone()),
            }),
            LayerConfig::BatchNorm { channels } => LayerSpec::BatchNorm { channels: *channels },
            LayerConfig::Relu {} => LayerSpec::Relu,
            LayerConfig::Tanh {} => LayerSpec::Tanh,
            LayerConfig::Flatten {} => LayerSpec::Flatten,
            LayerConfig::Fc {
                in_features,
                out_features,
            } => LayerSpec::FullyConnected {
                in_features: *in_features,
                out_features: *out_features,
            },
        }
    }
}

/// Exactly one of `synthetic` or `file`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticTaskSpec>,
    /// A `.mrd` dataset, relative to the config file.
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// Train, validation and test fractions for `file`.
    #[serde(default)]
    pub splits: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub coarse_factors: Vec<usize>,
    pub dense_factors: Vec<usize>,
    pub coarse: PhaseSettings,
    pub dense: PhaseSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Relative to the config file.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub clock: Clock,
    #[serde(default)]
    pub reduction: ReductionPath,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Fusion stages in order; empty for plain training.
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    /// Final training at the original resolution. Baseline runs use it too.
    pub finetune: PhaseSettings,
    #[serde(default)]
    pub concurrent: Option<ConcurrencySettings>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parses and validates; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(f) = &mut cfg.data.file {
            *f = base.join(&*f);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match (&self.data.synthetic, &self.data.file) {
            (Some(spec), None) => {
                if self.data.splits.is_some() {
                    return bad("data.splits only applies to data.file; synthetic tasks carry their own".into());
                }
                spec.validate()
                    .map_err(|e| ConfigError::Invalid(format!("data.synthetic: {e}")))?;
            }
            (None, Some(file)) => {
                if !file.is_file() {
                    return bad(format!("data.file {} does not exist", file.display()));
                }
                match self.data.splits {
                    Some(s) => check_fractions(s).map_err(|e| ConfigError::Invalid(format!("data.splits: {e}")))?,
                    None => return bad("data.file needs data.splits".into()),
                }
            }
            _ => return bad("data needs exactly one of `synthetic` or `file`".into()),
        }
        if self.model.layers.is_empty() {
            return bad("model.layers is empty".into());
        }
        self.stage_plans()?;
        Ok(())
    }

    /// Replaces every seed except the data seed: the model gets `seed` and
    /// the k-th phase in run order (coarse, dense per stage, then finetune)
    /// gets `1000 * seed + k`, counting from 1.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        let mut k = 0;
        let mut next = || {
            k += 1;
            1000 * seed + k
        };
        for s in &mut self.stages {
            s.coarse.seed = next();
            s.dense.seed = next();
        }
        self.finetune.seed = next();
        self
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.model.layers.iter().map(LayerConfig::to_spec).collect()
    }

    pub fn stage_plans(&self) -> Result<Vec<StagePlan>, ConfigError> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let factors = |f: &Vec<usize>, which: &str| {
                    ResolutionFactors::new(f.clone())
                        .map_err(|e| ConfigError::Invalid(format!("stages[{i}].{which}_factors: {e}")))
                };
                Ok(StagePlan {
                    coarse_factors: factors(&s.coarse_factors, "coarse")?,
                    dense_factors: factors(&s.dense_factors, "dense")?,
                    coarse: s.coarse.clone(),
                    dense: s.dense.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
output_dir = "out"

[data.synthetic]
extents = [16]
channels = 1
label_len = 2
components = 1
max_frequency = 2
amplitude = [0.5, 1.5]
seed = 1
samples = 10
splits = [0.8, 0.2, 0.0]

[model]
seed = 3
layers = [
  { kind = "conv", in_channels = 1, out_channels = 2, kernel = [3], stride = [2] },
  { kind = "relu" },
  { kind = "flatten" },
  { kind = "fc", in_features = 14, out_features = 2 },
]

[[stages]]
coarse_factors = [2]
dense_factors = [1]
coarse = { stop = { epsilon = 0.01, patience = 2, max_epochs = 5 }, optimizer = { kind = "adam", lr = 0.01 }, batch_size = 4, seed = 5 }
dense = { stop = { epsilon = 0.01, patience = 2, max_epochs = 5 }, optimizer = { kind = "adam", lr = 0.01 }, batch_size = 4, seed = 6 }

[finetune]
stop = { epsilon = 0.01, patience = 2, max_epochs = 5 }
optimizer = { kind = "sgd", lr = 0.1, momentum = 0.9 }
batch_size = 4
workers = 2
seed = 7
"#;

    #[test]
    fn parses_minimal() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(
            cfg.layer_specs()[0],
            LayerSpec::Conv(ConvSpec::new(1, 2, &[3]).with_stride(&[2]))
        );
        assert_eq!(cfg.stage_plans().unwrap().len(), 1);
        assert_eq!(cfg.finetune.workers, 2);
        assert_eq!(cfg.stages[0].coarse.workers, 1);
        assert_eq!(cfg.clock, Clock::Work);
    }

    #[test]
    fn unknown_keys_rejected() {
        for (from, to) in [
            ("name = \"t\"", "name = \"t\"\nlearning_rate = 1"),
            ("batch_size = 4\nworkers", "batch_size = 4\nbatchsize = 4\nworkers"),
            ("{ kind = \"relu\" }", "{ kind = \"relu\", slope = 0.1 }"),
            ("max_frequency = 2", "max_frequency = 2\nnoise = 0.1"),
        ] {
            let text = MINIMAL.replacen(from, to, 1);
            assert_ne!(text, MINIMAL);
            assert!(
                matches!(
                    ExperimentConfig::parse(&text, Path::new("")),
                    Err(ConfigError::Parse { .. })
                ),
                "{to}"
            );
        }
    }

    #[test]
    fn parse_error_names_line() {
        let text = MINIMAL.replacen("samples = 10", "samples = \"ten\"", 1);
        let err = ExperimentConfig::parse(&text, Path::new("")).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn missing_dataset_file_rejected() {
        let text = MINIMAL.replacen(
            "[data.synthetic]",
            "[data]\nfile = \"nope.mrd\"\nsplits = [0.5, 0.5, 0.0]\n[data.synthetic]",
            1,
        );
        assert!(matches!(
            ExperimentConfig::parse(&text, Path::new("")),
            Err(ConfigError::Invalid(_))
        ));
        let text = MINIMAL.replacen(
            "[data.synthetic]",
            "[data]\nfile = \"nope.mrd\"\nsplits = [0.5, 0.5, 0.0]\n[unused]",
            1,
        );
        assert!(ExperimentConfig::parse(&text, Path::new("/definitely/missing")).is_err());
    }

    #[test]
    fn reseeding_covers_every_phase() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("")).unwrap().with_seed(4);
        assert_eq!(cfg.model.seed, 4);
        assert_eq!((cfg.stages[0].coarse.seed, cfg.stages[0].dense.seed), (4001, 4002));
        assert_eq!(cfg.finetune.seed, 4003);
        assert_eq!(cfg.data.synthetic.as_ref().unwrap().seed, 1);
    }

    #[test]
    fn zero_factor_rejected() {
        let text = MINIMAL.replacen("coarse_factors = [2]", "coarse_factors = [0]", 1);
        assert!(matches!(
            ExperimentConfig::parse(&text, Path::new("")),
            Err(ConfigError::Invalid(_))
        ));
    }
}
