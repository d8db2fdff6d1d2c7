//! Run configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use exitbench_core::corrupt::CorruptionSpec;
use exitbench_core::net::{BackboneKind, TrainConfig, DEFAULT_EXIT_FRACTIONS};
use exitbench_core::robust::{AdaptConfig, AugMixConfig};
use exitbench_core::strategies::{StrategyConfig, AGREEMENT_GRID, CONFIDENCE_GRID, PATIENCE_GRID};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated glyph images.
    Minishapes { n: usize, seed: u64 },
    /// One or more CIFAR-10 binary batch files, concatenated.
    Cifar10Bin { files: Vec<PathBuf> },
    /// A dataset container directory.
    Container { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub test: DataSource,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Held-out part of the training set, used for validation accuracy.
    #[serde(default)]
    pub val_size: usize,
}

fn default_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub widths: [usize; 3],
    pub exit_fractions: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Convnet8,
            widths: [16, 32, 64],
            exit_fractions: DEFAULT_EXIT_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    #[default]
    Plain,
    Augmix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: TrainMethod,
    pub train: TrainConfig,
    pub augmix: AugMixConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub batch_size: usize,
    /// Adapt once on all corrupted splits together instead of per split.
    pub pooled: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            batch_size: AdaptConfig::default().batch_size,
            pooled: false,
        }
    }
}

impl AdaptSection {
    pub fn config(&self) -> AdaptConfig {
        AdaptConfig {
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub batch_size: usize,
    /// Store per-exit representations; forced on when kNN is swept.
    pub include_repr: bool,
    /// Trace corrupted splits with their batch-norm adapted checkpoints.
    pub use_adapted: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            include_repr: false,
            use_adapted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub confidence: Vec<f64>,
    pub patience: Vec<f64>,
    /// Neighbour counts; empty disables the kNN strategy.
    pub knn_k: Vec<usize>,
    pub agreement: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            confidence: CONFIDENCE_GRID.to_vec(),
            patience: PATIENCE_GRID.to_vec(),
            knn_k: Vec::new(),
            agreement: AGREEMENT_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strategy: StrategyConfig,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::Confidence { threshold: 0.8 },
            bins: exitbench_core::metrics::DEFAULT_CALIBRATION_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub corruptions: Vec<CorruptionSpec>,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Read and validate a config. Relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for source in [&mut self.data.train, &mut self.data.test] {
            match source {
                DataSource::Cifar10Bin { files } => files.iter_mut().for_each(fix),
                DataSource::Container { dir } => fix(dir),
                DataSource::Minishapes { .. } => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "schema_version: expected {CONFIG_SCHEMA_VERSION}, found {}",
                self.schema_version
            );
        }
        for (key, source) in [("data.train", &self.data.train), ("data.test", &self.data.test)] {
            let paths: Vec<&PathBuf> = match source {
                DataSource::Cifar10Bin { files } if files.is_empty() => {
                    bail!("{key}.cifar10_bin.files: no files listed")
                }
                DataSource::Cifar10Bin { files } => files.iter().collect(),
                DataSource::Container { dir } => vec![dir],
                DataSource::Minishapes { .. } => Vec::new(),
            };
            if let Some(missing) = paths.iter().find(|p| !p.exists()) {
                bail!("{key}: path {} does not exist", missing.display());
            }
        }
        self.training
            .train
            .validate()
            .context("training.train")?;
        self.training.augmix.validate().context("training.augmix")?;
        self.eval.strategy.validate().context("eval.strategy")?;
        if self.eval.bins == 0 {
            bail!("eval.bins: must be positive");
        }
        for (i, c) in self.corruptions.iter().enumerate() {
            c.kind
                .parameter(c.severity)
                .with_context(|| format!("corruptions[{i}]"))?;
        }
        if self.trace.batch_size == 0 {
            bail!("trace.batch_size: must be positive");
        }
        Ok(())
    }

    pub fn knn_enabled(&self) -> bool {
        !self.sweep.knn_k.is_empty() || matches!(self.eval.strategy, StrategyConfig::Knn { .. })
    }
}
