//! Run configuration: a strict TOML document. Unknown keys are fatal, and
//! every command echoes the fully-resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hrl_core::backbone::BackboneConfig;
use hrl_core::encoder::{ModelConfig, Variant};
use hrl_core::metrics::Task;
use hrl_core::synth::{Dataset, PhantomConfig};
use hrl_core::train::{EvalConfig, Pipeline, TrainHyper};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest to load; mutually exclusive with `generator`.
    pub manifest: Option<PathBuf>,
    /// Synthesize the dataset in-process from this phantom description.
    pub generator: Option<PhantomConfig>,
    /// Second dataset for transfer evaluation.
    pub target_manifest: Option<PathBuf>,
    /// Target-to-source label pairs for transfer with differing label sets.
    pub label_map: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub hidden_size: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub depth: usize,
    pub variant: String,
    /// Defaults to the dataset's feature width; 0 disables the stream.
    pub handcrafted_len: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: BackboneConfig::desk(8, 1),
            hidden_size: 32,
            heads: 4,
            mlp_dim: 64,
            depth: 1,
            variant: "full".to_string(),
            handcrafted_len: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, dataset: &Dataset) -> anyhow::Result<(BackboneConfig, ModelConfig)> {
        let variant: Variant = self.variant.parse()?;
        let handcrafted_len = match variant {
            Variant::DataDrivenOnly => 0,
            _ => self.handcrafted_len.unwrap_or_else(|| dataset.feature_len()),
        };
        let cfg = ModelConfig {
            hidden_size: self.hidden_size,
            heads: self.heads,
            mlp_dim: self.mlp_dim,
            depth: self.depth,
            classes: dataset.class_count(),
            handcrafted_len,
            variant,
        };
        cfg.validate()?;
        self.backbone.validate()?;
        Ok((self.backbone.clone(), cfg))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSection {
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainHyper,
    pub eval: EvalConfig,
    pub pipeline: Pipeline,
    pub export: ExportSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Load the dataset named by the config: a manifest if given, otherwise
    /// the in-process generator.
    pub fn load_dataset(&self) -> anyhow::Result<Dataset> {
        match (&self.data.manifest, &self.data.generator) {
            (Some(path), None) => Ok(hrl_core::io::read_dataset(path)?),
            (None, Some(generator)) => Ok(hrl_core::synth::generate_dataset(generator, self.seed)?),
            (Some(_), Some(_)) => bail!("config names both a manifest and a generator"),
            (None, None) => bail!("config needs data.manifest or data.generator"),
        }
    }

    pub fn task(&self) -> Task {
        self.eval.task
    }

    /// Serialize the resolved config next to the outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self).context("serialize resolved config")?;
        std::fs::write(out_dir.join("resolved-config.toml"), text)?;
        Ok(())
    }
}
