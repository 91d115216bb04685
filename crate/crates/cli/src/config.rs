//! Experiment configuration: one JSON document, command-line flags override
//! individual fields, and the resolved merge is archived into the output
//! directory before any work starts.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use uca_core::selection::SelectionConfig;
use uca_core::trainer::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetBuilder {
    MnistFlipped,
    MnistHalves,
    FeatureTables,
}

impl std::str::FromStr for DatasetBuilder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist-flipped" => Ok(DatasetBuilder::MnistFlipped),
            "mnist-halves" => Ok(DatasetBuilder::MnistHalves),
            "feature-tables" => Ok(DatasetBuilder::FeatureTables),
            other => Err(format!(
                "unknown dataset '{other}' (expected mnist-flipped, mnist-halves or feature-tables)"
            )),
        }
    }
}

fn default_images() -> PathBuf {
    PathBuf::from("data/mnist/train-images-idx3-ubyte.gz")
}

fn default_labels() -> PathBuf {
    PathBuf::from("data/mnist/train-labels-idx1-ubyte.gz")
}

fn default_test_images() -> Option<PathBuf> {
    Some(PathBuf::from("data/mnist/t10k-images-idx3-ubyte.gz"))
}

fn default_test_labels() -> Option<PathBuf> {
    Some(PathBuf::from("data/mnist/t10k-labels-idx1-ubyte.gz"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub builder: DatasetBuilder,
    #[serde(default = "default_images")]
    pub images: PathBuf,
    #[serde(default = "default_labels")]
    pub labels: PathBuf,
    #[serde(default = "default_test_images")]
    pub test_images: Option<PathBuf>,
    #[serde(default = "default_test_labels")]
    pub test_labels: Option<PathBuf>,
    /// Generic pre-encoded feature tables (row-aligned across the two files).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_format: Option<uca_core::data::TableFormat>,
    /// Keep only the first `limit` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            builder: DatasetBuilder::MnistFlipped,
            images: default_images(),
            labels: default_labels(),
            test_images: default_test_images(),
            test_labels: default_test_labels(),
            x_table: None,
            y_table: None,
            table_format: None,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BaselineToggles {
    #[serde(default)]
    pub cca10: bool,
    #[serde(default)]
    pub cca50: bool,
    #[serde(default)]
    pub sup_uca: bool,
    #[serde(default)]
    pub direct_gan: bool,
    #[serde(default)]
    pub oracle: bool,
}

impl BaselineToggles {
    pub fn any(&self) -> bool {
        self.cca10 || self.cca50 || self.sup_uca || self.direct_gan
    }
}

fn default_train() -> TrainConfig {
    TrainConfig::for_variant(Variant::LatentUca)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub baselines: BaselineToggles,
    pub out: PathBuf,
    /// 0 = one worker per available CPU.
    #[serde(default)]
    pub workers: usize,
    /// Injected at archive time.
    #[serde(default)]
    pub tool_version: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            train: default_train(),
            selection: SelectionConfig::default(),
            baselines: BaselineToggles::default(),
            out: PathBuf::from("runs/experiment"),
            workers: 0,
            tool_version: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn effective_workers(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            self.workers
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    /// Archive the resolved configuration (with the tool version) into the
    /// output directory.
    pub fn archive(&self) -> Result<(), uca_core::UcaError> {
        let mut stamped = self.clone();
        stamped.tool_version = env!("CARGO_PKG_VERSION").to_string();
        std::fs::create_dir_all(&self.out)
            .map_err(|e| uca_core::UcaError::io(self.out.display().to_string(), e))?;
        let path = self.out.join("config.json");
        let mut body = serde_json::to_string_pretty(&stamped)
            .map_err(|e| uca_core::UcaError::Data(format!("config encode: {e}")))?;
        body.push('\n');
        std::fs::write(&path, body)
            .map_err(|e| uca_core::UcaError::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Load a config file (or defaults) and fold the command-line overrides in.
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub variant: Option<Variant>,
    pub k: Option<usize>,
    pub latent_dim: Option<usize>,
    pub component: Option<usize>,
    pub dataset: Option<DatasetBuilder>,
}

pub fn resolve(
    config_path: Option<&Path>,
    overrides: &Overrides,
) -> Result<ExperimentConfig, String> {
    let mut config: ExperimentConfig = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| format!("bad config {}: {e}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.out = out.clone();
    }
    if let Some(workers) = overrides.workers {
        config.workers = workers;
    }
    if let Some(variant) = overrides.variant {
        config.train.variant = variant;
        config.train.weights = variant.weights();
    }
    if let Some(k) = overrides.k {
        config.train.k = k;
    }
    if let Some(d) = overrides.latent_dim {
        config.train.d = d;
    }
    if let Some(c) = overrides.component {
        config.selection.component_index = c;
    }
    if let Some(builder) = &overrides.dataset {
        config.dataset.builder = builder.clone();
    }
    if config.train.d == 0 {
        return Err("latent dimension must be at least 1".into());
    }
    if config.train.k == 0 {
        return Err("k must be at least 1".into());
    }
    Ok(config)
}
