//! Run configuration: one JSON document, overridden by command-line flags and
//! persisted in resolved form next to every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ddm_core::data::{PreprocessOptions, SyntheticOptions};
use ddm_core::networks::NetworkConfig;
use ddm_core::trainer::TrainConfig;
use ddm_core::GridShape;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// ACDC-layout directory; synthetic subjects are generated when absent.
    pub path: Option<PathBuf>,
    /// Train share of a deterministic subject split; `None` trains and
    /// evaluates on every subject.
    pub train_fraction: Option<f64>,
    pub load_intermediate: bool,
    pub preprocess: PreprocessOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            train_fraction: None,
            load_intermediate: true,
            preprocess: PreprocessOptions {
                target_shape: [32, 32, 8],
                ..PreprocessOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub options: SyntheticOptions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 5,
            options: SyntheticOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1.0, 5.0, 20.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub device: Device,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SynthConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
}

impl std::str::FromStr for Device {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(format!("unsupported device {other:?}; this build runs on cpu only")),
        }
    }
}

/// Flag values that override the config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shape: Option<GridShape>,
    pub data: Option<PathBuf>,
    pub device: Option<Device>,
    pub frames: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (or defaults) with flag overrides applied, then validated.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = o.seed {
            cfg.train.seed = seed;
            cfg.synthetic.seed = seed;
        }
        if let Some(shape) = o.shape {
            cfg.network.image_shape = shape;
            cfg.data.preprocess.target_shape = shape.0;
            cfg.synthetic.options.shape = shape.0;
        }
        if let Some(d) = &o.data {
            cfg.data.path = Some(d.clone());
        }
        if let Some(dev) = o.device {
            cfg.device = dev;
        }
        if let Some(n) = o.frames {
            cfg.synthetic.options.n_frames = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        let shape = self.network.image_shape.0;
        if self.data.preprocess.target_shape != shape || self.synthetic.options.shape != shape {
            bail!(
                "inconsistent shapes: network {}, preprocess {:?}, synthetic {:?}",
                self.network.image_shape,
                self.data.preprocess.target_shape,
                self.synthetic.options.shape
            );
        }
        if self.synthetic.count == 0 {
            bail!("synthetic.count must be positive");
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
