use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectionNoiseConfig, FeatureMapKind, GridSpec};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, TrainConfig};
use crate::outlier::ScalingConfig;
use crate::scene::{Catalog, ClassSpec, SceneParams, SplitCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    /// Class catalog; the built-in road catalog when empty.
    pub classes: Vec<ClassSpec>,
    pub scene: SceneParams,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            seed: 2024,
            train_scenes: 6000,
            val_scenes: 300,
            test_scenes: 400,
            classes: Vec::new(),
            scene: SceneParams::default(),
        }
    }
}

impl DatasetSection {
    pub fn catalog(&self) -> Catalog {
        if self.classes.is_empty() {
            Catalog::default_road()
        } else {
            Catalog::new(self.classes.clone())
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_scenes,
            val: self.val_scenes,
            test: self.test_scenes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub grid: GridSpec,
    pub noise: DetectionNoiseConfig,
    pub feature_map: FeatureMapKind,
    /// Reuse one detection-noise realization for every seed.
    pub freeze_noise: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            noise: DetectionNoiseConfig::default(),
            feature_map: FeatureMapKind::default(),
            freeze_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub seeds: Vec<u64>,
    pub embed_dim: usize,
    pub dropout: f64,
    pub use_box: bool,
    pub use_cls: bool,
    pub scaling: ScalingConfig,
    pub train: TrainConfig,
}

impl Default for HeadSection {
    fn default() -> Self {
        let m = HeadConfig::default();
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            embed_dim: m.embed_dim,
            dropout: m.dropout,
            use_box: m.use_box,
            use_cls: m.use_cls,
            scaling: ScalingConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl HeadSection {
    pub fn model(&self) -> HeadConfig {
        HeadConfig {
            embed_dim: self.embed_dim,
            dropout: self.dropout,
            use_box: self.use_box,
            use_cls: self.use_cls,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: super::DEFAULT_METHODS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub detector: DetectorSection,
    pub head: HeadSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.catalog().validate()?;
        d.scene.validate()?;
        if d.train_scenes == 0 || d.val_scenes == 0 || d.test_scenes == 0 {
            return Err(Error::InvalidConfig("every split needs at least one scene".into()));
        }
        self.detector.grid.validate()?;
        self.detector.noise.validate()?;
        if self.head.seeds.is_empty() {
            return Err(Error::InvalidConfig("head.seeds must not be empty".into()));
        }
        self.head.model().validate()?;
        self.head.scaling.validate()?;
        self.head.train.validate()?;
        if self.eval.methods.is_empty() {
            return Err(Error::InvalidConfig("eval.methods must not be empty".into()));
        }
        for m in &self.eval.methods {
            super::Method::parse(m)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Digest of the fields that determine the generated dataset.
    pub fn dataset_digest(&self) -> String {
        let canonical = serde_json::to_vec(&self.dataset).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
