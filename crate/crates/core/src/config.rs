//! Experiment configuration: one JSON document holding every seed, size and
//! training or attack knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{AttackConfig, TransferOptions};
use crate::base::{AdvTrainConfig, BaseDims, HeadTrainConfig};
use crate::dfa::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{AblationFlags, RopustDims};
use crate::retrieval::{GridSpec, RetrievalSeeds};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Feature 64, projection 64 -> 512.
    Desk,
    /// Feature 512, projection 512 -> 8000.
    PaperDims,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper-dims" => Ok(Preset::PaperDims),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`, expected `desk` or `paper-dims`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperDims => "paper-dims",
        }
    }

    pub fn dims(self) -> Dims {
        let (feature, opu_in, opu_out) = match self {
            Preset::Desk => (64, 64, 512),
            Preset::PaperDims => (512, 512, 8000),
        };
        Dims {
            input: 784,
            hidden: 256,
            feature,
            opu_in,
            opu_out,
            classes: 10,
        }
    }
}

/// Named seeds; any left out is derived from `global` by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub global: u64,
    pub opu: Option<u64>,
    pub r: Option<u64>,
    pub b: Option<u64>,
    pub decoy: Option<u64>,
    pub mask: Option<u64>,
    pub data_shuffle: Option<u64>,
    pub base_init: Option<u64>,
    pub ropust_init: Option<u64>,
    pub attack: Option<u64>,
}

impl Seeds {
    pub fn resolve(&mut self) {
        let g = self.global;
        for (slot, name) in [
            (&mut self.opu, "opu"),
            (&mut self.r, "r"),
            (&mut self.b, "b"),
            (&mut self.decoy, "decoy"),
            (&mut self.mask, "mask"),
            (&mut self.data_shuffle, "data_shuffle"),
            (&mut self.base_init, "base_init"),
            (&mut self.ropust_init, "ropust_init"),
            (&mut self.attack, "attack"),
        ] {
            slot.get_or_insert_with(|| derive_seed(g, name));
        }
    }

    fn get(v: Option<u64>, name: &str) -> u64 {
        v.unwrap_or_else(|| panic!("seed `{name}` used before resolution"))
    }

    pub fn opu(&self) -> u64 {
        Self::get(self.opu, "opu")
    }
    pub fn r(&self) -> u64 {
        Self::get(self.r, "r")
    }
    pub fn b(&self) -> u64 {
        Self::get(self.b, "b")
    }
    pub fn base_init(&self) -> u64 {
        Self::get(self.base_init, "base_init")
    }
    pub fn ropust_init(&self) -> u64 {
        Self::get(self.ropust_init, "ropust_init")
    }
    pub fn attack(&self) -> u64 {
        Self::get(self.attack, "attack")
    }
    pub fn data_shuffle(&self) -> u64 {
        Self::get(self.data_shuffle, "data_shuffle")
    }
    pub fn retrieval(&self) -> RetrievalSeeds {
        RetrievalSeeds {
            mask: Self::get(self.mask, "mask"),
            decoy: Self::get(self.decoy, "decoy"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub opu_in: usize,
    pub opu_out: usize,
    pub classes: usize,
}

impl Dims {
    pub fn base(&self) -> BaseDims {
        BaseDims {
            input: self.input,
            hidden: self.hidden,
            feature: self.feature,
            classes: self.classes,
        }
    }

    pub fn ropust(&self) -> RopustDims {
        RopustDims {
            feature: self.feature,
            opu_in: self.opu_in,
            opu_out: self.opu_out,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the four IDX files.
    pub dir: PathBuf,
    /// Leading training samples used; all when absent.
    pub n_train: Option<usize>,
    /// Leading test samples used for every evaluation.
    pub n_test: usize,
    /// Training samples whose projections set the output quantization scale.
    pub calibration_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/mnist"),
            n_train: None,
            n_test: 1000,
            calibration_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub grid: GridSpec,
    /// Leading test samples attacked at every grid cell.
    pub n_samples: usize,
    /// APGD-CE iterations per cell.
    pub n_iter: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            n_samples: 500,
            n_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seeds: Seeds,
    pub dims: Dims,
    pub data: DataConfig,
    pub base_train: AdvTrainConfig,
    /// Natural-training twin of the base network, for comparison only.
    pub natural_twin: bool,
    pub ropust_train: TrainConfig,
    pub head_train: HeadTrainConfig,
    pub flags: AblationFlags,
    pub attack: AttackConfig,
    pub transfer: TransferOptions,
    pub retrieval: RetrievalConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            seeds: Seeds::default(),
            dims: preset.dims(),
            data: DataConfig::default(),
            base_train: AdvTrainConfig::default(),
            natural_twin: true,
            ropust_train: TrainConfig::default(),
            head_train: HeadTrainConfig::default(),
            flags: AblationFlags::default(),
            attack: AttackConfig::default(),
            transfer: TransferOptions::default(),
            retrieval: RetrievalConfig::default(),
            out_dir: PathBuf::from(format!("runs/{}", preset.name())),
        }
    }

    /// Parses a config document laid over the defaults of its preset (or of
    /// `preset_override` when given); fills and distributes the seeds.
    pub fn from_json_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(mut map) = user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset = match (preset_override, map.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            (None, None) => Preset::Desk,
        };
        if preset_override.is_some() {
            map.remove("dims");
        }
        map.insert("preset".into(), serde_json::to_value(preset)?);
        let mut merged = serde_json::to_value(Self::preset(preset))?;
        merge(&mut merged, Value::Object(map));
        let mut cfg: Self =
            serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, preset_override)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    /// Resolves seeds, pushes them into the sub-configs and validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.seeds.resolve();
        let s = self.seeds;
        self.base_train.seed = derive_seed(s.data_shuffle(), "base_train");
        self.ropust_train.seed = derive_seed(s.data_shuffle(), "ropust_train");
        self.head_train.seed = derive_seed(s.data_shuffle(), "head_train");
        self.attack.seed = s.attack();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        let d = self.dims;
        if [d.input, d.hidden, d.feature, d.opu_in, d.opu_out].contains(&0) || d.classes < 2 {
            return Err(Error::Config(format!("invalid dims {d:?}")));
        }
        self.dims.ropust().validate().map_err(cfg)?;
        self.base_train.validate().map_err(cfg)?;
        self.ropust_train.validate().map_err(cfg)?;
        self.head_train.optimizer.validate().map_err(cfg)?;
        self.flags.validate().map_err(cfg)?;
        self.attack.validate().map_err(cfg)?;
        self.retrieval.grid.validate().map_err(cfg)?;
        if self.data.n_test == 0 || self.retrieval.n_samples == 0 || self.retrieval.n_iter == 0 {
            return Err(Error::Config(
                "data.n_test, retrieval.n_samples and retrieval.n_iter must be positive".into(),
            ));
        }
        if self.data.calibration_samples == 0 {
            return Err(Error::Config(
                "data.calibration_samples must be positive".into(),
            ));
        }
        if self.data.n_train == Some(0) {
            return Err(Error::Config("data.n_train must be positive".into()));
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
