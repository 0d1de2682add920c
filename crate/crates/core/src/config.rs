//! Run configuration: one TOML file with `--set key=value` overrides, hashed
//! so every artifact can be traced to the config that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DecodingSpec;
use crate::model::ModelConfig;
use crate::projector::ProjectorConfig;
use crate::rl::RlConfig;
use crate::sft::SftConfig;
use crate::task::{mix_seed, DatasetConfig};
use crate::trajectory::{FormatGrammar, LatentPosition};

/// First 16 hex digits of the SHA-256 of the value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("config serializes");
    // serde_json maps are sorted by key, which makes the text canonical.
    let text = serde_json::to_string(&json).expect("json value serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Dataset shape and split sizes. Scene, render and teacher settings are
/// shared by both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Template for both splits; its seed, count, latent size, position and
    /// image side are filled in by [`RunConfig::resolve`].
    pub generator: DatasetConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            test_count: 500,
            generator: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `train.jsonl` and `test.jsonl`; generated in memory
    /// when absent.
    pub data: Option<PathBuf>,
    /// Input checkpoint: stage-1 weights for `train-rl`, the weights to
    /// score for `eval` and `export-latents`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// `"train"` or `"test"`.
    pub split: String,
    pub count: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            count: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Every row is run once per seed.
    pub seeds: Vec<u64>,
    /// Run stage 2 after stage 1 for the latent-size and token-position
    /// axes; the reward axis always runs it.
    pub with_rl: bool,
    pub latent_sizes: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            with_rl: true,
            latent_sizes: vec![4, 8, 12, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    /// Latent block size `k`, shared by the model, the data and the grammar.
    pub latent_size: usize,
    pub position: LatentPosition,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub projector: ProjectorConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: DecodingSpec,
    pub export: ExportConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_size: 12,
            position: LatentPosition::Beginning,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            projector: ProjectorConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: DecodingSpec::default(),
            export: ExportConfig::default(),
            ablation: AblationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Component seed, kept below 2^63 so it fits a TOML integer.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix_seed(seed, salt) >> 1
}

const SALT_TRAIN: u64 = 1;
const SALT_TEST: u64 = 2;
const SALT_INIT: u64 = 3;
const SALT_SFT: u64 = 4;
const SALT_RL: u64 = 5;
const SALT_EVAL: u64 = 6;

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads `path` (defaults when `None`), applies `key=value` overrides
    /// and resolves derived fields.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    /// Copies the shared settings into each section, derives component
    /// seeds from the master seed and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let k = self.latent_size;
        self.model.latent_size = k;
        self.model.init_seed = derive_seed(self.seed, SALT_INIT);
        self.projector.d_latent = self.model.d_model;
        self.projector.d_image = self.model.d_model;
        self.projector.d_teacher = self.data.generator.teacher.dim();
        let g = &mut self.data.generator;
        g.latent_size = k;
        g.position = self.position;
        g.image_side = self.model.image_side;
        g.teacher.patch_size = self.model.patch_size;
        self.sft.seed = derive_seed(self.seed, SALT_SFT);
        self.rl.seed = derive_seed(self.seed, SALT_RL);
        self.eval.seed = derive_seed(self.seed, SALT_EVAL);
        self.model.validate()?;
        self.projector.validate()?;
        self.rl.validate()?;
        self.eval.sampling.validate()?;
        if k == 0 {
            return Err(Error::Config("latent_size must be positive".into()));
        }
        if !matches!(self.export.split.as_str(), "train" | "test") {
            return Err(Error::Config(format!("export.split must be train or test, got {:?}", self.export.split)));
        }
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolve()
    }

    /// Generator config of a split.
    pub fn dataset(&self, split: Split) -> DatasetConfig {
        let mut d = self.data.generator.clone();
        let (salt, count) = match split {
            Split::Train => (SALT_TRAIN, self.data.train_count),
            Split::Test => (SALT_TEST, self.data.test_count),
        };
        d.seed = derive_seed(self.seed, salt);
        d.count = count;
        d
    }

    pub fn grammar(&self) -> FormatGrammar {
        FormatGrammar {
            latent_size: self.latent_size,
            position: self.position,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the architecture only; checkpoints are compatible across
    /// stages when this matches.
    pub fn model_hash(&self) -> String {
        config_hash(&(&self.model.without_seed(), &self.projector))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// Writes the effective config next to an output.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        let text = format!("# config hash {}\n{}", self.hash(), self.to_toml());
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value and taken as a
/// bare string when that fails.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} passes through a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
