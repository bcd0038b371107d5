//! Run configuration: one TOML file covering model, training, constraints,
//! data and evaluation, with dotted-key overrides and a run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::{ConstraintSet, SceneConfig};
use crate::data::{DatasetSpec, GlyphSource};
use crate::error::{AsrError, Result};
use crate::generative::{ModelConfig, PriorMode};
use crate::metrics::EvalConfig;
use crate::training::TrainConfig;

/// Environment variable that replaces the configured training seed.
pub const SEED_ENV: &str = "ASR_SEED";

/// Continuation probability of the fixed prior when the config names none.
pub const FIXED_PRIOR_CONTINUE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Fixed independent prior, no constraints.
    #[serde(rename = "air")]
    Air,
    /// Learned recurrent prior, no constraints.
    #[serde(rename = "air-pprior")]
    AirPprior,
    /// Learned recurrent prior with the configured constraints.
    #[default]
    #[serde(rename = "air-asr")]
    AirAsr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Air => "air",
            Variant::AirPprior => "air-pprior",
            Variant::AirAsr => "air-asr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEntry {
    pub id: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSpec,
    pub test: DatasetSpec,
    /// Read the training set from this archive instead of synthesizing it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_archive: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_archive: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = |counts: Vec<(usize, usize)>, seed| DatasetSpec {
            source: GlyphSource::ProceduralSprites,
            counts,
            canvas_size: 50,
            glyph_size: 20,
            non_overlap: false,
            seed,
            max_attempts: 100_000,
            composite: Default::default(),
        };
        DataConfig {
            train: spec(vec![(1, 2500), (3, 2500)], 1),
            test: spec(vec![(1, 250), (3, 250)], 2),
            train_archive: None,
            test_archive: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub constraints: Vec<ConstraintEntry>,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// The 1-or-3 counting setup with count penalties `λ₁ = 10`, `λ₂ = 100`.
    fn default() -> Self {
        let entry = |id: &str, weight| ConstraintEntry { id: id.into(), weight };
        RunConfig {
            variant: Variant::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            constraints: vec![entry("count_match", 10.0), entry("count_marginal", 100.0)],
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides, then check consistency.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| AsrError::Config(format!("config: {e}")))?;
        // layer the file over the defaults so partial tables keep the
        // remaining default fields
        let mut value: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        merge(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| AsrError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AsrError::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// Replace the training seed from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.train.seed = s.trim().parse().map_err(|_| AsrError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.train.validate()?;
        self.data.test.validate()?;
        let s = self.model.canvas_size;
        for (name, spec) in [("train", &self.data.train), ("test", &self.data.test)] {
            if spec.canvas_size != s {
                return Err(AsrError::Config(format!("data.{name}.canvas_size {} differs from model.canvas_size {s}", spec.canvas_size)));
            }
            if let Some(&(c, _)) = spec.counts.iter().find(|(c, _)| *c > self.model.max_steps) {
                return Err(AsrError::Config(format!("data.{name} has scenes with {c} objects but max_steps is {}", self.model.max_steps)));
            }
        }
        if self.eval.elbo_samples == 0 || self.eval.batch_size == 0 {
            return Err(AsrError::Config("eval.elbo_samples and eval.batch_size must be >= 1".into()));
        }
        if self.variant == Variant::AirAsr {
            if self.scene.max_steps != self.model.max_steps {
                return Err(AsrError::Config(format!(
                    "scene.max_steps {} differs from model.max_steps {}",
                    self.scene.max_steps, self.model.max_steps
                )));
            }
            if self.scene.canvas_size != s as f64 {
                return Err(AsrError::Config(format!("scene.canvas_size {} differs from model.canvas_size {s}", self.scene.canvas_size)));
            }
        }
        self.constraint_set()?;
        Ok(())
    }

    /// Model settings with the variant's prior applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.prior = match (self.variant, m.prior) {
            (Variant::Air, PriorMode::Fixed { continue_prob }) => PriorMode::Fixed { continue_prob },
            (Variant::Air, PriorMode::Learned) => PriorMode::Fixed { continue_prob: FIXED_PRIOR_CONTINUE },
            _ => PriorMode::Learned,
        };
        m
    }

    /// Constraint terms the variant trains with; ids are checked for every
    /// variant so a typo never goes unnoticed.
    pub fn constraint_set(&self) -> Result<ConstraintSet> {
        let pairs: Vec<(String, f64)> = self.constraints.iter().map(|c| (c.id.clone(), c.weight)).collect();
        let set = ConstraintSet::from_weights(&pairs, self.scene.clone())?;
        Ok(match self.variant {
            Variant::AirAsr => set,
            _ => ConstraintSet::default(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursively overwrite `base` with `top`; tables merge, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set a dotted key such as `train.epochs=5`. The value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| AsrError::Config(format!("override `{assignment}` is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AsrError::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| AsrError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub code_version: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.train.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Write `manifest.toml` and the effective `config.toml` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
        let m = dir.join("manifest.toml");
        std::fs::write(&m, toml::to_string(self).expect("manifest serializes")).map_err(|e| AsrError::io(&m, e))?;
        let c = dir.join("config.toml");
        std::fs::write(&c, cfg.to_toml()).map_err(|e| AsrError::io(&c, e))
    }
}
