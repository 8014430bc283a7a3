//! Run configuration: file schema, defaults, and override resolution.
//!
//! Precedence, lowest to highest: built-in defaults, config file,
//! `FAVOR_*` environment variables, command-line flags. The schema is
//! strict — unknown keys are rejected rather than silently ignored, so a
//! typo cannot revert a hyperparameter to its default.
//!
//! Every run writes its fully resolved configuration to
//! `effective_config.toml` in the output directory; loading that file
//! reproduces the run exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::{generate_synthetic_task, load_manifest, TaskDefinition};
use crate::grpo::{AdamConfig, FreezeMask, GrpoConfig};
use crate::policy::PolicyShape;
use crate::train::PolicyInit;
use crate::vocab::Vocabulary;

/// What a run does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Grpo,
    Sft,
    Eval,
    Sweep,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(RunMode::Grpo),
            "sft" => Ok(RunMode::Sft),
            "eval" => Ok(RunMode::Eval),
            "sweep" => Ok(RunMode::Sweep),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected grpo, sft, eval, or sweep)"
            ))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunMode::Grpo => "grpo",
            RunMode::Sft => "sft",
            RunMode::Eval => "eval",
            RunMode::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

/// Parameter initialization scheme named in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Primed,
    Random,
    Zero,
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primed" => Ok(InitKind::Primed),
            "random" => Ok(InitKind::Random),
            "zero" => Ok(InitKind::Zero),
            other => Err(Error::Config(format!(
                "unknown init '{other}' (expected primed, random, or zero)"
            ))),
        }
    }
}

/// Synthetic-task generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 20,
            feature_dim: 8,
            noise_scale: 0.1,
            seed: 4,
        }
    }
}

/// Fully resolved run configuration. Serializing this struct yields the
/// effective config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,

    /// Shots per class for the train/test split.
    pub k: usize,
    /// Seed of the few-shot split.
    pub data_seed: u64,

    pub learning_rate: f64,
    pub temperature: f64,
    pub group_size: usize,
    pub kl_coefficient: f64,
    pub training_steps: usize,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub max_response_length: usize,
    pub std_guard: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_ratio: Option<f64>,

    pub hidden_dim: usize,
    pub filler_count: usize,
    pub init: InitKind,
    pub init_scale: f64,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    /// Parameter blocks excluded from updates.
    pub freeze: Vec<String>,

    /// Exactly one data source must be set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Grpo,
            seed: 0,
            out_dir: None,
            k: 1,
            data_seed: 4,
            learning_rate: 5e-5,
            temperature: 1.0,
            group_size: 16,
            kl_coefficient: 0.04,
            training_steps: 20,
            batch_size: 8,
            gradient_accumulation_steps: 2,
            max_response_length: 24,
            std_guard: 1e-8,
            clip_ratio: None,
            hidden_dim: 16,
            filler_count: 8,
            init: InitKind::Primed,
            init_scale: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            freeze: Vec::new(),
            manifest: None,
            synthetic: None,
        }
    }
}

/// File schema: every key optional, unknown keys rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    mode: Option<RunMode>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    k: Option<usize>,
    data_seed: Option<u64>,
    learning_rate: Option<f64>,
    temperature: Option<f64>,
    group_size: Option<usize>,
    kl_coefficient: Option<f64>,
    training_steps: Option<usize>,
    batch_size: Option<usize>,
    gradient_accumulation_steps: Option<usize>,
    max_response_length: Option<usize>,
    std_guard: Option<f64>,
    clip_ratio: Option<f64>,
    hidden_dim: Option<usize>,
    filler_count: Option<usize>,
    init: Option<InitKind>,
    init_scale: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    adam_epsilon: Option<f64>,
    freeze: Option<Vec<String>>,
    manifest: Option<PathBuf>,
    synthetic: Option<SyntheticSpec>,
}

macro_rules! merge {
    ($cfg:ident, $file:ident, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $file.$field { $cfg.$field = v; })+
    };
}

impl RunConfig {
    fn apply_file(&mut self, file: ConfigFile) {
        merge!(
            self, file, mode, seed, k, data_seed, learning_rate, temperature, group_size,
            kl_coefficient, training_steps, batch_size, gradient_accumulation_steps,
            max_response_length, std_guard, hidden_dim, filler_count, init, init_scale,
            adam_beta1, adam_beta2, adam_epsilon, freeze
        );
        if file.out_dir.is_some() {
            self.out_dir = file.out_dir;
        }
        if file.clip_ratio.is_some() {
            self.clip_ratio = file.clip_ratio;
        }
        if file.manifest.is_some() {
            self.manifest = file.manifest;
        }
        if file.synthetic.is_some() {
            self.synthetic = file.synthetic;
        }
    }

    /// Applies `FAVOR_*` environment overrides from the given map.
    fn apply_env(&mut self, env: &BTreeMap<String, String>) -> Result<()> {
        fn parsed<T: std::str::FromStr>(var: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value.parse().map_err(|e| {
                Error::Config(format!("environment variable {var}={value}: {e}"))
            })
        }

        for (var, value) in env {
            match var.as_str() {
                "FAVOR_MODE" => self.mode = value.parse()?,
                "FAVOR_SEED" => self.seed = parsed(var, value)?,
                "FAVOR_OUT_DIR" => self.out_dir = Some(PathBuf::from(value)),
                "FAVOR_K" => self.k = parsed(var, value)?,
                "FAVOR_DATA_SEED" => self.data_seed = parsed(var, value)?,
                "FAVOR_LEARNING_RATE" => self.learning_rate = parsed(var, value)?,
                "FAVOR_TEMPERATURE" => self.temperature = parsed(var, value)?,
                "FAVOR_GROUP_SIZE" => self.group_size = parsed(var, value)?,
                "FAVOR_KL_COEFFICIENT" => self.kl_coefficient = parsed(var, value)?,
                "FAVOR_TRAINING_STEPS" => self.training_steps = parsed(var, value)?,
                "FAVOR_BATCH_SIZE" => self.batch_size = parsed(var, value)?,
                "FAVOR_GRADIENT_ACCUMULATION_STEPS" => {
                    self.gradient_accumulation_steps = parsed(var, value)?
                }
                "FAVOR_MAX_RESPONSE_LENGTH" => self.max_response_length = parsed(var, value)?,
                "FAVOR_STD_GUARD" => self.std_guard = parsed(var, value)?,
                "FAVOR_CLIP_RATIO" => self.clip_ratio = Some(parsed(var, value)?),
                "FAVOR_HIDDEN_DIM" => self.hidden_dim = parsed(var, value)?,
                "FAVOR_FILLER_COUNT" => self.filler_count = parsed(var, value)?,
                "FAVOR_INIT" => self.init = value.parse()?,
                "FAVOR_INIT_SCALE" => self.init_scale = parsed(var, value)?,
                "FAVOR_FREEZE" => {
                    self.freeze = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "FAVOR_MANIFEST" => self.manifest = Some(PathBuf::from(value)),
                other if other.starts_with("FAVOR_") => {
                    return Err(Error::Config(format!(
                        "unknown environment variable {other}"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.manifest, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "exactly one data source: both manifest and synthetic are set".to_string(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "exactly one data source: set manifest or synthetic".to_string(),
                ))
            }
            _ => {}
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a positive real, got {}",
                self.learning_rate
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".to_string()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".to_string()));
        }
        FreezeMask::from_names(&self.freeze).map_err(|e| Error::Config(e.to_string()))?;
        self.grpo_config().validate()
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            kl_coefficient: self.kl_coefficient,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            gradient_accumulation_steps: self.gradient_accumulation_steps,
            training_steps: self.training_steps,
            temperature: self.temperature,
            max_response_length: self.max_response_length,
            std_guard: self.std_guard,
            clip_ratio: self.clip_ratio,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
        }
    }

    pub fn policy_init(&self) -> PolicyInit {
        match self.init {
            InitKind::Primed => PolicyInit::Primed,
            InitKind::Random => PolicyInit::Random {
                scale: self.init_scale,
            },
            InitKind::Zero => PolicyInit::Zero,
        }
    }

    pub fn freeze_mask(&self) -> Result<FreezeMask> {
        FreezeMask::from_names(&self.freeze)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.filler_count)
    }

    /// Loads or generates the task named by the data source.
    pub fn build_task(&self) -> Result<TaskDefinition> {
        match (&self.manifest, &self.synthetic) {
            (Some(path), None) => load_manifest(path),
            (None, Some(spec)) => generate_synthetic_task(
                spec.classes,
                spec.per_class,
                spec.feature_dim,
                spec.noise_scale,
                spec.seed,
            ),
            _ => Err(Error::Config(
                "exactly one data source must be set".to_string(),
            )),
        }
    }

    pub fn policy_shape(&self, task: &TaskDefinition) -> Result<PolicyShape> {
        let vocab = self.vocabulary()?;
        PolicyShape::new(vocab.size(), task.feature_dim(), self.hidden_dim)
    }

    /// Serializes the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing effective config: {e}")))
    }

    /// Writes `effective_config.toml` into `dir`.
    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("effective_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a config file and applies environment overrides from `env`.
/// A missing or empty file yields pure defaults.
pub fn load_config_with(
    path: Option<&Path>,
    env: &BTreeMap<String, String>,
) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ConfigFile = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.apply_file(file);
    }
    config.apply_env(env)?;
    Ok(config)
}

/// Loads a config file and applies `FAVOR_*` overrides from the process
/// environment.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let env: BTreeMap<String, String> = std::env::vars()
        .filter(|(k, _)| k.starts_with("FAVOR_"))
        .collect();
    load_config_with(path, &env)
}
