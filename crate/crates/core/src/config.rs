//! Run configuration as flat dotted `key = value` text.
//!
//! Files and command-line overrides use the same keys; unknown keys are
//! rejected. [`Config::to_text`] lists every key in a fixed order, so the
//! echo stored in a checkpoint parses back to an equal configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::composition::{Activation, Method};
use crate::energy::{EnergyKind, DEFAULT_EPSILON};
use crate::matcher::MatchOptions;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which representations the composition consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tap {
    InputEmbeddings,
    /// Output of encoder layer `k` (1-based).
    Layer(usize),
    #[default]
    FinalLayer,
}

impl Tap {
    /// Index into the encoder's hidden-state list (0 = embeddings).
    pub fn level(self, layers: usize) -> Result<usize, ConfigError> {
        match self {
            Tap::InputEmbeddings => Ok(0),
            Tap::FinalLayer => Ok(layers),
            Tap::Layer(k) if (1..=layers).contains(&k) => Ok(k),
            Tap::Layer(k) => Err(ConfigError::Invalid(format!(
                "tap layer:{k} outside 1..={layers}"
            ))),
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::InputEmbeddings => f.write_str("input_embeddings"),
            Tap::Layer(k) => write!(f, "layer:{k}"),
            Tap::FinalLayer => f.write_str("final_layer"),
        }
    }
}

impl FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input_embeddings" => Ok(Tap::InputEmbeddings),
            "final_layer" => Ok(Tap::FinalLayer),
            _ => s
                .strip_prefix("layer:")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Tap::Layer)
                .ok_or_else(|| "expected input_embeddings, final_layer or layer:K".to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSettings {
    pub method: Method,
    /// Composed vector size; `None` uses the tap's width.
    pub dim: Option<usize>,
    pub g: Activation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergySettings {
    pub kind: EnergyKind,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub lambda: f64,
    pub seed: u64,
    pub mask_fraction: f64,
    pub tap: Tap,
    /// When false the entity branch is compiled out of the step entirely.
    pub oscar: bool,
    pub weight_decay: f64,
    /// Adds a wall-time field to each logged step.
    pub log_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataSettings {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Embedding text file or compiled lexicon cache.
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub configs: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub steps: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub lowercase: bool,
    pub composition: CompositionSettings,
    pub energy: EnergySettings,
    pub matching: MatchOptions,
    pub encoder: EncoderSettings,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub gradcheck: GradcheckSettings,
    pub bench: BenchSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            lowercase: true,
            composition: CompositionSettings {
                method: Method::Ran,
                dim: None,
                g: Activation::Tanh,
                seed: 0,
            },
            energy: EnergySettings {
                kind: EnergyKind::Euclidean,
                epsilon: DEFAULT_EPSILON,
            },
            matching: MatchOptions::default(),
            encoder: EncoderSettings {
                layers: 4,
                hidden: 64,
                heads: 2,
                ff: 256,
                max_seq_len: 384,
            },
            train: TrainSettings {
                batch_size: 8,
                lr: 2e-5,
                warmup_steps: 320,
                steps: 1000,
                lambda: 1.0,
                seed: 0,
                mask_fraction: 0.15,
                tap: Tap::FinalLayer,
                oscar: true,
                weight_decay: 0.01,
                log_timing: false,
            },
            data: DataSettings::default(),
            gradcheck: GradcheckSettings {
                configs: 27,
                seed: 0,
                step: 1e-5,
                tolerance: 1e-4,
            },
            bench: BenchSettings {
                steps: 100,
                hidden: 256,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl Config {
    /// Every key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "tokenizer.lowercase",
        "composition.method",
        "composition.dim",
        "composition.g",
        "composition.seed",
        "energy.kind",
        "energy.epsilon",
        "match.include_subsumed",
        "match.include_masked",
        "encoder.layers",
        "encoder.hidden",
        "encoder.heads",
        "encoder.ff",
        "encoder.max_seq_len",
        "train.batch_size",
        "train.lr",
        "train.warmup_steps",
        "train.steps",
        "train.lambda",
        "train.seed",
        "train.mask_fraction",
        "train.tap",
        "train.oscar",
        "train.weight_decay",
        "train.log_timing",
        "data.corpus",
        "data.vocab",
        "data.lexicon",
        "gradcheck.configs",
        "gradcheck.seed",
        "gradcheck.step",
        "gradcheck.tolerance",
        "bench.steps",
        "bench.hidden",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "tokenizer.lowercase" => self.lowercase = parse(key, value)?,
            "composition.method" => self.composition.method = parse(key, value)?,
            "composition.dim" => {
                self.composition.dim = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "composition.g" => self.composition.g = parse(key, value)?,
            "composition.seed" => self.composition.seed = parse(key, value)?,
            "energy.kind" => self.energy.kind = parse(key, value)?,
            "energy.epsilon" => self.energy.epsilon = parse(key, value)?,
            "match.include_subsumed" => self.matching.include_subsumed = parse(key, value)?,
            "match.include_masked" => self.matching.include_masked = parse(key, value)?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, value)?,
            "encoder.heads" => self.encoder.heads = parse(key, value)?,
            "encoder.ff" => self.encoder.ff = parse(key, value)?,
            "encoder.max_seq_len" => self.encoder.max_seq_len = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.lambda" => self.train.lambda = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.mask_fraction" => self.train.mask_fraction = parse(key, value)?,
            "train.tap" => self.train.tap = parse(key, value)?,
            "train.oscar" => self.train.oscar = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.log_timing" => self.train.log_timing = parse(key, value)?,
            "data.corpus" => self.data.corpus = path(value),
            "data.vocab" => self.data.vocab = path(value),
            "data.lexicon" => self.data.lexicon = path(value),
            "gradcheck.configs" => self.gradcheck.configs = parse(key, value)?,
            "gradcheck.seed" => self.gradcheck.seed = parse(key, value)?,
            "gradcheck.step" => self.gradcheck.step = parse(key, value)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, value)?,
            "bench.steps" => self.bench.steps = parse(key, value)?,
            "bench.hidden" => self.bench.hidden = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "tokenizer.lowercase" => self.lowercase.to_string(),
            "composition.method" => self.composition.method.to_string(),
            "composition.dim" => self
                .composition
                .dim
                .map_or_else(|| "auto".to_string(), |d| d.to_string()),
            "composition.g" => self.composition.g.as_str().to_string(),
            "composition.seed" => self.composition.seed.to_string(),
            "energy.kind" => self.energy.kind.to_string(),
            "energy.epsilon" => self.energy.epsilon.to_string(),
            "match.include_subsumed" => self.matching.include_subsumed.to_string(),
            "match.include_masked" => self.matching.include_masked.to_string(),
            "encoder.layers" => self.encoder.layers.to_string(),
            "encoder.hidden" => self.encoder.hidden.to_string(),
            "encoder.heads" => self.encoder.heads.to_string(),
            "encoder.ff" => self.encoder.ff.to_string(),
            "encoder.max_seq_len" => self.encoder.max_seq_len.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.warmup_steps" => self.train.warmup_steps.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.lambda" => self.train.lambda.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.mask_fraction" => self.train.mask_fraction.to_string(),
            "train.tap" => self.train.tap.to_string(),
            "train.oscar" => self.train.oscar.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.log_timing" => self.train.log_timing.to_string(),
            "data.corpus" => show_path(&self.data.corpus),
            "data.vocab" => show_path(&self.data.vocab),
            "data.lexicon" => show_path(&self.data.lexicon),
            "gradcheck.configs" => self.gradcheck.configs.to_string(),
            "gradcheck.seed" => self.gradcheck.seed.to_string(),
            "gradcheck.step" => self.gradcheck.step.to_string(),
            "gradcheck.tolerance" => self.gradcheck.tolerance.to_string(),
            "bench.steps" => self.bench.steps.to_string(),
            "bench.hidden" => self.bench.hidden.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over the current values. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.train;
        if !(t.mask_fraction > 0.0 && t.mask_fraction < 1.0) {
            return bad(format!("train.mask_fraction {} must lie in (0, 1)", t.mask_fraction));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return bad(format!("train.lambda {} must be finite and non-negative", t.lambda));
        }
        if t.warmup_steps > t.steps {
            return bad(format!(
                "train.warmup_steps {} exceeds train.steps {}",
                t.warmup_steps, t.steps
            ));
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr {} must be positive", t.lr));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay {} must be non-negative", t.weight_decay));
        }
        if !(self.energy.epsilon > 0.0 && self.energy.epsilon < 1.0) {
            return bad(format!("energy.epsilon {} must lie in (0, 1)", self.energy.epsilon));
        }
        let e = &self.encoder;
        if e.hidden == 0 || e.heads == 0 || e.hidden % e.heads != 0 {
            return bad(format!(
                "encoder.hidden {} must be a positive multiple of encoder.heads {}",
                e.hidden, e.heads
            ));
        }
        if e.max_seq_len < 2 {
            return bad("encoder.max_seq_len must be at least 2".into());
        }
        self.train.tap.level(e.layers)?;
        if self.composition.dim == Some(0) {
            return bad("composition.dim must be positive".into());
        }
        Ok(())
    }
}
