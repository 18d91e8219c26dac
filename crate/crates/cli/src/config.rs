//! Layered run configuration: flag > config file > `MQSEQ_*` environment > default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use mqseq_core::{TrainConfig, TsneConfig, REFERENCE_DIM};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "MQSEQ_";
pub const CONFIG_ENV: &str = "MQSEQ_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Value,
    Switch,
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub flag: &'static str,
    pub kind: KeyKind,
    pub help: &'static str,
}

const fn key(name: &'static str, flag: &'static str, help: &'static str) -> Key {
    Key {
        name,
        flag,
        kind: KeyKind::Value,
        help,
    }
}

pub const KEYS: &[Key] = &[
    key(
        "data_dir",
        "data-dir",
        "directory holding train/dev/test question files",
    ),
    key(
        "cache_dir",
        "cache-dir",
        "record store and embedding caches [default: .mqseq-cache]",
    ),
    key("out_dir", "out-dir", "output directory [default: mqseq-out]"),
    key("seed", "seed", "seed for every random choice [default: 42]"),
    key(
        "backend",
        "backend",
        "encoder backend: reference | loaded [default: reference]",
    ),
    key("model_path", "model-path", "directory of the loaded encoder artifact"),
    key(
        "dim",
        "dim",
        "embedding width (reference backend) / expected head width",
    ),
    key("max_len", "max-len", "maximum tokens per question [default: 512]"),
    key(
        "embed_batch",
        "embed-batch",
        "questions per encoder call [default: 500]",
    ),
    Key {
        name: "cop_one_based",
        flag: "cop-one-based",
        kind: KeyKind::Switch,
        help: "read the correct-option field as 1..4",
    },
    key(
        "strategy",
        "strategy",
        "training rows: train_only | train_plus_dev [default: train_only]",
    ),
    key("lr", "lr", "AdamW learning rate [default: 1e-5]"),
    key("adam_eps", "adam-eps", "AdamW epsilon [default: 1e-8]"),
    key(
        "weight_decay",
        "weight-decay",
        "AdamW decoupled weight decay [default: 0]",
    ),
    key("beta1", "beta1", "AdamW beta1 [default: 0.9]"),
    key("beta2", "beta2", "AdamW beta2 [default: 0.999]"),
    key("epochs", "epochs", "training epochs [default: 10]"),
    key(
        "steps_per_epoch",
        "steps-per-epoch",
        "optimizer steps per epoch [default: 100]",
    ),
    key("batch_size", "batch-size", "examples per optimizer step [default: 8]"),
    key("perplexity", "perplexity", "t-SNE perplexity [default: 30]"),
    key("tsne_iterations", "tsne-iterations", "t-SNE iterations [default: 1000]"),
    key("tsne_lr", "tsne-lr", "t-SNE learning rate [default: 200]"),
    key(
        "early_exaggeration",
        "early-exaggeration",
        "t-SNE early exaggeration [default: 12]",
    ),
    key("max_points", "max-points", "stratified subsample cap for t-SNE"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    File,
    Env,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::File => "file",
            Source::Env => "env",
            Source::Default => "default",
        })
    }
}

/// Raw string values per layer.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub flags: BTreeMap<String, String>,
    pub file: BTreeMap<String, String>,
    pub env: BTreeMap<String, String>,
}

impl Layers {
    /// Picks up `MQSEQ_<KEY>` variables for every known key.
    pub fn with_env(mut self, env: &BTreeMap<String, String>) -> Self {
        for k in KEYS {
            if let Some(v) = env.get(&format!("{ENV_PREFIX}{}", k.name.to_uppercase())) {
                self.env.insert(k.name.to_string(), v.clone());
            }
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<(&str, Source)> {
        self.flags
            .get(name)
            .map(|v| (v.as_str(), Source::Flag))
            .or_else(|| self.file.get(name).map(|v| (v.as_str(), Source::File)))
            .or_else(|| self.env.get(name).map(|v| (v.as_str(), Source::Env)))
    }
}

/// Flat `key=value` lines; `#` starts a comment line. Unknown keys are errors.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if find_key(k).is_none() {
            return Err(CliError::Config(format!("config line {}: unknown key {k:?}", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Reference,
    Loaded,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reference" => Ok(Self::Reference),
            "loaded" => Ok(Self::Loaded),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Loaded => "loaded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    TrainOnly,
    TrainPlusDev,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::TrainOnly, Strategy::TrainPlusDev];
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train_only" => Ok(Self::TrainOnly),
            "train_plus_dev" => Ok(Self::TrainPlusDev),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TrainOnly => "train_only",
            Self::TrainPlusDev => "train_plus_dev",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub backend: BackendKind,
    pub model_path: Option<PathBuf>,
    /// Explicitly requested width; `None` means "whatever the cache holds".
    pub dim: Option<usize>,
    pub max_len: Option<usize>,
    pub embed_batch: usize,
    pub cop_one_based: bool,
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub tsne: TsneConfig,
    pub sources: BTreeMap<&'static str, (String, Source)>,
}

struct Resolver<'a> {
    layers: &'a Layers,
    sources: BTreeMap<&'static str, (String, Source)>,
}

impl Resolver<'_> {
    fn opt<T: FromStr>(&mut self, name: &'static str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.layers.get(name) {
            Some((raw, source)) => {
                let v = raw
                    .parse()
                    .map_err(|e| CliError::Config(format!("{name} ({source}): {raw:?}: {e}")))?;
                self.sources.insert(name, (raw.to_string(), source));
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    fn or<T: FromStr + fmt::Display>(&mut self, name: &'static str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.opt(name)? {
            Some(v) => Ok(v),
            None => {
                self.sources.insert(name, (default.to_string(), Source::Default));
                Ok(default)
            }
        }
    }
}

impl RunConfig {
    pub fn resolve(layers: &Layers) -> Result<Self, CliError> {
        let mut r = Resolver {
            layers,
            sources: BTreeMap::new(),
        };
        let seed = r.or("seed", 42u64)?;
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: r.or("lr", defaults.learning_rate)?,
            epsilon: r.or("adam_eps", defaults.epsilon)?,
            weight_decay: r.or("weight_decay", defaults.weight_decay)?,
            beta1: r.or("beta1", defaults.beta1)?,
            beta2: r.or("beta2", defaults.beta2)?,
            epochs: r.or("epochs", defaults.epochs)?,
            steps_per_epoch: r.or("steps_per_epoch", defaults.steps_per_epoch)?,
            batch_size: r.or("batch_size", defaults.batch_size)?,
            seed,
        };
        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let tdefaults = TsneConfig::default();
        let tsne = TsneConfig {
            perplexity: r.or("perplexity", tdefaults.perplexity)?,
            iterations: r.or("tsne_iterations", tdefaults.iterations)?,
            learning_rate: r.or("tsne_lr", tdefaults.learning_rate)?,
            early_exaggeration: r.or("early_exaggeration", tdefaults.early_exaggeration)?,
            max_points: r.opt("max_points")?,
            seed,
            ..tdefaults
        };
        tsne.validate(None).map_err(|e| CliError::Config(e.to_string()))?;
        let config = RunConfig {
            data_dir: r.opt::<String>("data_dir")?.map(PathBuf::from),
            cache_dir: PathBuf::from(r.or("cache_dir", ".mqseq-cache".to_string())?),
            out_dir: PathBuf::from(r.or("out_dir", "mqseq-out".to_string())?),
            seed,
            backend: r.or("backend", BackendKind::Reference)?,
            model_path: r.opt::<String>("model_path")?.map(PathBuf::from),
            dim: r.opt("dim")?,
            max_len: r.opt("max_len")?,
            embed_batch: r.or("embed_batch", mqseq_core::embedding::DEFAULT_EMBED_BATCH)?,
            cop_one_based: r.or("cop_one_based", false)?,
            strategy: r.or("strategy", Strategy::TrainOnly)?,
            train,
            tsne,
            sources: BTreeMap::new(),
        };
        if config.embed_batch == 0 {
            return Err(CliError::Config("embed_batch must be >= 1".into()));
        }
        if config.dim == Some(0) || config.max_len == Some(0) {
            return Err(CliError::Config("dim and max_len must be >= 1".into()));
        }
        Ok(RunConfig {
            sources: r.sources,
            ..config
        })
    }

    /// Width used by the reference backend.
    pub fn reference_dim(&self) -> usize {
        self.dim.unwrap_or(REFERENCE_DIM)
    }

    /// `key=value  # source` for every resolved key, in key order.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (k, (v, source)) in &self.sources {
            out.push_str(&format!("{k}={v}  # {source}\n"));
        }
        out
    }
}
