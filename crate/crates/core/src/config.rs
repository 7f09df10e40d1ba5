//! Pipeline configuration: defaults, a flat `key = value` file, and
//! `C3SQL_*` environment overrides. Command-line flags are applied on top by
//! the caller.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::gateway::{RetryPolicy, DEFAULT_BASE_URL};
use crate::linking::LinkingConfig;
use crate::metrics::AucPooling;
use crate::prompt::{GenerationSampling, Layout, PromptConfig};

pub const ENV_PREFIX: &str = "C3SQL_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    Live,
    Record,
    #[default]
    Replay,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown backend `{other}` (expected live, record or replay)")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model_name: String,
    pub temperature: f64,
    pub n_samples: u32,
    pub recall_samples: u32,
    pub k_tables: usize,
    pub k_columns: usize,
    pub exec_timeout: Duration,
    pub max_inflight_requests: usize,
    pub backend: BackendKind,
    pub cache_dir: PathBuf,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub request_timeout: Duration,
    pub max_attempts: u32,
    pub generation_max_tokens: u32,
    pub recall_max_tokens: u32,
    pub token_budget: usize,
    pub use_calibration: bool,
    pub use_linking: bool,
    pub use_self_consistency: bool,
    pub use_foreign_keys: bool,
    pub layout: Layout,
    pub auc_pooling: AucPooling,
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo-0301".into(),
            temperature: 1.0,
            n_samples: 20,
            recall_samples: 10,
            k_tables: 4,
            k_columns: 5,
            exec_timeout: Duration::from_secs(5),
            max_inflight_requests: 4,
            backend: BackendKind::default(),
            cache_dir: PathBuf::from("cache"),
            base_url: DEFAULT_BASE_URL.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            request_timeout: Duration::from_secs(120),
            max_attempts: 5,
            generation_max_tokens: 512,
            recall_max_tokens: 1024,
            token_budget: 1800,
            use_calibration: true,
            use_linking: true,
            use_self_consistency: true,
            use_foreign_keys: true,
            layout: Layout::Clear,
            auc_pooling: AucPooling::Pooled,
            force: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigError(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_secs(key: &str, value: &str) -> Result<Duration, ConfigError> {
    let secs: f64 = parse(key, value)?;
    Duration::try_from_secs_f64(secs).map_err(|_| ConfigError(format!("invalid duration `{value}` for `{key}`")))
}

impl PipelineConfig {
    /// Sets one field from its textual form. Keys are snake_case field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().to_ascii_lowercase();
        let k = key.as_str();
        match k {
            "model_name" => self.model_name = value.trim().to_string(),
            "temperature" => self.temperature = parse(k, value)?,
            "n_samples" => self.n_samples = parse(k, value)?,
            "recall_samples" => self.recall_samples = parse(k, value)?,
            "k_tables" => self.k_tables = parse(k, value)?,
            "k_columns" => self.k_columns = parse(k, value)?,
            "exec_timeout" => self.exec_timeout = parse_secs(k, value)?,
            "max_inflight_requests" => self.max_inflight_requests = parse(k, value)?,
            "backend" => self.backend = value.parse().map_err(ConfigError)?,
            "cache_dir" => self.cache_dir = PathBuf::from(value.trim()),
            "base_url" => self.base_url = value.trim().to_string(),
            "api_key_env" => self.api_key_env = value.trim().to_string(),
            "request_timeout" => self.request_timeout = parse_secs(k, value)?,
            "max_attempts" => self.max_attempts = parse(k, value)?,
            "generation_max_tokens" => self.generation_max_tokens = parse(k, value)?,
            "recall_max_tokens" => self.recall_max_tokens = parse(k, value)?,
            "token_budget" => self.token_budget = parse(k, value)?,
            "use_calibration" => self.use_calibration = parse_bool(k, value)?,
            "use_linking" => self.use_linking = parse_bool(k, value)?,
            "use_self_consistency" => self.use_self_consistency = parse_bool(k, value)?,
            "use_foreign_keys" => self.use_foreign_keys = parse_bool(k, value)?,
            "layout" => self.layout = value.parse().map_err(ConfigError)?,
            "auc_pooling" => {
                self.auc_pooling = match value.trim().to_ascii_lowercase().as_str() {
                    "pooled" => AucPooling::Pooled,
                    "macro" => AucPooling::Macro,
                    _ => return Err(ConfigError(format!("invalid value `{value}` for `auc_pooling`"))),
                }
            }
            "force" => self.force = parse_bool(k, value)?,
            _ => return Err(ConfigError(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key, value)
                .map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies `C3SQL_<KEY>` variables from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            if let Some(key) = name.as_ref().strip_prefix(ENV_PREFIX) {
                self.set(key, value.as_ref())
                    .map_err(|e| ConfigError(format!("{}: {e}", name.as_ref())))?;
            }
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the environment.
    pub fn layered(file: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            config.apply_file_text(&text)?;
        }
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("n_samples", self.n_samples as usize),
            ("recall_samples", self.recall_samples as usize),
            ("k_tables", self.k_tables),
            ("k_columns", self.k_columns),
            ("max_inflight_requests", self.max_inflight_requests),
            ("max_attempts", self.max_attempts as usize),
            ("generation_max_tokens", self.generation_max_tokens as usize),
            ("recall_max_tokens", self.recall_max_tokens as usize),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError(format!("`{name}` must be at least 1")));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError("`temperature` must be non-negative".into()));
        }
        if self.exec_timeout.is_zero() {
            return Err(ConfigError("`exec_timeout` must be positive".into()));
        }
        self.prompt_config().validate().map_err(ConfigError)
    }

    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            use_calibration: self.use_calibration,
            use_linking: self.use_linking,
            use_foreign_keys: self.use_foreign_keys,
            layout: self.layout,
        }
    }

    /// Samples per generation call: 1 when self-consistency is off.
    pub fn effective_n_samples(&self) -> u32 {
        if self.use_self_consistency {
            self.n_samples
        } else {
            1
        }
    }

    pub fn generation_sampling(&self) -> GenerationSampling {
        GenerationSampling {
            n: self.effective_n_samples(),
            temperature: self.temperature,
            model_name: self.model_name.clone(),
            max_output_tokens: self.generation_max_tokens,
            token_budget: self.token_budget,
        }
    }

    pub fn linking_config(&self) -> LinkingConfig {
        LinkingConfig {
            k_tables: self.k_tables,
            k_columns: self.k_columns,
            recall_samples: self.recall_samples,
            temperature: self.temperature,
            model_name: self.model_name.clone(),
            max_output_tokens: self.recall_max_tokens,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            ..RetryPolicy::default()
        }
    }
}
