//! Engine configuration: `aixel.toml` keys, overridable by `AIXEL_*`
//! environment variables, overridable again by command-line flags
//! (precedence: flags > env > file).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::Metric;
use crate::search::RankWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexDefaults {
    pub max_degree: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub metric: Metric,
}

impl Default for IndexDefaults {
    fn default() -> Self {
        IndexDefaults {
            max_degree: 16,
            ef_construction: 128,
            ef_search: 128,
            metric: Metric::Cosine,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchDefaults {
    pub k: usize,
    pub weights: RankWeights,
}

impl Default for SearchDefaults {
    fn default() -> Self {
        SearchDefaults {
            k: 10,
            weights: RankWeights::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionDefaults {
    pub budget: usize,
    pub dedup_threshold: f64,
}

impl Default for SelectionDefaults {
    fn default() -> Self {
        SelectionDefaults {
            budget: 1000,
            dedup_threshold: 0.95,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftDefaults {
    pub window: usize,
    pub baseline_windows: usize,
    pub theta_up: f64,
    pub theta_down: f64,
}

impl Default for DriftDefaults {
    fn default() -> Self {
        DriftDefaults {
            window: 50,
            baseline_windows: 4,
            theta_up: 1.0,
            theta_down: 0.7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    /// `mock` or `http`. HTTP endpoint and key come from the environment,
    /// never from request files.
    pub backend: String,
    pub max_calls: u64,
    pub max_tokens: u64,
    pub context_budget: u64,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            backend: "mock".into(),
            max_calls: u64::MAX,
            max_tokens: u64::MAX,
            context_budget: 8192,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub seed: u64,
    pub index: IndexDefaults,
    pub search: SearchDefaults,
    pub selection: SelectionDefaults,
    pub drift: DriftDefaults,
    pub gateway: GatewaySettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            data_dir: PathBuf::from(".aixel"),
            workers: std::thread::available_parallelism()
                .map(|v| v.get())
                .unwrap_or(2),
            seed: 42,
            index: IndexDefaults::default(),
            search: SearchDefaults::default(),
            selection: SelectionDefaults::default(),
            drift: DriftDefaults::default(),
            gateway: GatewaySettings::default(),
        }
    }
}

impl EngineConfig {
    /// Loads `aixel.toml` when present, then applies environment
    /// overrides.
    pub fn load(path: Option<&Path>) -> Result<EngineConfig, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => {
                let default_path = Path::new("aixel.toml");
                if default_path.exists() {
                    Self::from_file(default_path)?
                } else {
                    EngineConfig::default()
                }
            }
        };
        config.apply_env();
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<EngineConfig, ConfigError> {
        let body = std::fs::read_to_string(path)?;
        toml::from_str(&body).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// `AIXEL_*` variables override file values.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var("AIXEL_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("AIXEL_WORKERS") {
            if let Ok(n) = v.parse() {
                self.workers = n;
            }
        }
        if let Ok(v) = std::env::var("AIXEL_SEED") {
            if let Ok(n) = v.parse() {
                self.seed = n;
            }
        }
        if let Ok(v) = std::env::var("AIXEL_GATEWAY_BACKEND") {
            self.gateway.backend = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.index.max_degree == 0 {
            return Err(ConfigError::Invalid("index.max_degree must be positive".into()));
        }
        if self.index.ef_construction < self.index.max_degree {
            return Err(ConfigError::Invalid(
                "index.ef_construction must be >= index.max_degree".into(),
            ));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be positive".into()));
        }
        self.search
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.drift.theta_up > self.drift.theta_down && self.drift.theta_down > 0.0) {
            return Err(ConfigError::Invalid(
                "drift thresholds must satisfy theta_up > theta_down > 0".into(),
            ));
        }
        Ok(())
    }
}
