//! Run configuration file and backend selection.

use std::path::{Path, PathBuf};

use llmpred::gateway::remote::DEFAULT_API_KEY_ENV;
use llmpred::gateway::{
    Backend, Gateway, MockBackend, MockMode, RemoteBackend, RemoteConfig, ResponseCache,
};
use llmpred::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Either `mock:<mode>` or `openai-compatible:<url>`.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Mock(MockMode),
    OpenAiCompatible(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(mode) = s.strip_prefix("mock:") {
            return mode.parse().map(Self::Mock);
        }
        if s == "mock" {
            return Ok(Self::Mock(MockMode::persistence()));
        }
        match s.strip_prefix("openai-compatible:") {
            Some(url) if !url.is_empty() => Ok(Self::OpenAiCompatible(url.to_string())),
            _ => Err(format!(
                "unknown backend {s:?}; expected mock:<mode> or openai-compatible:<url>"
            )),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Mock(m) => write!(f, "mock:{m}"),
            Self::OpenAiCompatible(url) => write!(f, "openai-compatible:{url}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub backend: String,
    /// Model name sent to OpenAI-compatible endpoints.
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub pipeline: PipelineConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let remote = RemoteConfig::default();
        Self {
            backend: "mock:persistence".into(),
            model: remote.model,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_in_flight: llmpred::gateway::DEFAULT_MAX_IN_FLIGHT,
            timeout_secs: remote.timeout_secs,
            pipeline: PipelineConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl CliConfig {
    /// Reads a JSON config; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingFile(path.to_path_buf())
            } else {
                CliError::Io(format!("{}: {e}", path.display()))
            }
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.pipeline;
        resolve(base, &mut p.dataset);
        resolve(base, &mut p.cache_path);
        resolve(base, &mut p.out_dir);
        Ok(cfg)
    }

    pub fn backend_spec(&self) -> Result<BackendSpec, CliError> {
        self.backend.parse().map_err(|message| CliError::Config {
            field: "backend".into(),
            message,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.backend_spec()?;
        if self.max_in_flight == 0 {
            return Err(CliError::Config {
                field: "max_in_flight".into(),
                message: "must be >= 1".into(),
            });
        }
        self.pipeline.validate()?;
        Ok(())
    }

    pub fn build_gateway(&self) -> Result<Gateway, CliError> {
        let backend: Box<dyn Backend> = match self.backend_spec()? {
            BackendSpec::Mock(mode) => Box::new(MockBackend::new(mode)),
            BackendSpec::OpenAiCompatible(url) => Box::new(
                RemoteBackend::new(RemoteConfig {
                    url,
                    model: self.model.clone(),
                    api_key_env: self.api_key_env.clone(),
                    timeout_secs: self.timeout_secs,
                    ..RemoteConfig::default()
                })
                .map_err(|e| CliError::Backend(e.to_string()))?,
            ),
        };
        let mut gw = Gateway::new(backend)
            .with_scheme(self.pipeline.token_scheme)
            .with_max_in_flight(self.max_in_flight);
        if let Some(path) = &self.pipeline.cache_path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            }
            gw = gw.with_cache(ResponseCache::open(path).map_err(|e| CliError::Io(e.to_string()))?);
        }
        Ok(gw)
    }
}
