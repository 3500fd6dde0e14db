//! Service configuration file and provider selection.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::gateway::{
    CompletionProvider, Gateway, GatewayError, HttpProvider, ModelConfigSet, RecordReplayProvider, ScriptedProvider,
};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};
use crate::prompt::{PromptError, TemplateSet};
use crate::sandbox::{Sandbox, SandboxConfig, SandboxLimits};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid provider {0:?}: expected live, scripted:FILE, replay:DIR or record:DIR")]
    Provider(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Live,
    Scripted(PathBuf),
    Replay(PathBuf),
    /// Live calls, archived under the directory.
    Record(PathBuf),
}

impl FromStr for ProviderSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::Provider(s.to_string());
        if s == "live" {
            return Ok(Self::Live);
        }
        let (mode, arg) = s.split_once(':').ok_or_else(bad)?;
        if arg.is_empty() {
            return Err(bad());
        }
        let arg = PathBuf::from(arg);
        match mode {
            "scripted" => Ok(Self::Scripted(arg)),
            "replay" => Ok(Self::Replay(arg)),
            "record" => Ok(Self::Record(arg)),
            _ => Err(bad()),
        }
    }
}

impl ProviderSpec {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Self::Scripted(_) | Self::Replay(_))
    }

    pub fn build(&self) -> Result<Arc<dyn CompletionProvider>, GatewayError> {
        Ok(match self {
            Self::Live => Arc::new(HttpProvider::default()),
            Self::Scripted(p) => Arc::new(ScriptedProvider::from_file(p)?),
            Self::Replay(d) => Arc::new(RecordReplayProvider::replay(d)?),
            Self::Record(d) => Arc::new(RecordReplayProvider::record(d, Arc::new(HttpProvider::default()))?),
        })
    }
}

/// Service settings. Relative paths are resolved against the file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub provider: String,
    /// TOML file with per-component model settings.
    pub provider_config: Option<PathBuf>,
    /// Directory of prompt templates; the built-in set when absent.
    pub template_dir: Option<PathBuf>,
    pub store_root: PathBuf,
    pub interpreter: String,
    pub teaching_language: String,
    pub max_concurrent: usize,
    pub limits: SandboxLimits,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            provider: "live".into(),
            provider_config: None,
            template_dir: None,
            store_root: PathBuf::from("taskgen-data"),
            interpreter: "python3".into(),
            teaching_language: "English".into(),
            max_concurrent: 4,
            limits: SandboxLimits::default(),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.provider_config = cfg.provider_config.map(|p| resolve(base, &p));
        cfg.template_dir = cfg.template_dir.map(|p| resolve(base, &p));
        cfg.store_root = resolve(base, &cfg.store_root);
        if let Ok(ProviderSpec::Scripted(p) | ProviderSpec::Replay(p) | ProviderSpec::Record(p)) = cfg.provider.parse()
        {
            let mode = cfg.provider.split_once(':').map_or("", |(m, _)| m).to_string();
            cfg.provider = format!("{mode}:{}", resolve(base, &p).display());
        }
        cfg.limits.validate().map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    pub fn provider_spec(&self) -> Result<ProviderSpec, ConfigError> {
        self.provider.parse()
    }

    pub fn sandbox(&self) -> Sandbox {
        Sandbox::new(SandboxConfig {
            interpreter: self.interpreter.clone(),
            max_concurrent: self.max_concurrent,
            ..SandboxConfig::default()
        })
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        Ok(match &self.template_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::defaults(),
        })
    }

    pub fn models(&self) -> Result<ModelConfigSet, ConfigError> {
        Ok(match &self.provider_config {
            Some(p) => ModelConfigSet::load(p)?,
            None => ModelConfigSet::default(),
        })
    }

    pub fn pipeline(&self) -> Result<Pipeline, ConfigError> {
        let provider = self.provider_spec()?.build()?;
        let config =
            PipelineConfig { models: self.models()?, limits: self.limits.clone(), ..PipelineConfig::default() };
        Ok(Pipeline::new(Arc::new(self.templates()?), Arc::new(Gateway::new(provider)), self.sandbox(), config)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_specs() {
        assert_eq!("live".parse::<ProviderSpec>().unwrap(), ProviderSpec::Live);
        assert_eq!("scripted:a.json".parse::<ProviderSpec>().unwrap(), ProviderSpec::Scripted("a.json".into()));
        assert_eq!("replay:/x".parse::<ProviderSpec>().unwrap(), ProviderSpec::Replay("/x".into()));
        assert!("scripted:".parse::<ProviderSpec>().is_err());
        assert!("mock".parse::<ProviderSpec>().is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let text = r#"
            listen = "0.0.0.0:9000"
            provider = "scripted:script.json"
            store_root = "data"

            [limits]
            wall_timeout_ms = 3000
        "#;
        let cfg = ServiceConfig::from_toml_str(text, Path::new("/etc/taskgen/service.toml")).unwrap();
        assert_eq!(cfg.store_root, PathBuf::from("/etc/taskgen/data"));
        assert_eq!(cfg.provider, "scripted:/etc/taskgen/script.json");
        assert_eq!(cfg.limits.wall_timeout_ms, 3000);
        assert_eq!(cfg.limits.max_output_bytes, SandboxLimits::default().max_output_bytes);
    }

    #[test]
    fn unknown_keys_and_bad_limits_are_rejected() {
        assert!(ServiceConfig::from_toml_str("lisen = \"x\"", Path::new("c.toml")).is_err());
        assert!(ServiceConfig::from_toml_str("[limits]\nnetwork_allowed = true", Path::new("c.toml")).is_err());
    }
}
