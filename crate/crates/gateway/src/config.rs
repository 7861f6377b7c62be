use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use asyncagent_core::dispatcher::{ModelRegistry, RemoteModel, RemoteModelConfig, ScriptedModel, ScriptedModelSpec};
use asyncagent_core::ledger::Millis;
use asyncagent_core::peripherals::DEFAULT_TICK_INTERVAL_MS;
use asyncagent_core::runtime::{Priorities, RuntimeConfig};
use asyncagent_core::toolkit::{ToolDecl, ToolRegistry};

pub const DEFAULT_PORT: u16 = 8765;
pub const SCRIPTED_MODEL: &str = "scripted";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    /// Model used when the client does not pick one with `?model=`.
    pub model: String,
    pub tools: Vec<ToolDecl>,
    pub priorities: Priorities,
    pub tick_interval_ms: Millis,
    pub port: u16,
    pub system_prompt: String,
    pub chars_per_second: u32,
    /// Rules of the built-in scripted model.
    pub scripted: ScriptedModelSpec,
    /// Remote chat-completions models by name.
    pub remote: BTreeMap<String, RemoteModelConfig>,
    /// Outgoing frames buffered per session before it is closed.
    pub frame_buffer: usize,
    /// How often the session loop advances the environment.
    pub step_ms: u64,
    pub http_tool_timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let runtime = RuntimeConfig::default();
        Self {
            model: SCRIPTED_MODEL.to_string(),
            tools: Vec::new(),
            priorities: runtime.priorities,
            tick_interval_ms: DEFAULT_TICK_INTERVAL_MS,
            port: DEFAULT_PORT,
            system_prompt: String::new(),
            chars_per_second: runtime.chars_per_second,
            scripted: ScriptedModelSpec::default(),
            remote: BTreeMap::new(),
            frame_buffer: 1024,
            step_ms: 20,
            http_tool_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {detail}")]
    Read { path: String, detail: String },
    #[error("invalid gateway config: {0}")]
    Invalid(String),
}

impl GatewayConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.tool_registry()?;
        if cfg.tick_interval_ms == 0 {
            return Err(ConfigError::Invalid("tick_interval_ms must be positive".into()));
        }
        if cfg.frame_buffer == 0 {
            return Err(ConfigError::Invalid("frame_buffer must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            tick_interval_ms: self.tick_interval_ms,
            chars_per_second: self.chars_per_second,
            priorities: self.priorities,
            ..RuntimeConfig::default()
        }
    }

    pub fn tool_registry(&self) -> Result<ToolRegistry, ConfigError> {
        let timeout = Duration::from_millis(self.http_tool_timeout_ms);
        let mut registry = ToolRegistry::new();
        for decl in &self.tools {
            let def = decl
                .to_def(timeout)
                .map_err(|e| ConfigError::Invalid(format!("tool `{}`: {e}", decl.name)))?;
            registry
                .register(def)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(registry)
    }

    pub fn model_registry(&self) -> ModelRegistry {
        let mut models = ModelRegistry::new();
        models.register(Arc::new(ScriptedModel::new(SCRIPTED_MODEL, self.scripted.clone())));
        for (name, cfg) in &self.remote {
            models.register(Arc::new(RemoteModel::new(name.clone(), cfg.clone())));
        }
        models
    }
}
