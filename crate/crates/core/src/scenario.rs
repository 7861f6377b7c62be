//! Scenario documents: everything needed to replay a session on the virtual
//! clock.
//!
//! ```json
//! {
//!   "format": "agent-scenario/1",
//!   "system_prompt": "You are a concierge.",
//!   "tools": [{"name": "weather", "latency_ms": 2000, "response": "Sunny"}],
//!   "model_rules": [{"trigger": "Weather?", "reply": "<|chat|>One moment."}],
//!   "utterances": [{"start_ms": 0, "end_ms": 800, "text": "Weather?"}]
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::dispatcher::{ModelRegistry, ModelRule, ScriptedModel, ScriptedModelSpec};
use crate::ledger::Millis;
use crate::peripherals::{validate_utterances, ClockMode, Utterance, UtteranceError};
use crate::runtime::{Runtime, RuntimeConfig, RuntimeError, RuntimeSetup, Until};
use crate::toolkit::{ToolDecl, ToolRegistry};

pub const SCENARIO_FORMAT: &str = "agent-scenario/1";
pub const ROOT_MODEL: &str = "scripted";
pub const DEFAULT_MAX_VIRTUAL_TIME_MS: Millis = 600_000;

fn default_max_time() -> Millis {
    DEFAULT_MAX_VIRTUAL_TIME_MS
}

fn default_token_delay() -> Millis {
    ScriptedModelSpec::default().token_delay_ms
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertions {
    /// Trace file the run must reproduce, relative to the scenario file.
    #[serde(default)]
    pub golden_trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub system_prompt: String,
    #[serde(default)]
    pub tools: Vec<ToolDecl>,
    #[serde(default = "default_token_delay")]
    pub token_delay_ms: Millis,
    #[serde(default)]
    pub model_rules: Vec<ModelRule>,
    /// Extra models that fork and spawn calls may name.
    #[serde(default)]
    pub models: BTreeMap<String, ScriptedModelSpec>,
    #[serde(default)]
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub config: RuntimeConfig,
    #[serde(default = "default_max_time")]
    pub max_virtual_time_ms: Millis,
    #[serde(default)]
    pub until: Until,
    #[serde(default)]
    pub assertions: Assertions,
    /// Directory the scenario was loaded from; golden paths resolve here.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario field `{path}`: {detail}")]
    Schema { path: String, detail: String },
    #[error("unsupported scenario format `{0}`")]
    Format(String),
    #[error(transparent)]
    Utterances(#[from] UtteranceError),
    #[error("tool `{name}`: {detail}")]
    Tool { name: String, detail: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario =
            serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
                path: e.path().to_string(),
                detail: e.inner().to_string(),
            })?;
        if scenario.format != SCENARIO_FORMAT {
            return Err(ScenarioError::Format(scenario.format));
        }
        validate_utterances(&scenario.utterances)?;
        scenario.tool_registry()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario = Self::from_json(&text)?;
        scenario.base_dir = path.parent().map(Path::to_path_buf);
        Ok(scenario)
    }

    /// Location of the golden trace, if one is declared.
    pub fn golden_path(&self) -> Option<PathBuf> {
        let rel = self.assertions.golden_trace.as_ref()?;
        Some(match &self.base_dir {
            Some(dir) => dir.join(rel),
            None => rel.clone(),
        })
    }

    pub fn tool_registry(&self) -> Result<ToolRegistry, ScenarioError> {
        let mut registry = ToolRegistry::new();
        for decl in &self.tools {
            let def = decl
                .to_def(Duration::from_secs(30))
                .map_err(|detail| ScenarioError::Tool {
                    name: decl.name.clone(),
                    detail,
                })?;
            registry.register(def).map_err(|e| ScenarioError::Tool {
                name: decl.name.clone(),
                detail: e.to_string(),
            })?;
        }
        Ok(registry)
    }

    pub fn model_registry(&self) -> ModelRegistry {
        let mut models = ModelRegistry::new();
        models.register(Arc::new(ScriptedModel::new(
            ROOT_MODEL,
            ScriptedModelSpec {
                token_delay_ms: self.token_delay_ms,
                rules: self.model_rules.clone(),
            },
        )));
        for (name, spec) in &self.models {
            models.register(Arc::new(ScriptedModel::new(name.clone(), spec.clone())));
        }
        models
    }

    /// A fresh runtime on the virtual clock with the utterances scheduled.
    pub fn build(&self) -> Result<Runtime, ScenarioError> {
        let mut runtime = Runtime::new(RuntimeSetup {
            config: self.config.clone(),
            system_prompt: self.system_prompt.clone(),
            tools: self.tool_registry()?,
            models: self.model_registry(),
            model: ROOT_MODEL.to_string(),
            clock: ClockMode::Virtual,
        })?;
        for u in &self.utterances {
            runtime.schedule_utterance(u);
        }
        Ok(runtime)
    }
}
