use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use pref_teach::domain::{load_schema, DomainSchema};
use pref_teach::kb::{KbOptions, PreferenceStore, StoreUser};
use pref_teach::manager::{handle_utterance, AgentStep, ManagerConfig, ManagerError, SessionState};
use pref_teach::nlu::{DialogueModel, NluModel};
use serde::{Deserialize, Serialize};

/// Environment variable naming a TOML config file.
pub const CONFIG_ENV: &str = "PREF_TEACH_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Domain schema; the built-in one when absent.
    pub schema: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    /// Preference store directory; in memory when absent.
    pub kb_dir: Option<PathBuf>,
    pub max_sessions: usize,
    pub session_idle_secs: u64,
    pub manager: ManagerConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            schema: None,
            bundle: None,
            kb_dir: None,
            max_sessions: 1024,
            session_idle_secs: 1800,
            manager: ManagerConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or the defaults when there is none.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn load_schema(&self) -> anyhow::Result<DomainSchema> {
        match &self.schema {
            Some(p) => load_schema(p).with_context(|| format!("loading schema {}", p.display())),
            None => Ok(DomainSchema::default_schema()),
        }
    }

    pub fn open_store(&self, schema: &DomainSchema) -> anyhow::Result<PreferenceStore> {
        let options = KbOptions { entity_types: Some(schema.entity_types.iter().cloned().collect()), ..Default::default() };
        match &self.kb_dir {
            Some(dir) => PreferenceStore::open(dir, options).with_context(|| format!("opening preference store {}", dir.display())),
            None => Ok(PreferenceStore::in_memory_with(options)),
        }
    }
}

/// Everything a live session needs: schema, model, store and manager
/// settings.
#[derive(Clone)]
pub struct Engine {
    pub schema: Arc<DomainSchema>,
    pub model: Arc<dyn DialogueModel>,
    pub store: Arc<PreferenceStore>,
    pub manager: ManagerConfig,
}

impl Engine {
    pub fn new(schema: DomainSchema, model: Arc<dyn DialogueModel>, store: PreferenceStore, manager: ManagerConfig) -> Self {
        Engine { schema: Arc::new(schema), model, store: Arc::new(store), manager }
    }

    /// Loads schema, bundle and store. Fails when the bundle was trained
    /// for a different schema.
    pub fn from_config(config: &ServiceConfig) -> anyhow::Result<Self> {
        let schema = config.load_schema()?;
        let bundle = config.bundle.as_ref().context("no model bundle configured")?;
        let model = NluModel::load(bundle, &schema).with_context(|| format!("loading bundle {}", bundle.display()))?;
        let store = config.open_store(&schema)?;
        Ok(Self::new(schema, Arc::new(model), store, config.manager))
    }

    /// Runs one seeker utterance against the user's stored preferences.
    pub fn turn(&self, state: &mut SessionState, text: &str) -> Result<Vec<AgentStep>, ManagerError> {
        let user_id = state.user_id.clone();
        let mut kb = StoreUser { store: &self.store, user_id: &user_id };
        handle_utterance(state, text, self.model.as_ref(), &self.schema, &mut kb, &self.manager)
    }
}
