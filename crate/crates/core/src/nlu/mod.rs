//! Jointly trained recognizers over the shared encoder: entity tagging
//! (BiGRU + CRF), action prediction (MLP over the pooled context) and
//! argument filling (additive attention over typed candidates).

pub mod crf;
mod model;
pub mod tags;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use model::{CandidateInput, Losses, Network, NetworkConfig};
pub use train::{train, train_with_progress, EpochStats, TrainConfig};

use crate::domain::{ArgumentBinding, Dialogue, DomainSchema, EntityMention};
use crate::encoder::{Candidate, CatalogIndex, ContextState, Inventory};

pub const BUNDLE_VERSION: u32 = 1;
/// Minimum sigmoid score for a candidate to fill an argument.
pub const FILL_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum NluError {
    #[error("model was trained for schema {expected}, got {actual}")]
    SchemaMismatch { expected: String, actual: String },
    #[error("unsupported model bundle version {0}")]
    Version(u32),
    #[error("model bundle holds {actual} parameters, layout needs {expected}")]
    Corrupt { expected: usize, actual: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training dialogues")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What the dialogue manager needs from a trained model.
pub trait DialogueModel: Send + Sync {
    /// Entity mentions in a seeker utterance.
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention>;
    /// Every action with its probability, most likely first.
    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)>;
    /// Type-compatible candidates for one argument with their scores.
    fn score_arguments(&self, state: &ContextState, action: &str, arg: &str, arg_type: &str) -> Vec<(Candidate, f64)>;
}

/// Binds every argument of `action` to its best candidate. Returns the
/// name of the first argument with no candidate above the threshold.
pub fn fill_arguments(
    model: &dyn DialogueModel,
    schema: &DomainSchema,
    state: &ContextState,
    action: &str,
) -> Result<BTreeMap<String, ArgumentBinding>, String> {
    let mut out = BTreeMap::new();
    let Some(sig) = schema.signature(action) else { return Ok(out) };
    for spec in &sig.arguments {
        let best = model
            .score_arguments(state, action, &spec.name, &spec.arg_type)
            .into_iter()
            .filter(|(_, p)| *p >= FILL_THRESHOLD)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((c, _)) => {
                out.insert(spec.name.clone(), c.binding);
            }
            None if spec.required => return Err(spec.name.clone()),
            None => {}
        }
    }
    Ok(out)
}

/// Serialized trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub schema_fingerprint: String,
    pub train: TrainConfig,
    pub inventory: Inventory,
    pub params: Vec<f64>,
    pub history: Vec<EpochStats>,
}

impl ModelBundle {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NluError> {
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NluError> {
        let b: ModelBundle = serde_json::from_slice(&std::fs::read(path)?)?;
        if b.version != BUNDLE_VERSION {
            return Err(NluError::Version(b.version));
        }
        Ok(b)
    }
}

/// A trained model bound to a schema whose catalogs drive the catalog
/// features. The catalogs may differ from the training schema.
#[derive(Debug, Clone)]
pub struct NluModel {
    pub bundle: ModelBundle,
    pub net: Network,
    schema: DomainSchema,
    catalogs: CatalogIndex,
}

impl NluModel {
    pub fn new(bundle: ModelBundle, schema: &DomainSchema) -> Result<Self, NluError> {
        let actual = schema.fingerprint();
        if actual != bundle.schema_fingerprint {
            return Err(NluError::SchemaMismatch { expected: bundle.schema_fingerprint.clone(), actual });
        }
        let (net, _) = Network::new(bundle.train.network, &bundle.inventory);
        if net.n_params != bundle.params.len() {
            return Err(NluError::Corrupt { expected: net.n_params, actual: bundle.params.len() });
        }
        let catalogs = CatalogIndex::new(schema, &bundle.inventory.entity_types);
        Ok(NluModel { bundle, net, schema: schema.clone(), catalogs })
    }

    pub fn load(path: impl AsRef<Path>, schema: &DomainSchema) -> Result<Self, NluError> {
        Self::new(ModelBundle::load(path)?, schema)
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    fn context(&self, state: &ContextState) -> Vec<f64> {
        let p = &self.bundle.params;
        let inv = &self.bundle.inventory;
        let enc = self.net.enc.encode_turn(p, &self.net.enc.turn_input(state, inv, &self.catalogs));
        self.net.enc.context(p, &enc, &self.net.enc.action_items(state, inv))
    }
}

impl DialogueModel for NluModel {
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention> {
        let mut state = ContextState::default();
        state.push_turn(tokens.to_vec(), Vec::new());
        let inv = &self.bundle.inventory;
        let input = self.net.enc.turn_input(&state, inv, &self.catalogs);
        let enc = self.net.enc.encode_turn(&self.bundle.params, &input);
        tags::mentions(tokens, &self.net.tag(&self.bundle.params, &enc), &inv.entity_types)
    }

    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)> {
        let probs = self.net.action_probs(&self.bundle.params, &self.context(state));
        let mut out: Vec<(String, f64)> = self.bundle.inventory.actions.iter().cloned().zip(probs).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    fn score_arguments(&self, state: &ContextState, action: &str, arg: &str, arg_type: &str) -> Vec<(Candidate, f64)> {
        let c = self.context(state);
        let cands = state.candidates(&self.schema);
        self.net
            .score_arguments(&self.bundle.params, &self.bundle.inventory, &c, &cands, action, arg, arg_type)
            .into_iter()
            .map(|(c, p)| (c.clone(), p))
            .collect()
    }
}

/// Replays the annotations of one gold dialogue. Used to check the
/// manager and the evaluator independently of any trained model.
#[derive(Debug, Clone)]
pub struct GoldOracle {
    pub dialogue: Dialogue,
    schema: DomainSchema,
}

impl GoldOracle {
    pub fn new(dialogue: Dialogue, schema: &DomainSchema) -> Self {
        GoldOracle { dialogue, schema: schema.clone() }
    }

    fn gold_step(&self, state: &ContextState) -> Option<&crate::domain::ActionRecord> {
        let turn = self.dialogue.turns.get(state.current_index())?;
        turn.actions.get(state.current()?.actions.len())
    }
}

impl DialogueModel for GoldOracle {
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention> {
        self.dialogue.turns.iter().find(|t| t.tokens() == tokens).map(|t| t.entities().to_vec()).unwrap_or_default()
    }

    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)> {
        let gold = self.gold_step(state).map(|a| a.name.clone());
        let mut out: Vec<(String, f64)> = self
            .schema
            .signatures()
            .into_iter()
            .map(|s| {
                let p = if Some(&s.name) == gold.as_ref() { 1.0 } else { 0.0 };
                (s.name, p)
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    fn score_arguments(&self, state: &ContextState, action: &str, arg: &str, arg_type: &str) -> Vec<(Candidate, f64)> {
        let gold = self.gold_step(state).filter(|a| a.name == action).and_then(|a| a.args.get(arg));
        state
            .candidates(&self.schema)
            .into_iter()
            .filter(|c| c.type_name == arg_type)
            .map(|c| {
                let p = if Some(&c.binding) == gold { 1.0 } else { 0.0 };
                (c, p)
            })
            .collect()
    }
}
