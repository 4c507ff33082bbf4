#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use pref_teach::domain::{Dialogue, DomainSchema, EntityMention};
use pref_teach::encoder::{Candidate, ContextState};
use pref_teach::kb::PreferenceStore;
use pref_teach::manager::ManagerConfig;
use pref_teach::nlu::{DialogueModel, GoldOracle};
use pref_teach::simulator::{Simulator, VariationConfig};
use pref_teach_cli::Engine;
use serde_json::Value;
use tower::ServiceExt;

pub fn schema() -> DomainSchema {
    DomainSchema::default_schema()
}

/// First simulated dialogue whose API sequence is `apis`.
pub fn dialogue_with(apis: &[&str]) -> Dialogue {
    let sim = Simulator::new(schema(), VariationConfig { error_injection_rate: 0.0, ..Default::default() }).unwrap();
    sim.generate(600, 21).unwrap().into_iter().find(|d| d.goal.api_sequence() == apis).expect("goal in corpus")
}

pub fn user_texts(d: &Dialogue) -> Vec<String> {
    d.turns.iter().map(|t| t.user.utterance.text.clone()).collect()
}

pub fn engine_with(model: Arc<dyn DialogueModel>, store: PreferenceStore) -> Engine {
    Engine::new(schema(), model, store, ManagerConfig::default())
}

pub fn gold_engine(d: &Dialogue) -> Engine {
    engine_with(Arc::new(GoldOracle::new(d.clone(), &schema())), PreferenceStore::in_memory())
}

/// Delays entity recognition so requests overlap.
pub struct Slow<M>(pub M, pub Duration);

impl<M: DialogueModel> DialogueModel for Slow<M> {
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention> {
        std::thread::sleep(self.1);
        self.0.recognize(tokens)
    }

    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)> {
        self.0.rank_actions(state)
    }

    fn score_arguments(&self, state: &ContextState, action: &str, arg: &str, arg_type: &str) -> Vec<(Candidate, f64)> {
        self.0.score_arguments(state, action, arg, arg_type)
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into())) };
    (status, value)
}

/// Checks `value` against one definition of the published response schema.
pub fn conforms(def: &str, value: &Value) {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/api/responses.schema.json")).unwrap();
    let mut doc: Value = serde_json::from_str(&text).unwrap();
    doc["$ref"] = Value::String(format!("#/$defs/{def}"));
    let compiled = jsonschema::JSONSchema::options().with_draft(jsonschema::Draft::Draft202012).compile(&doc).unwrap();
    let msgs: Vec<String> = match compiled.validate(value) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{def} violated: {msgs:?}\n{value:#}");
}
