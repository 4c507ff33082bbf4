use std::collections::BTreeMap;

use super::{effect_op, KbError, KbFilter, KbOp, PrefDelta, PreferenceRecord, PreferenceStore, UserKb};
use crate::domain::{ApiOutcome, KbEffect};

/// Store access scoped to one user.
pub trait PreferenceBackend {
    fn update(&mut self, deltas: &[PrefDelta]) -> Result<usize, KbError>;
    fn retrieve(&mut self, filter: &KbFilter) -> Result<Vec<PreferenceRecord>, KbError>;
}

/// Throwaway single-user store used while simulating.
#[derive(Debug, Clone, Default)]
pub struct ScratchKb {
    pub user_id: String,
    pub kb: UserKb,
}

impl PreferenceBackend for ScratchKb {
    fn update(&mut self, deltas: &[PrefDelta]) -> Result<usize, KbError> {
        let ts = self.kb.clock() + 1;
        Ok(self.kb.apply(&self.user_id, deltas, ts))
    }

    fn retrieve(&mut self, filter: &KbFilter) -> Result<Vec<PreferenceRecord>, KbError> {
        Ok(self.kb.retrieve(filter))
    }
}

pub struct StoreUser<'a> {
    pub store: &'a PreferenceStore,
    pub user_id: &'a str,
}

impl PreferenceBackend for StoreUser<'_> {
    fn update(&mut self, deltas: &[PrefDelta]) -> Result<usize, KbError> {
        self.store.update_kb(self.user_id, deltas)
    }

    fn retrieve(&mut self, filter: &KbFilter) -> Result<Vec<PreferenceRecord>, KbError> {
        self.store.retrieve_kb(self.user_id, filter)
    }
}

/// What an executed API call returned; referenced later through its
/// result handle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResult {
    pub outcome: ApiOutcome,
    pub value: Option<String>,
    pub condition: Option<String>,
    pub records: Vec<PreferenceRecord>,
    pub applied: usize,
}

impl ApiResult {
    /// Slot values for provider templates.
    pub fn slots(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if let Some(v) = &self.value {
            out.insert("value".to_string(), v.clone());
        }
        if let Some(c) = &self.condition {
            out.insert("condition".to_string(), c.clone());
        }
        out.insert("count".to_string(), self.records.len().to_string());
        let prefs: Vec<String> = self.records.iter().map(PreferenceRecord::describe).collect();
        let prefs = if prefs.is_empty() { "nothing yet".to_string() } else { prefs.join(" , ") };
        out.insert("preferences".to_string(), prefs);
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("{0}")]
    Unbound(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}

/// Runs one schema effect against `kb` with concrete argument values.
pub fn run_effect(
    effect: &KbEffect,
    values: &BTreeMap<String, String>,
    kb: &mut dyn PreferenceBackend,
) -> Result<ApiResult, ExecError> {
    let op = effect_op(effect, values).map_err(ExecError::Unbound)?;
    Ok(match op {
        KbOp::Update(deltas) => {
            let applied = kb.update(&deltas)?;
            let (value, condition) = match deltas.first() {
                Some(PrefDelta::Upsert { entity_value, condition, .. })
                | Some(PrefDelta::Delete { entity_value, condition, .. }) => (Some(entity_value.clone()), condition.clone()),
                _ => (None, None),
            };
            ApiResult { outcome: ApiOutcome::Ok, value, condition, records: Vec::new(), applied }
        }
        KbOp::Retrieve(filter) => {
            let records = kb.retrieve(&filter)?;
            let outcome = if records.is_empty() { ApiOutcome::Empty } else { ApiOutcome::Ok };
            ApiResult { outcome, value: None, condition: None, records, applied: 0 }
        }
    })
}
