//! Persistent per-user preference store.
//!
//! Every `update_kb` call appends one JSON line to the user's log; the log
//! is folded into a snapshot file once it grows past a threshold.

mod exec;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{normalize, KbEffect, Polarity};

pub use exec::{run_effect, ApiResult, ExecError, PreferenceBackend, ScratchKb, StoreUser};
pub use store::{KbOptions, PreferenceStore};

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),
    #[error("preference store I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt preference log {path} at line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user_id: String,
    pub domain: String,
    pub entity_type: String,
    pub entity_value: String,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub updated_at: u64,
}

impl PreferenceRecord {
    /// Short human form, e.g. `yankees (like)` or `big sky for weather update`.
    pub fn describe(&self) -> String {
        match (&self.condition, self.polarity) {
            (Some(c), _) => format!("{} for {}", self.entity_value, c),
            (None, Polarity::Like) => self.entity_value.clone(),
            (None, p) => format!("{} ({})", self.entity_value, serde_json::to_value(p).unwrap().as_str().unwrap()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PrefDelta {
    Upsert {
        domain: String,
        entity_type: String,
        entity_value: String,
        polarity: Polarity,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition: Option<String>,
    },
    Delete {
        domain: String,
        entity_type: String,
        entity_value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition: Option<String>,
    },
    DeleteAll,
}

impl PrefDelta {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            PrefDelta::Upsert { entity_type, .. } | PrefDelta::Delete { entity_type, .. } => Some(entity_type),
            PrefDelta::DeleteAll => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
}

impl KbFilter {
    pub fn domain(domain: impl Into<String>) -> Self {
        KbFilter { domain: Some(domain.into()), entity_type: None }
    }

    fn matches(&self, r: &PreferenceRecord) -> bool {
        self.domain.as_ref().is_none_or(|d| d == &r.domain)
            && self.entity_type.as_ref().is_none_or(|t| t == &r.entity_type)
    }
}

type RecordKey = (String, String, String, Option<String>);

/// In-memory preference state of one user.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserKb {
    records: BTreeMap<RecordKey, PreferenceRecord>,
    clock: u64,
}

impl UserKb {
    pub fn from_records(records: Vec<PreferenceRecord>, clock: u64) -> Self {
        let records = records
            .into_iter()
            .map(|r| ((r.domain.clone(), r.entity_type.clone(), r.entity_value.clone(), r.condition.clone()), r))
            .collect();
        UserKb { records, clock }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Applies deltas with successive timestamps starting at `ts`; returns
    /// the number of records inserted, overwritten or removed.
    pub fn apply(&mut self, user_id: &str, deltas: &[PrefDelta], ts: u64) -> usize {
        let mut applied = 0;
        for (i, delta) in deltas.iter().enumerate() {
            let now = ts + i as u64;
            match delta {
                PrefDelta::Upsert { domain, entity_type, entity_value, polarity, condition } => {
                    let value = normalize(entity_value);
                    let condition = condition.as_deref().map(normalize);
                    let key = (domain.clone(), entity_type.clone(), value.clone(), condition.clone());
                    self.records.insert(
                        key,
                        PreferenceRecord {
                            user_id: user_id.to_string(),
                            domain: domain.clone(),
                            entity_type: entity_type.clone(),
                            entity_value: value,
                            polarity: *polarity,
                            condition,
                            updated_at: now,
                        },
                    );
                    applied += 1;
                }
                PrefDelta::Delete { domain, entity_type, entity_value, condition } => {
                    let key = (
                        domain.clone(),
                        entity_type.clone(),
                        normalize(entity_value),
                        condition.as_deref().map(normalize),
                    );
                    if condition.is_some() {
                        applied += usize::from(self.records.remove(&key).is_some());
                    } else {
                        // Without a condition, remove the value under every condition.
                        let before = self.records.len();
                        self.records.retain(|k, _| (&k.0, &k.1, &k.2) != (&key.0, &key.1, &key.2));
                        applied += before - self.records.len();
                    }
                }
                PrefDelta::DeleteAll => {
                    applied += self.records.len();
                    self.records.clear();
                }
            }
        }
        self.clock = self.clock.max(ts + deltas.len() as u64);
        applied
    }

    /// Records matching `filter`, sorted by (domain, entity_type, updated_at).
    pub fn retrieve(&self, filter: &KbFilter) -> Vec<PreferenceRecord> {
        let mut out: Vec<PreferenceRecord> = self.records.values().filter(|r| filter.matches(r)).cloned().collect();
        out.sort_by(|a, b| {
            (&a.domain, &a.entity_type, a.updated_at, &a.entity_value).cmp(&(
                &b.domain,
                &b.entity_type,
                b.updated_at,
                &b.entity_value,
            ))
        });
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// What an API call does to the store, resolved against concrete values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KbOp {
    Update(Vec<PrefDelta>),
    Retrieve(KbFilter),
}

/// Maps a schema effect onto a store operation. `values` holds the
/// surface value bound to each argument.
pub fn effect_op(effect: &KbEffect, values: &BTreeMap<String, String>) -> Result<KbOp, String> {
    let get = |name: &str| values.get(name).cloned().ok_or_else(|| format!("argument `{name}` is not bound"));
    Ok(match effect {
        KbEffect::Upsert { domain, entity_type, value_arg, polarity, condition_arg } => KbOp::Update(vec![PrefDelta::Upsert {
            domain: domain.clone(),
            entity_type: entity_type.clone(),
            entity_value: get(value_arg)?,
            polarity: *polarity,
            condition: condition_arg.as_deref().map(get).transpose()?,
        }]),
        KbEffect::Delete { domain, entity_type, value_arg, condition_arg } => KbOp::Update(vec![PrefDelta::Delete {
            domain: domain.clone(),
            entity_type: entity_type.clone(),
            entity_value: get(value_arg)?,
            condition: condition_arg.as_deref().map(get).transpose()?,
        }]),
        KbEffect::Retrieve { domain } => KbOp::Retrieve(KbFilter { domain: domain.clone(), entity_type: None }),
        KbEffect::DeleteAll => KbOp::Update(vec![PrefDelta::DeleteAll]),
    })
}
