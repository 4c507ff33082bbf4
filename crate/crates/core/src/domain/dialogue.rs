use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::tokenize::tokenize;

pub const WAIT_FOR_USER_INPUT: &str = "wait_for_user_input";
pub const END_DIALOGUE: &str = "end_dialogue";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Seeker,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<String>,
    pub speaker: Speaker,
}

impl Utterance {
    pub fn seeker(text: impl Into<String>) -> Self {
        let text = text.into();
        Utterance { tokens: tokenize(&text), text, speaker: Speaker::Seeker }
    }

    pub fn normalized(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A typed span `[start, end)` over the tokens of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
    pub value: String,
}

impl EntityMention {
    pub fn from_tokens(tokens: &[String], start: usize, end: usize, entity_type: &str) -> Self {
        EntityMention {
            start,
            end,
            entity_type: entity_type.to_string(),
            value: tokens[start..end].join(" "),
        }
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Api,
    Nlg,
    Sys,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Api => "API",
            ActionKind::Nlg => "NLG",
            ActionKind::Sys => "SYS",
        })
    }
}

/// Where an argument value comes from. Seeker entities point at a span in
/// the seeker utterance of turn `turn`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ArgumentBinding {
    SeekerEntity { turn: usize, start: usize, end: usize },
    ApiResult { result_ref: String },
    Constant { literal: String },
}

/// Whether an API call returned anything. Recorded so later steps can
/// condition on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiOutcome {
    Ok,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRecord {
    pub kind: ActionKind,
    pub name: String,
    pub args: BTreeMap<String, ArgumentBinding>,
    pub result_ref: Option<String>,
    pub outcome: Option<ApiOutcome>,
    /// Rendered provider text for NLG actions, when available.
    pub text: Option<String>,
}

impl ActionRecord {
    pub fn new(kind: ActionKind, name: impl Into<String>) -> Self {
        ActionRecord { kind, name: name.into(), args: BTreeMap::new(), result_ref: None, outcome: None, text: None }
    }

    pub fn sys(name: &str) -> Self {
        Self::new(ActionKind::Sys, name)
    }

    pub fn is_control(&self) -> bool {
        self.kind == ActionKind::Sys
    }

    /// Markup form `name(arg=value, ...) -> result`, with seeker entities
    /// written as `turn:start-end` spans.
    pub fn normalized_value(&self) -> String {
        let args: Vec<String> = self
            .args
            .iter()
            .map(|(name, binding)| {
                let value = match binding {
                    ArgumentBinding::SeekerEntity { turn, start, end } => format!("@{turn}:{start}-{end}"),
                    ArgumentBinding::ApiResult { result_ref } => result_ref.clone(),
                    ArgumentBinding::Constant { literal } => format!("{literal:?}"),
                };
                format!("{name}={value}")
            })
            .collect();
        let mut out = format!("{}({})", self.name, args.join(", "));
        if let Some(result) = &self.result_ref {
            out.push_str(" -> ");
            out.push_str(result);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ActionWire {
    #[serde(rename = "type")]
    kind: ActionKind,
    name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    args: BTreeMap<String, ArgumentBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outcome: Option<ApiOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default)]
    normalized_value: String,
}

impl Serialize for ActionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ActionWire {
            kind: self.kind,
            name: self.name.clone(),
            args: self.args.clone(),
            result_ref: self.result_ref.clone(),
            outcome: self.outcome,
            text: self.text.clone(),
            normalized_value: self.normalized_value(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ActionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = ActionWire::deserialize(deserializer)?;
        Ok(ActionRecord {
            kind: wire.kind,
            name: wire.name,
            args: wire.args,
            result_ref: wire.result_ref,
            outcome: wire.outcome,
            text: wire.text,
        })
    }
}

/// The seeker half of a turn, in the corpus markup layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeekerTurn {
    #[serde(rename = "type")]
    pub record_type: String,
    pub utterance: Utterance,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    /// Dialogue acts realized by the utterance.
    #[serde(default)]
    pub user_nlgs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partially_normalized_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fully_normalized_value: Option<String>,
}

impl SeekerTurn {
    pub fn new(utterance: Utterance, entities: Vec<EntityMention>, user_nlgs: Vec<String>) -> Self {
        SeekerTurn {
            record_type: "User_intent".to_string(),
            utterance,
            entities,
            user_nlgs,
            partially_normalized_value: None,
            fully_normalized_value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: SeekerTurn,
    pub actions: Vec<ActionRecord>,
}

impl Turn {
    pub fn tokens(&self) -> &[String] {
        &self.user.utterance.tokens
    }

    pub fn entities(&self) -> &[EntityMention] {
        &self.user.entities
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    /// Seeker template ids, one per turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
    /// Preferences the seeker taught in an earlier session, in the store
    /// before the first turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior: Vec<PriorCall>,
}

/// A setter call replayed into the store before a dialogue starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorCall {
    pub api: String,
    pub values: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub goal: crate::simulator::EntityTransferGraph,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub metadata: DialogueMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DialogueError {
    #[error("dialogue {0}: turn {1} does not end with a control action")]
    UnterminatedTurn(String, usize),
    #[error("dialogue {0}: final action is not {END_DIALOGUE}")]
    NotEnded(String),
    #[error("dialogue {0}: turn {1}: entity span {2}..{3} is out of bounds or overlapping")]
    BadSpan(String, usize, usize, usize),
    #[error("dialogue {0}: turn {1}: argument {2} of {3} references an unknown entity or result")]
    DanglingBinding(String, usize, String, String),
    #[error("dialogue {0}: turn {1}: wait_for_user_input must close a turn")]
    MisplacedControl(String, usize),
}

impl Dialogue {
    pub fn n_actions(&self) -> usize {
        self.turns.iter().map(|t| t.actions.len()).sum()
    }

    /// API action names in execution order.
    pub fn api_sequence(&self) -> Vec<&str> {
        self.turns
            .iter()
            .flat_map(|t| t.actions.iter())
            .filter(|a| a.kind == ActionKind::Api)
            .map(|a| a.name.as_str())
            .collect()
    }

    /// Looks up the seeker entity mention a binding points at.
    pub fn mention(&self, turn: usize, start: usize, end: usize) -> Option<&EntityMention> {
        self.turns
            .get(turn)?
            .user
            .entities
            .iter()
            .find(|m| m.start == start && m.end == end)
    }

    /// Checks turn structure, span bounds and binding provenance.
    pub fn validate(&self) -> Result<(), DialogueError> {
        let id = &self.id;
        let mut produced: Vec<&str> = Vec::new();
        for (ti, turn) in self.turns.iter().enumerate() {
            let n_tokens = turn.user.utterance.tokens.len();
            for (i, m) in turn.user.entities.iter().enumerate() {
                let overlapping = turn.user.entities[..i].iter().any(|o| o.overlaps(m));
                if m.start >= m.end || m.end > n_tokens || overlapping {
                    return Err(DialogueError::BadSpan(id.clone(), ti, m.start, m.end));
                }
            }
            match turn.actions.last() {
                Some(a) if a.is_control() => {}
                _ => return Err(DialogueError::UnterminatedTurn(id.clone(), ti)),
            }
            for (ai, action) in turn.actions.iter().enumerate() {
                if action.is_control() && ai + 1 != turn.actions.len() {
                    return Err(DialogueError::MisplacedControl(id.clone(), ti));
                }
                for (arg, binding) in &action.args {
                    let ok = match binding {
                        ArgumentBinding::SeekerEntity { turn: bt, start, end } => {
                            *bt <= ti && self.mention(*bt, *start, *end).is_some()
                        }
                        ArgumentBinding::ApiResult { result_ref } => produced.contains(&result_ref.as_str()),
                        ArgumentBinding::Constant { .. } => true,
                    };
                    if !ok {
                        return Err(DialogueError::DanglingBinding(id.clone(), ti, arg.clone(), action.name.clone()));
                    }
                }
                if let Some(r) = &action.result_ref {
                    produced.push(r);
                }
            }
        }
        let ended = self
            .turns
            .last()
            .and_then(|t| t.actions.last())
            .is_some_and(|a| a.name == END_DIALOGUE);
        if !ended {
            return Err(DialogueError::NotEnded(id.clone()));
        }
        Ok(())
    }
}
