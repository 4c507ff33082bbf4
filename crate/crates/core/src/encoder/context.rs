use crate::domain::{ActionKind, ActionRecord, ApiOutcome, ArgumentBinding, Dialogue, DomainSchema, EntityMention};

/// One seeker utterance with its recognized entities and the provider
/// actions taken after it so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnContext {
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub actions: Vec<ActionRecord>,
}

/// Dialogue history as seen by the models. The last turn is the current one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextState {
    pub turns: Vec<TurnContext>,
}

/// A value an argument may be bound to.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub binding: ArgumentBinding,
    pub type_name: String,
    /// Surface tokens for seeker entities; empty for API results.
    pub tokens: Vec<String>,
    /// 0 for the most recent candidate of its type, 1 for the next, and so on.
    pub recency: usize,
}

impl ContextState {
    /// Gold history up to turn `turn`, with the first `step` provider
    /// actions of that turn already taken.
    pub fn teacher_forced(d: &Dialogue, turn: usize, step: usize) -> Self {
        let mut turns: Vec<TurnContext> = d.turns[..=turn]
            .iter()
            .map(|t| TurnContext { tokens: t.tokens().to_vec(), entities: t.entities().to_vec(), actions: t.actions.clone() })
            .collect();
        turns[turn].actions.truncate(step);
        ContextState { turns }
    }

    pub fn push_turn(&mut self, tokens: Vec<String>, entities: Vec<EntityMention>) {
        self.turns.push(TurnContext { tokens, entities, actions: Vec::new() });
    }

    pub fn push_action(&mut self, action: ActionRecord) {
        if let Some(t) = self.turns.last_mut() {
            t.actions.push(action);
        }
    }

    pub fn current(&self) -> Option<&TurnContext> {
        self.turns.last()
    }

    pub fn current_index(&self) -> usize {
        self.turns.len().saturating_sub(1)
    }

    /// Past actions with their age in turns (0 for the current turn).
    pub fn past_actions(&self) -> impl Iterator<Item = (&ActionRecord, usize)> {
        let last = self.current_index();
        self.turns.iter().enumerate().flat_map(move |(i, t)| t.actions.iter().map(move |a| (a, last - i)))
    }

    /// Seeker entities and API results available for binding, oldest first.
    pub fn candidates(&self, schema: &DomainSchema) -> Vec<Candidate> {
        let mut out = Vec::new();
        for (turn, t) in self.turns.iter().enumerate() {
            for m in &t.entities {
                out.push(Candidate {
                    binding: ArgumentBinding::SeekerEntity { turn, start: m.start, end: m.end },
                    type_name: m.entity_type.clone(),
                    tokens: t.tokens.get(m.start..m.end).map(|s| s.to_vec()).unwrap_or_default(),
                    recency: 0,
                });
            }
            for a in &t.actions {
                if a.kind != ActionKind::Api {
                    continue;
                }
                let (Some(result_ref), Some(ty)) = (&a.result_ref, schema.api(&a.name).and_then(|s| s.produces.clone())) else {
                    continue;
                };
                out.push(Candidate {
                    binding: ArgumentBinding::ApiResult { result_ref: result_ref.clone() },
                    type_name: ty,
                    tokens: Vec::new(),
                    recency: 0,
                });
            }
        }
        let mut seen: std::collections::HashMap<String, usize> = Default::default();
        for c in out.iter_mut().rev() {
            let n = seen.entry(c.type_name.clone()).or_default();
            c.recency = *n;
            *n += 1;
        }
        out
    }

    /// Outcome of the API call that produced `result_ref`, if any.
    pub fn outcome_of(&self, result_ref: &str) -> Option<ApiOutcome> {
        self.turns
            .iter()
            .flat_map(|t| &t.actions)
            .find(|a| a.result_ref.as_deref() == Some(result_ref))
            .and_then(|a| a.outcome)
    }
}
