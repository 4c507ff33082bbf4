//! Per-session action loop: recognize entities, predict the next action,
//! fill its arguments, execute APIs against the preference store and
//! render provider text until control returns to the user.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    tokenize, ActionKind, ActionRecord, ArgumentBinding, Dialogue, DialogueMetadata, DomainSchema, SeekerTurn, Turn, Utterance,
    CLARIFY_GENERIC, END_DIALOGUE, NOTIFY_CANCELLED, WAIT_FOR_USER_INPUT,
};
use crate::encoder::ContextState;
use crate::kb::{run_effect, ApiResult, PreferenceBackend};
use crate::nlu::{fill_arguments, DialogueModel};
use crate::simulator::{render_provider, EntityTransferGraph, NlgError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    /// Upper bound on agent steps per user turn, fallback prompt included.
    pub max_agent_steps: usize,
    /// Below this top-1 probability the manager asks for clarification.
    pub clarify_threshold: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig { max_agent_steps: 8, clarify_threshold: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitUser,
    AgentActing,
    Ended,
}

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error("session is {0:?}; it does not accept an utterance")]
    NotAwaitingUser(Phase),
    #[error("unknown API `{0}`")]
    UnknownApi(String),
    #[error("`{0}` is destructive and has no confirmation bound")]
    Unconfirmed(String),
    #[error("argument `{argument}` of `{action}` is unbound")]
    Unbound { action: String, argument: String },
    #[error("API execution failed: {0}")]
    Execution(String),
    #[error(transparent)]
    Nlg(#[from] NlgError),
}

/// One action taken by the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub kind: ActionKind,
    pub name: String,
    pub args: BTreeMap<String, ArgumentBinding>,
    pub result_ref: Option<String>,
    /// Top predictions with their probabilities, for diagnostics.
    pub n_best: Vec<(String, f64)>,
    /// Preference records written or removed by an API call.
    pub kb_changes: usize,
    pub text: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: String,
    pub user_id: String,
    pub context: ContextState,
    pub phase: Phase,
    utterances: Vec<String>,
    results: BTreeMap<String, ApiResult>,
    counters: BTreeMap<String, usize>,
}

impl SessionState {
    pub fn open(session_id: impl Into<String>, user_id: impl Into<String>) -> Self {
        SessionState {
            session_id: session_id.into(),
            user_id: user_id.into(),
            context: ContextState::default(),
            phase: Phase::AwaitUser,
            utterances: Vec::new(),
            results: BTreeMap::new(),
            counters: BTreeMap::new(),
        }
    }

    /// Opens a session under a fresh random id.
    pub fn new(user_id: impl Into<String>) -> Self {
        Self::open(format!("s-{:016x}", rand::random::<u64>()), user_id)
    }

    pub fn result(&self, handle: &str) -> Option<&ApiResult> {
        self.results.get(handle)
    }

    fn entity_value(&self, binding: &ArgumentBinding) -> Option<String> {
        match binding {
            ArgumentBinding::SeekerEntity { turn, start, end } => self
                .context
                .turns
                .get(*turn)?
                .entities
                .iter()
                .find(|m| m.start == *start && m.end == *end)
                .map(|m| m.value.clone()),
            ArgumentBinding::Constant { literal } => Some(literal.clone()),
            ArgumentBinding::ApiResult { .. } => None,
        }
    }

    fn slots(&self, args: &BTreeMap<String, ArgumentBinding>) -> BTreeMap<String, String> {
        let mut slots = BTreeMap::new();
        for (arg, binding) in args {
            match binding {
                ArgumentBinding::ApiResult { result_ref } => {
                    if let Some(r) = self.results.get(result_ref) {
                        slots.extend(r.slots());
                    }
                }
                other => {
                    if let Some(v) = self.entity_value(other) {
                        slots.insert(arg.clone(), v);
                    }
                }
            }
        }
        slots
    }

    /// The session so far as a corpus record.
    pub fn transcript(&self) -> Dialogue {
        let turns = self
            .context
            .turns
            .iter()
            .zip(&self.utterances)
            .map(|(t, text)| {
                let mut utterance = Utterance::seeker(text.clone());
                utterance.tokens = t.tokens.clone();
                Turn { user: SeekerTurn::new(utterance, t.entities.clone(), Vec::new()), actions: t.actions.clone() }
            })
            .collect();
        Dialogue { id: self.session_id.clone(), goal: EntityTransferGraph::default(), turns, metadata: DialogueMetadata::default() }
    }
}

/// Runs an API call with concrete argument values and stores its result
/// under a fresh handle. Returns the number of preference records changed.
pub fn execute_api(
    schema: &DomainSchema,
    state: &mut SessionState,
    action: &mut ActionRecord,
    kb: &mut dyn PreferenceBackend,
) -> Result<usize, ManagerError> {
    let spec = schema.api(&action.name).ok_or_else(|| ManagerError::UnknownApi(action.name.clone()))?;
    if let Some(c) = &spec.confirmation_arg {
        if !action.args.contains_key(c) {
            return Err(ManagerError::Unconfirmed(action.name.clone()));
        }
    }
    for arg in spec.arguments.iter().filter(|a| a.required) {
        if !action.args.contains_key(&arg.name) {
            return Err(ManagerError::Unbound { action: action.name.clone(), argument: arg.name.clone() });
        }
    }
    let values: BTreeMap<String, String> =
        action.args.iter().filter_map(|(k, b)| state.entity_value(b).map(|v| (k.clone(), v))).collect();
    let result = run_effect(&spec.effect, &values, kb).map_err(|e| ManagerError::Execution(e.to_string()))?;
    action.outcome = Some(result.outcome);
    let changes = result.applied;
    if let Some(ty) = &spec.produces {
        let n = state.counters.entry(ty.clone()).or_insert(0);
        *n += 1;
        let handle = format!("{ty}{n}");
        action.result_ref = Some(handle.clone());
        state.results.insert(handle, result);
    }
    Ok(changes)
}

/// Handles one seeker utterance and returns the agent's steps up to the
/// next wait or end.
pub fn handle_utterance(
    state: &mut SessionState,
    text: &str,
    model: &dyn DialogueModel,
    schema: &DomainSchema,
    kb: &mut dyn PreferenceBackend,
    config: &ManagerConfig,
) -> Result<Vec<AgentStep>, ManagerError> {
    if state.phase != Phase::AwaitUser {
        return Err(ManagerError::NotAwaitingUser(state.phase));
    }
    let tokens = tokenize(text);
    let entities = model.recognize(&tokens);
    state.context.push_turn(tokens, entities);
    state.utterances.push(text.to_string());
    state.phase = Phase::AgentActing;

    let mut steps: Vec<AgentStep> = Vec::new();
    let mut outcome = Ok(());
    // Two steps stay in reserve for the fallback prompt and wait.
    for _ in 0..config.max_agent_steps.saturating_sub(2) {
        let ranked = model.rank_actions(&state.context);
        let n_best: Vec<(String, f64)> = ranked.iter().take(3).cloned().collect();
        let Some((name, p)) = ranked.into_iter().next() else { break };
        if p < config.clarify_threshold {
            break;
        }
        match schema.action_kind(&name) {
            Some(ActionKind::Sys) => {
                push(state, &mut steps, ActionRecord::sys(&name), n_best, 0);
                state.phase = if name == END_DIALOGUE { Phase::Ended } else { Phase::AwaitUser };
                break;
            }
            Some(kind) => {
                let args = match fill_arguments(model, schema, &state.context, &name) {
                    Ok(a) => a,
                    Err(missing) => {
                        let fallback = missing_argument_act(schema, &name, &missing);
                        push(state, &mut steps, ActionRecord::new(ActionKind::Nlg, fallback), n_best, 0);
                        break;
                    }
                };
                let mut record = ActionRecord::new(kind, &name);
                record.args = args;
                let changes = if kind == ActionKind::Api {
                    match execute_api(schema, state, &mut record, kb) {
                        Ok(c) => c,
                        Err(e) => {
                            outcome = Err(e);
                            break;
                        }
                    }
                } else {
                    0
                };
                push(state, &mut steps, record, n_best, changes);
            }
            None => break,
        }
    }
    if state.phase == Phase::AgentActing {
        // Low confidence, a missing argument, a failed call or the step
        // limit: hand control back with a prompt.
        let last_is_nlg = steps.last().is_some_and(|s| s.kind == ActionKind::Nlg && s.name != CLARIFY_GENERIC);
        let failed_api = outcome.is_err();
        if !last_is_nlg || failed_api {
            push(state, &mut steps, ActionRecord::new(ActionKind::Nlg, CLARIFY_GENERIC), Vec::new(), 0);
        }
        push(state, &mut steps, ActionRecord::sys(WAIT_FOR_USER_INPUT), Vec::new(), 0);
        state.phase = Phase::AwaitUser;
    }
    render_texts(state, schema, &mut steps)?;
    outcome.map(|_| steps)
}

/// NLG act used when `arg` of `action` cannot be filled.
fn missing_argument_act(schema: &DomainSchema, action: &str, arg: &str) -> String {
    let is_confirmation = schema.api(action).is_some_and(|a| a.confirmation_arg.as_deref() == Some(arg));
    let request = format!("request_{action}_{arg}");
    if is_confirmation {
        NOTIFY_CANCELLED.to_string()
    } else if schema.signature(&request).is_some() {
        request
    } else {
        CLARIFY_GENERIC.to_string()
    }
}

fn push(state: &mut SessionState, steps: &mut Vec<AgentStep>, record: ActionRecord, n_best: Vec<(String, f64)>, kb_changes: usize) {
    steps.push(AgentStep {
        kind: record.kind,
        name: record.name.clone(),
        args: record.args.clone(),
        result_ref: record.result_ref.clone(),
        n_best,
        kb_changes,
        text: None,
    });
    state.context.push_action(record);
}

/// Renders NLG steps now that the following action is known: a prompt
/// followed by a wait uses the asking variant of its template.
fn render_texts(state: &mut SessionState, schema: &DomainSchema, steps: &mut [AgentStep]) -> Result<(), ManagerError> {
    let turn = state.context.current_index();
    let first = state.context.turns[turn].actions.len() - steps.len();
    for i in 0..steps.len() {
        if steps[i].kind != ActionKind::Nlg {
            continue;
        }
        let ask = steps.get(i + 1).is_some_and(|n| n.name == WAIT_FOR_USER_INPUT);
        let text = render_provider(&schema.provider_templates, &steps[i].name, ask, &state.slots(&steps[i].args), |_| 0)?;
        state.context.turns[turn].actions[first + i].text = Some(text.clone());
        steps[i].text = Some(text);
    }
    Ok(())
}
