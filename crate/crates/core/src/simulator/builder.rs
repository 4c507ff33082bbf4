use std::collections::BTreeMap;

use super::nlg::{render_provider, Realized};
use super::SimError;
use crate::domain::{
    ActionKind, ActionRecord, ApiOutcome, ArgumentBinding, DomainSchema, PriorCall, ProviderTemplate, SeekerTurn, Turn, END_DIALOGUE, WAIT_FOR_USER_INPUT,
};
use crate::kb::{run_effect, ApiResult, ScratchKb};

/// Accumulates an annotated dialogue while executing its API calls
/// against a scratch store. Arguments default to the most recent
/// type-compatible mention or result.
pub(crate) struct DialogueBuilder<'a> {
    schema: &'a DomainSchema,
    pub turns: Vec<Turn>,
    kb: ScratchKb,
    counters: BTreeMap<String, usize>,
    results: Vec<(String, String)>,
    result_data: BTreeMap<String, ApiResult>,
}

impl<'a> DialogueBuilder<'a> {
    pub fn new(schema: &'a DomainSchema) -> Self {
        DialogueBuilder {
            schema,
            turns: Vec::new(),
            kb: ScratchKb { user_id: "simulated".into(), ..Default::default() },
            counters: BTreeMap::new(),
            results: Vec::new(),
            result_data: BTreeMap::new(),
        }
    }

    pub fn user(&mut self, realized: Realized, acts: Vec<String>) {
        let mut turn = SeekerTurn::new(realized.utterance, realized.entities, acts);
        if !turn.entities.is_empty() {
            let marks: Vec<String> = turn.entities.iter().map(|m| format!("[{}|{}]", m.value, m.entity_type)).collect();
            turn.partially_normalized_value = Some(marks.join(" "));
        }
        self.turns.push(Turn { user: turn, actions: Vec::new() });
    }

    pub fn kb_is_empty(&self, domain: Option<&str>) -> bool {
        let filter = crate::kb::KbFilter { domain: domain.map(str::to_string), entity_type: None };
        self.kb.kb.retrieve(&filter).is_empty()
    }

    pub fn bind_entity(&self, entity_type: &str) -> Option<ArgumentBinding> {
        for (ti, turn) in self.turns.iter().enumerate().rev() {
            if let Some(m) = turn.user.entities.iter().rev().find(|m| m.entity_type == entity_type) {
                return Some(ArgumentBinding::SeekerEntity { turn: ti, start: m.start, end: m.end });
            }
        }
        None
    }

    pub fn bind_result(&self, result_type: &str) -> Option<ArgumentBinding> {
        self.results
            .iter()
            .rev()
            .find(|(_, ty)| ty == result_type)
            .map(|(h, _)| ArgumentBinding::ApiResult { result_ref: h.clone() })
    }

    fn entity_value(&self, binding: &ArgumentBinding) -> Option<String> {
        match binding {
            ArgumentBinding::SeekerEntity { turn, start, end } => self.turns[*turn]
                .user
                .entities
                .iter()
                .find(|m| m.start == *start && m.end == *end)
                .map(|m| m.value.clone()),
            ArgumentBinding::Constant { literal } => Some(literal.clone()),
            ArgumentBinding::ApiResult { .. } => None,
        }
    }

    fn bind_all(
        &self,
        name: &str,
        explicit: &BTreeMap<String, ArgumentBinding>,
    ) -> Result<BTreeMap<String, ArgumentBinding>, SimError> {
        let sig = self.schema.signature(name).ok_or_else(|| SimError::UnknownApi(name.to_string()))?;
        let mut args = BTreeMap::new();
        for arg in &sig.arguments {
            let binding = match explicit.get(&arg.name) {
                Some(b) => Some(b.clone()),
                None if self.schema.is_entity_type(&arg.arg_type) => self.bind_entity(&arg.arg_type),
                None => self.bind_result(&arg.arg_type),
            };
            match binding {
                Some(b) => {
                    args.insert(arg.name.clone(), b);
                }
                None if arg.required => {
                    return Err(SimError::Unbound { action: name.to_string(), argument: arg.name.clone() })
                }
                None => {}
            }
        }
        Ok(args)
    }

    fn push(&mut self, record: ActionRecord) {
        self.turns.last_mut().expect("a seeker turn precedes provider actions").actions.push(record);
    }

    pub fn api(&mut self, name: &str, explicit: &BTreeMap<String, ArgumentBinding>) -> Result<ApiOutcome, SimError> {
        let spec = self.schema.api(name).ok_or_else(|| SimError::UnknownApi(name.to_string()))?.clone();
        let args = self.bind_all(name, explicit)?;
        let values: BTreeMap<String, String> =
            args.iter().filter_map(|(k, b)| self.entity_value(b).map(|v| (k.clone(), v))).collect();
        let result = run_effect(&spec.effect, &values, &mut self.kb).map_err(|e| SimError::Execution(e.to_string()))?;
        let mut record = ActionRecord::new(ActionKind::Api, name);
        record.args = args;
        record.outcome = Some(result.outcome);
        if let Some(ty) = &spec.produces {
            let n = self.counters.entry(ty.clone()).or_insert(0);
            *n += 1;
            let handle = format!("{ty}{n}");
            self.results.push((handle.clone(), ty.clone()));
            record.result_ref = Some(handle.clone());
            self.result_data.insert(handle, result.clone());
        }
        let outcome = result.outcome;
        self.push(record);
        Ok(outcome)
    }

    /// Applies a call from an earlier session without recording it.
    pub fn prior(&mut self, call: &PriorCall) -> Result<(), SimError> {
        let spec = self.schema.api(&call.api).ok_or_else(|| SimError::UnknownApi(call.api.clone()))?;
        run_effect(&spec.effect, &call.values, &mut self.kb).map_err(|e| SimError::Execution(e.to_string()))?;
        Ok(())
    }

    pub fn nlg(&mut self, name: &str, explicit: &BTreeMap<String, ArgumentBinding>) -> Result<(), SimError> {
        let mut record = ActionRecord::new(ActionKind::Nlg, name);
        record.args = self.bind_all(name, explicit)?;
        self.push(record);
        Ok(())
    }

    pub fn sys(&mut self, name: &str) {
        self.push(ActionRecord::sys(name));
    }

    pub fn wait(&mut self) {
        self.sys(WAIT_FOR_USER_INPUT);
    }

    pub fn end(&mut self) {
        self.sys(END_DIALOGUE);
    }

    /// Any action by name, dispatched on its kind.
    pub fn action(&mut self, name: &str, explicit: &BTreeMap<String, ArgumentBinding>) -> Result<(), SimError> {
        match self.schema.action_kind(name) {
            Some(ActionKind::Api) => self.api(name, explicit).map(|_| ()),
            Some(ActionKind::Nlg) => self.nlg(name, explicit),
            Some(ActionKind::Sys) => {
                self.sys(name);
                Ok(())
            }
            None => Err(SimError::UnknownApi(name.to_string())),
        }
    }

    /// Slot values for rendering an NLG record.
    pub fn nlg_slots(&self, record: &ActionRecord) -> BTreeMap<String, String> {
        let mut slots = BTreeMap::new();
        for (arg, binding) in &record.args {
            match binding {
                ArgumentBinding::ApiResult { result_ref } => {
                    if let Some(r) = self.result_data.get(result_ref) {
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

    /// Renders every NLG action's text and returns the turns.
    pub fn finish(
        mut self,
        templates: &[ProviderTemplate],
        mut pick: impl FnMut(usize) -> usize,
    ) -> Result<Vec<Turn>, SimError> {
        let mut rendered = Vec::new();
        for (ti, turn) in self.turns.iter().enumerate() {
            for (ai, a) in turn.actions.iter().enumerate() {
                if a.kind != ActionKind::Nlg {
                    continue;
                }
                let ask = turn.actions.get(ai + 1).is_some_and(|n| n.name == WAIT_FOR_USER_INPUT);
                let text = render_provider(templates, &a.name, ask, &self.nlg_slots(a), &mut pick)?;
                rendered.push((ti, ai, text));
            }
        }
        for (ti, ai, text) in rendered {
            self.turns[ti].actions[ai].text = Some(text);
        }
        Ok(self.turns)
    }
}
