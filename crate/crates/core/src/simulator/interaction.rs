use std::collections::BTreeMap;

use rand::Rng;

use super::builder::DialogueBuilder;
use super::graph::{EntityTransferGraph, Vertex};
use super::nlg::realize_nlg;
use super::{SimError, VariationConfig};
use crate::domain::{
    ApiOutcome, ApiSpec, Dialogue, DialogueMetadata, DomainSchema, KbEffect, PriorCall, ProviderTemplate, SeekerAct, SeekerTemplate,
    GOODBYE, REQUEST_MORE, REQUEST_PREFERENCE,
};

/// Seeker side: templates per dialogue act, drawn from the paraphrase bank
/// or, with probability `1 - paraphrase_prob`, from templates lifted off
/// the seed dialogues.
#[derive(Debug, Clone, Default)]
pub struct SeekerPolicy {
    pub bank: Vec<SeekerTemplate>,
    pub seed_templates: Vec<SeekerTemplate>,
    pub paraphrase_prob: f64,
}

impl SeekerPolicy {
    pub fn has_templates(&self, act: &SeekerAct) -> bool {
        let key = act.key();
        self.bank.iter().chain(&self.seed_templates).any(|t| t.act == key)
    }

    fn templates<R: Rng + ?Sized>(&self, act: &str, rng: &mut R) -> Vec<&SeekerTemplate> {
        let bank: Vec<&SeekerTemplate> = self.bank.iter().filter(|t| t.act == act).collect();
        let seeds: Vec<&SeekerTemplate> = self.seed_templates.iter().filter(|t| t.act == act).collect();
        match (bank.is_empty(), seeds.is_empty()) {
            (false, false) if rng.gen::<f64>() < self.paraphrase_prob => bank,
            (false, false) => seeds,
            (false, true) => bank,
            _ => seeds,
        }
    }
}

/// Provider side: the action sequence for each dialogue situation is
/// fixed by the schema (confirmations, preambles, setup offers); only the
/// NLG wording is sampled.
#[derive(Debug, Clone, Default)]
pub struct ProviderPolicy {
    pub templates: Vec<ProviderTemplate>,
    /// Sample NLG wording uniformly; otherwise always take the first.
    pub sample_wording: bool,
}

/// One goal API with the seeker values for its entity arguments.
#[derive(Debug, Clone)]
struct Task {
    api: String,
    values: BTreeMap<String, String>,
}

fn tasks_of(goal: &EntityTransferGraph) -> Vec<Task> {
    goal.api_vertices()
        .into_iter()
        .map(|v| {
            let Vertex::ApiCall { api } = &goal.vertices[v] else { unreachable!() };
            let values = goal
                .edges
                .iter()
                .filter(|e| e.to == v)
                .filter_map(|e| match &goal.vertices[e.from] {
                    Vertex::SeekerEntity { value, .. } => Some((e.argument.clone(), value.clone())),
                    _ => None,
                })
                .collect();
            Task { api: api.clone(), values }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Opening {
    Inform,
    Withhold,
    AskBeforeSet,
}

struct Run<'a, R: Rng + ?Sized> {
    schema: &'a DomainSchema,
    seeker: &'a SeekerPolicy,
    variation: &'a VariationConfig,
    rng: &'a mut R,
    b: DialogueBuilder<'a>,
    session: bool,
    templates: Vec<String>,
    events: Vec<String>,
}

impl<R: Rng + ?Sized> Run<'_, R> {
    fn say(&mut self, act: SeekerAct, slots: BTreeMap<String, String>) -> Result<(), SimError> {
        let key = act.key();
        let candidates = self.seeker.templates(&key, self.rng);
        let realized = realize_nlg(&key, &slots, &candidates, self.rng)?;
        self.templates.push(format!("{key}|{}", realized.template));
        self.b.user(realized, vec![key]);
        Ok(())
    }

    fn spec(&self, api: &str) -> Result<&ApiSpec, SimError> {
        self.schema.api(api).ok_or_else(|| SimError::UnknownApi(api.to_string()))
    }

    /// Seeker-supplied (arg name, entity type) pairs of `api`.
    fn seeker_args(&self, api: &str) -> Result<Vec<(String, String)>, SimError> {
        let spec = self.spec(api)?;
        Ok(spec.seeker_arguments(self.schema).map(|a| (a.name.clone(), a.arg_type.clone())).collect())
    }

    fn slots(&self, task: &Task, args: &[(String, String)]) -> Result<BTreeMap<String, String>, SimError> {
        args.iter()
            .map(|(name, ty)| {
                task.values
                    .get(name)
                    .map(|v| (ty.clone(), v.clone()))
                    .ok_or_else(|| SimError::Unbound { action: task.api.clone(), argument: name.clone() })
            })
            .collect()
    }

    /// Getter whose empty answer offers to run `api`, if the store is
    /// currently empty for it.
    fn empty_getter_for(&self, api: &str) -> Option<String> {
        self.schema.apis.iter().find_map(|g| {
            let domain = match &g.effect {
                KbEffect::Retrieve { domain } => domain.as_deref(),
                _ => return None,
            };
            (g.fails_when_empty && g.setup_api.as_deref() == Some(api) && self.b.kb_is_empty(domain))
                .then(|| g.name.clone())
        })
    }

    fn choose_opening(&mut self, task: &Task) -> Result<(Opening, Option<String>), SimError> {
        let can_withhold =
            !self.seeker_args(&task.api)?.is_empty() && self.seeker.has_templates(&SeekerAct::Request(task.api.clone()));
        let getter = self.empty_getter_for(&task.api);
        if !self.rng.gen_bool(self.variation.error_injection_rate) {
            return Ok((Opening::Inform, None));
        }
        Ok(match (can_withhold, getter) {
            (true, Some(g)) => {
                if self.rng.gen_bool(self.variation.withhold_share) {
                    (Opening::Withhold, None)
                } else {
                    (Opening::AskBeforeSet, Some(g))
                }
            }
            (true, None) => (Opening::Withhold, None),
            (false, Some(g)) => (Opening::AskBeforeSet, Some(g)),
            (false, None) => (Opening::Inform, None),
        })
    }

    fn close_task(&mut self) -> Result<(), SimError> {
        if self.session {
            self.b.nlg(REQUEST_MORE, &BTreeMap::new())?;
            self.b.wait();
        } else {
            self.b.end();
        }
        Ok(())
    }

    /// Requests each argument not yet mentioned, one turn at a time.
    fn collect(&mut self, task: &Task, mentioned: usize) -> Result<(), SimError> {
        let args = self.seeker_args(&task.api)?;
        for (name, ty) in args.iter().skip(mentioned) {
            self.b.nlg(&format!("request_{}_{}", task.api, name), &BTreeMap::new())?;
            self.b.wait();
            let value = task.values.get(name).cloned().ok_or_else(|| SimError::Unbound {
                action: task.api.clone(),
                argument: name.clone(),
            })?;
            self.say(SeekerAct::Provide(ty.clone()), BTreeMap::from([(ty.clone(), value)]))?;
        }
        Ok(())
    }

    /// Runs confirmation (when needed) and the API itself, then reports.
    /// Returns the number of goal tasks consumed.
    fn execute(&mut self, task: &Task, next: Option<&Task>) -> Result<usize, SimError> {
        let spec = self.spec(&task.api)?.clone();
        if let Some(confirm_arg) = &spec.confirmation_arg {
            match &spec.preamble {
                Some(p) => {
                    self.b.api(p, &BTreeMap::new())?;
                    self.b.nlg(&format!("notify_{p}_success"), &BTreeMap::new())?;
                }
                None => self.b.nlg(&format!("request_confirmation_{}", task.api), &BTreeMap::new())?,
            }
            self.b.wait();
            let ty = spec.arguments.iter().find(|a| &a.name == confirm_arg).map(|a| a.arg_type.clone()).unwrap_or_default();
            let value = task.values.get(confirm_arg).cloned().ok_or_else(|| SimError::Unbound {
                action: task.api.clone(),
                argument: confirm_arg.clone(),
            })?;
            self.say(SeekerAct::Affirm, BTreeMap::from([(ty, value)]))?;
        }
        let outcome = self.b.api(&task.api, &BTreeMap::new())?;
        if outcome == ApiOutcome::Empty && spec.fails_when_empty {
            self.events.push(format!("empty:{}", task.api));
            self.b.nlg(&format!("notify_{}_failure", task.api), &BTreeMap::new())?;
            self.b.wait();
            let setup = next.filter(|n| spec.setup_api.as_deref() == Some(n.api.as_str()));
            if let Some(setup) = setup {
                let args = self.seeker_args(&setup.api)?;
                if let Some((name, ty)) = args.first() {
                    let value = setup.values.get(name).cloned().unwrap_or_default();
                    self.say(SeekerAct::Provide(ty.clone()), BTreeMap::from([(ty.clone(), value)]))?;
                    self.collect(setup, 1)?;
                    return Ok(1 + self.execute(setup, None)?);
                }
            }
            // In a session the seeker just moves on to the next request.
            if !self.session {
                self.say(SeekerAct::Decline, BTreeMap::new())?;
                self.b.nlg(GOODBYE, &BTreeMap::new())?;
                self.b.end();
            }
            return Ok(1);
        }
        self.b.nlg(&format!("notify_{}_success", task.api), &BTreeMap::new())?;
        self.close_task()?;
        Ok(1)
    }

    fn task(&mut self, task: &Task, next: Option<&Task>) -> Result<usize, SimError> {
        let (opening, getter) = self.choose_opening(task)?;
        let args = self.seeker_args(&task.api)?;
        match opening {
            Opening::Inform => {
                let slots = self.slots(task, &args)?;
                self.say(SeekerAct::Inform(task.api.clone()), slots)?;
                self.execute(task, next)
            }
            Opening::Withhold => {
                self.events.push(format!("withhold:{}", task.api));
                self.say(SeekerAct::Request(task.api.clone()), BTreeMap::new())?;
                self.collect(task, 0)?;
                self.execute(task, next)
            }
            Opening::AskBeforeSet => {
                let getter = getter.expect("getter chosen with opening");
                self.events.push(format!("ask_before_set:{getter}"));
                self.say(SeekerAct::Inform(getter.clone()), BTreeMap::new())?;
                let outcome = self.b.api(&getter, &BTreeMap::new())?;
                debug_assert_eq!(outcome, ApiOutcome::Empty);
                self.b.nlg(&format!("notify_{getter}_failure"), &BTreeMap::new())?;
                self.b.wait();
                let (name, ty) = args.first().cloned().expect("setup api takes a seeker argument");
                let value = task.values.get(&name).cloned().unwrap_or_default();
                self.say(SeekerAct::Provide(ty.clone()), BTreeMap::from([(ty, value)]))?;
                self.collect(task, 1)?;
                self.execute(task, next)
            }
        }
    }
}

/// Plays one seeker-provider exchange for `goal`. Single-API goals are
/// handled directly; longer goals run as a session opened by the seeker
/// and closed with a goodbye.
pub fn run_interaction<R: Rng + ?Sized>(
    goal: &EntityTransferGraph,
    seeker: &SeekerPolicy,
    provider: &ProviderPolicy,
    schema: &DomainSchema,
    variation: &VariationConfig,
    rng: &mut R,
) -> Result<Dialogue, SimError> {
    goal.validate(schema)?;
    let tasks = tasks_of(goal);
    if tasks.is_empty() {
        return Err(SimError::Deadlock("goal has no API calls".into()));
    }
    let prior = if rng.gen_bool(variation.returning_prob) { sample_prior(schema, rng) } else { Vec::new() };
    let mut run = Run {
        schema,
        seeker,
        variation,
        rng,
        b: DialogueBuilder::new(schema),
        session: tasks.len() > 1,
        templates: Vec::new(),
        events: Vec::new(),
    };
    for call in &prior {
        run.b.prior(call)?;
    }
    if run.session {
        run.say(SeekerAct::OpenSession, BTreeMap::new())?;
        run.b.nlg(REQUEST_PREFERENCE, &BTreeMap::new())?;
        run.b.wait();
    }
    let mut i = 0;
    while i < tasks.len() {
        i += run.task(&tasks[i], tasks.get(i + 1))?;
    }
    if run.session {
        run.say(SeekerAct::CloseSession, BTreeMap::new())?;
        run.b.nlg(GOODBYE, &BTreeMap::new())?;
        run.b.end();
    }
    let Run { b, templates, events, rng, .. } = run;
    let turns = if provider.sample_wording {
        b.finish(&provider.templates, |n| rng.gen_range(0..n))?
    } else {
        b.finish(&provider.templates, |_| 0)?
    };
    let d = Dialogue {
        id: String::new(),
        goal: goal.clone(),
        turns,
        metadata: DialogueMetadata { seed: None, index: None, templates, events, prior },
    };
    d.validate().map_err(|e| SimError::Deadlock(e.to_string()))?;
    Ok(d)
}

/// One to three preferences from an earlier session, drawn from the
/// setter APIs and the catalogs.
fn sample_prior<R: Rng + ?Sized>(schema: &DomainSchema, rng: &mut R) -> Vec<PriorCall> {
    let setters: Vec<&ApiSpec> = schema
        .apis
        .iter()
        .filter(|a| matches!(a.effect, KbEffect::Upsert { .. }))
        .filter(|a| a.arguments.iter().all(|x| schema.catalog(&x.arg_type).is_some_and(|c| !c.values.is_empty())))
        .collect();
    if setters.is_empty() {
        return Vec::new();
    }
    (0..rng.gen_range(1..=3))
        .map(|_| {
            let api = setters[rng.gen_range(0..setters.len())];
            let values = api
                .arguments
                .iter()
                .map(|x| {
                    let values = &schema.catalog(&x.arg_type).expect("filtered above").values;
                    (x.name.clone(), values[rng.gen_range(0..values.len())].clone())
                })
                .collect();
            PriorCall { api: api.name.clone(), values }
        })
        .collect()
}

/// Puts a dialogue's earlier-session preferences into `kb`.
pub fn seed_prior(schema: &DomainSchema, d: &Dialogue, kb: &mut dyn crate::kb::PreferenceBackend) -> Result<(), SimError> {
    for call in &d.metadata.prior {
        let spec = schema.api(&call.api).ok_or_else(|| SimError::UnknownApi(call.api.clone()))?;
        crate::kb::run_effect(&spec.effect, &call.values, kb).map_err(|e| SimError::Execution(e.to_string()))?;
    }
    Ok(())
}
