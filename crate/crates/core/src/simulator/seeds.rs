use std::collections::{BTreeMap, BTreeSet};

use super::builder::DialogueBuilder;
use super::graph::{Edge, EntityTransferGraph, Vertex};
use super::nlg::Realized;
use super::SimError;
use crate::domain::{
    markup_segments, parse_seed_action, tokenize, ActionKind, ArgumentBinding, Dialogue, DialogueMetadata, DomainSchema,
    EntityMention, SeekerTemplate, Utterance, WAIT_FOR_USER_INPUT,
};

fn realize_markup(markup: &str) -> Result<Realized, String> {
    let mut text = String::new();
    let mut entities = Vec::new();
    let mut n_tokens = 0;
    for (surface, ty) in markup_segments(markup)? {
        let toks = tokenize(&surface);
        if let Some(ty) = ty {
            entities.push(EntityMention { start: n_tokens, end: n_tokens + toks.len(), entity_type: ty, value: toks.join(" ") });
        }
        n_tokens += toks.len();
        text.push_str(&surface);
    }
    Ok(Realized { utterance: Utterance::seeker(text), entities, template: String::new() })
}

/// Converts the schema's seed dialogues into annotated dialogues.
pub fn seed_dialogues(schema: &DomainSchema) -> Result<Vec<Dialogue>, SimError> {
    schema.seeds.iter().map(|seed| seed_dialogue(schema, seed)).collect()
}

fn seed_dialogue(schema: &DomainSchema, seed: &crate::domain::SeedDialogue) -> Result<Dialogue, SimError> {
    let err = |message: String| SimError::Seed { id: seed.id.clone(), message };
    let mut b = DialogueBuilder::new(schema);
    for turn in &seed.turns {
        let realized = realize_markup(&turn.user).map_err(err)?;
        b.user(realized, Vec::new());
        let ti = b.turns.len() - 1;
        for action in &turn.actions {
            let (name, explicit) = parse_seed_action(action).map_err(err)?;
            let mut bindings = BTreeMap::new();
            for (arg, idx) in explicit {
                let m = b.turns[ti].user.entities.get(idx).ok_or_else(|| err(format!("no mention #{idx}")))?;
                bindings.insert(arg, ArgumentBinding::SeekerEntity { turn: ti, start: m.start, end: m.end });
            }
            b.action(&name, &bindings).map_err(|e| err(e.to_string()))?;
        }
    }
    let turns = b.finish(&schema.provider_templates, |_| 0)?;
    let mut d = Dialogue { id: seed.id.clone(), goal: EntityTransferGraph::default(), turns, metadata: DialogueMetadata::default() };
    d.goal = goal_of(schema, &d);
    let acts = seed_acts(schema, &d);
    for (turn, act) in d.turns.iter_mut().zip(acts) {
        turn.user.user_nlgs = act.into_iter().collect();
    }
    d.validate().map_err(|e| err(e.to_string()))?;
    Ok(d)
}

/// Reconstructs the goal graph of an annotated dialogue: every API call
/// except those run as a preamble of the next API.
pub fn goal_of(schema: &DomainSchema, d: &Dialogue) -> EntityTransferGraph {
    let apis: Vec<&crate::domain::ActionRecord> =
        d.turns.iter().flat_map(|t| t.actions.iter()).filter(|a| a.kind == ActionKind::Api).collect();
    let mut g = EntityTransferGraph::default();
    let mut entity_vertex: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut result_vertex: BTreeMap<String, usize> = BTreeMap::new();
    for (i, a) in apis.iter().enumerate() {
        let is_preamble = apis
            .get(i + 1)
            .and_then(|next| schema.api(&next.name))
            .is_some_and(|next| next.preamble.as_deref() == Some(a.name.as_str()));
        if is_preamble {
            continue;
        }
        let mut edges = Vec::new();
        for (arg, binding) in &a.args {
            let from = match binding {
                ArgumentBinding::SeekerEntity { turn, start, end } => {
                    let Some(m) = d.mention(*turn, *start, *end) else { continue };
                    *entity_vertex.entry((*turn, *start, *end)).or_insert_with(|| {
                        g.add_vertex(Vertex::SeekerEntity { entity_type: m.entity_type.clone(), value: m.value.clone() })
                    })
                }
                ArgumentBinding::ApiResult { result_ref } => match result_vertex.get(result_ref) {
                    Some(v) => *v,
                    None => continue,
                },
                ArgumentBinding::Constant { .. } => continue,
            };
            edges.push((from, arg.clone()));
        }
        let v = g.add_vertex(Vertex::ApiCall { api: a.name.clone() });
        for (from, argument) in edges {
            g.edges.push(Edge { from, to: v, argument });
        }
        if let Some(r) = &a.result_ref {
            result_vertex.insert(r.clone(), v);
        }
    }
    g
}

/// Dialogue act of each seeker turn, inferred from the surrounding
/// provider actions.
fn seed_acts(schema: &DomainSchema, d: &Dialogue) -> Vec<Option<String>> {
    let confirmation = schema.confirmation_type();
    let mut out = Vec::new();
    for (ti, turn) in d.turns.iter().enumerate() {
        let prev = ti.checked_sub(1).and_then(|p| d.turns[p].actions.iter().rev().nth(1));
        let types: Vec<&str> = turn.user.entities.iter().map(|m| m.entity_type.as_str()).collect();
        let first = turn.actions.first();
        let act = if confirmation.is_some() && types == [confirmation.unwrap()] {
            Some("affirm".to_string())
        } else if let (Some(p), [ty]) = (prev, types.as_slice()) {
            let asked = is_argument_request(schema, &p.name) || p.name.ends_with("_failure");
            asked.then(|| format!("provide:{ty}"))
        } else if prev.is_some_and(|p| p.name.ends_with("_failure")) && types.is_empty() && first.is_some_and(|a| a.name == crate::domain::GOODBYE) {
            Some("decline".to_string())
        } else {
            None
        };
        let act = act.or_else(|| {
            let first = first?;
            match first.kind {
                ActionKind::Api => {
                    let ends_waiting = turn.actions.last().is_some_and(|a| a.name == WAIT_FOR_USER_INPUT);
                    let target = schema
                        .apis
                        .iter()
                        .find(|x| ends_waiting && x.preamble.as_deref() == Some(first.name.as_str()))
                        .map(|x| x.name.clone())
                        .unwrap_or_else(|| first.name.clone());
                    Some(inform_or_request(schema, &target, &types))
                }
                ActionKind::Nlg => {
                    if let Some(api) = first.name.strip_prefix("request_confirmation_") {
                        Some(inform_or_request(schema, api, &types))
                    } else if first.name == crate::domain::REQUEST_PREFERENCE {
                        Some("open_session".into())
                    } else if first.name == crate::domain::GOODBYE {
                        Some("close_session".into())
                    } else {
                        None
                    }
                }
                ActionKind::Sys => None,
            }
        });
        out.push(act);
    }
    out
}

fn is_argument_request(schema: &DomainSchema, name: &str) -> bool {
    schema.apis.iter().any(|api| api.seeker_arguments(schema).any(|a| name == format!("request_{}_{}", api.name, a.name)))
}

fn inform_or_request(schema: &DomainSchema, api: &str, types: &[&str]) -> String {
    let wanted = schema.api(api).map(|s| s.seeker_arguments(schema).count()).unwrap_or(0);
    if types.is_empty() && wanted > 0 {
        format!("request:{api}")
    } else {
        format!("inform:{api}")
    }
}

/// Seeker templates lifted from the seed dialogues: each mention is
/// replaced by its type slot. Turns mentioning one type twice are skipped.
pub fn seed_templates(schema: &DomainSchema, seeds: &[Dialogue]) -> Vec<SeekerTemplate> {
    let mut out = BTreeSet::new();
    for d in seeds {
        for turn in &d.turns {
            let Some(act) = turn.user.user_nlgs.first() else { continue };
            let types: BTreeSet<&str> = turn.user.entities.iter().map(|m| m.entity_type.as_str()).collect();
            if types.len() != turn.user.entities.len() {
                continue;
            }
            let tokens = &turn.user.utterance.tokens;
            let mut words = Vec::new();
            let mut i = 0;
            while i < tokens.len() {
                match turn.user.entities.iter().find(|m| m.start == i) {
                    Some(m) => {
                        words.push(format!("{{{}}}", m.entity_type));
                        i = m.end;
                    }
                    None => {
                        words.push(tokens[i].clone());
                        i += 1;
                    }
                }
            }
            let t = SeekerTemplate { act: act.clone(), text: words.join(" ") };
            let mut probe = schema.clone();
            probe.seeker_templates = vec![t.clone()];
            if probe.validate().is_ok() {
                out.insert(t);
            }
        }
    }
    out.into_iter().collect()
}
