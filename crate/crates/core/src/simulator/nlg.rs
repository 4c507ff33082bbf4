use std::collections::BTreeMap;

use rand::Rng;

use crate::domain::{template_slots, tokenize, EntityMention, ProviderTemplate, SeekerTemplate, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NlgError {
    #[error("no template for act `{0}`")]
    MissingTemplate(String),
    #[error("template `{template}` has no value for slot `{slot}`")]
    UnfilledSlot { template: String, slot: String },
}

/// A seeker utterance realized from a template, with its entity spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Realized {
    pub utterance: Utterance,
    pub entities: Vec<EntityMention>,
    pub template: String,
}

/// Fills every `{slot}` of `template` from `values` (keyed by slot name)
/// and annotates the resulting spans.
pub fn fill_template(template: &str, values: &BTreeMap<String, String>) -> Result<Realized, NlgError> {
    let mut text = String::new();
    let mut entities = Vec::new();
    let mut n_tokens = 0;
    let mut rest = template;
    for slot in template_slots(template) {
        let marker = format!("{{{slot}}}");
        let at = rest.find(&marker).expect("slot found by template_slots");
        let before = &rest[..at];
        text.push_str(before);
        n_tokens += tokenize(before).len();
        let value = values
            .get(&slot)
            .ok_or_else(|| NlgError::UnfilledSlot { template: template.to_string(), slot: slot.clone() })?;
        let value_tokens = tokenize(value);
        entities.push(EntityMention {
            start: n_tokens,
            end: n_tokens + value_tokens.len(),
            entity_type: slot.clone(),
            value: value_tokens.join(" "),
        });
        n_tokens += value_tokens.len();
        text.push_str(value);
        rest = &rest[at + marker.len()..];
    }
    text.push_str(rest);
    Ok(Realized { utterance: Utterance::seeker(text), entities, template: template.to_string() })
}

/// Picks a template for `act` uniformly and fills it.
pub fn realize_nlg<R: Rng + ?Sized>(
    act: &str,
    values: &BTreeMap<String, String>,
    bank: &[&SeekerTemplate],
    rng: &mut R,
) -> Result<Realized, NlgError> {
    let matching: Vec<&&SeekerTemplate> = bank.iter().filter(|t| t.act == act).collect();
    if matching.is_empty() {
        return Err(NlgError::MissingTemplate(act.to_string()));
    }
    let t = matching[rng.gen_range(0..matching.len())];
    fill_template(&t.text, values)
}

/// Provider templates for `act`, preferring the question form when the
/// agent hands the turn back right after.
pub fn provider_candidates<'a>(templates: &'a [ProviderTemplate], act: &str, ask: bool) -> Vec<&'a ProviderTemplate> {
    let all: Vec<&ProviderTemplate> = templates.iter().filter(|t| t.act == act).collect();
    let preferred: Vec<&ProviderTemplate> = all.iter().copied().filter(|t| t.ask == ask).collect();
    if preferred.is_empty() {
        all
    } else {
        preferred
    }
}

/// Renders a provider NLG act. `pick` chooses among the candidate
/// templates given their count.
pub fn render_provider(
    templates: &[ProviderTemplate],
    act: &str,
    ask: bool,
    slots: &BTreeMap<String, String>,
    pick: impl FnOnce(usize) -> usize,
) -> Result<String, NlgError> {
    let candidates = provider_candidates(templates, act, ask);
    if candidates.is_empty() {
        return Err(NlgError::MissingTemplate(act.to_string()));
    }
    let t = candidates[pick(candidates.len()).min(candidates.len() - 1)];
    Ok(fill_template(&t.text, slots)?.utterance.text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn values(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn direct_substitution_annotates_span() {
        let t = SeekerTemplate { act: "inform:setSportAffinity".into(), text: "I love {sport_team}".into() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = realize_nlg("inform:setSportAffinity", &values(&[("sport_team", "the yankees")]), &[&t], &mut rng).unwrap();
        assert_eq!(r.utterance.normalized(), "i love the yankees");
        assert_eq!(r.entities.len(), 1);
        assert_eq!((r.entities[0].start, r.entities[0].end), (2, 4));
        assert_eq!(r.entities[0].value, "the yankees");
    }

    #[test]
    fn matches_golden_surface_form() {
        let r = fill_template("add the {sport_team} to my favorites", &values(&[("sport_team", "Warriors")])).unwrap();
        assert_eq!(r.utterance.normalized(), tokenize("Add the Warriors to my favorites").join(" "));
    }

    #[test]
    fn missing_template_and_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(realize_nlg("affirm", &BTreeMap::new(), &[], &mut rng), Err(NlgError::MissingTemplate(_))));
        assert!(matches!(
            fill_template("i love {sport_team}", &BTreeMap::new()),
            Err(NlgError::UnfilledSlot { .. })
        ));
    }

    #[test]
    fn punctuation_next_to_slot() {
        let r = fill_template("{confirmation} , go for it", &values(&[("confirmation", "yes")])).unwrap();
        assert_eq!(r.utterance.tokens, ["yes", ",", "go", "for", "it"]);
        assert_eq!((r.entities[0].start, r.entities[0].end), (0, 1));
    }

    #[test]
    fn ask_variant_preferred() {
        let ts = vec![
            ProviderTemplate { act: "a".into(), text: "plain".into(), ask: false },
            ProviderTemplate { act: "a".into(), text: "question ?".into(), ask: true },
        ];
        assert_eq!(render_provider(&ts, "a", true, &BTreeMap::new(), |_| 0).unwrap(), "question ?");
        assert_eq!(render_provider(&ts, "a", false, &BTreeMap::new(), |_| 0).unwrap(), "plain");
    }
}
