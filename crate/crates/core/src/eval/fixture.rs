//! Hand-built corpus and a gold-replaying stub with chosen error
//! placements, for checking the metric arithmetic.

use std::collections::BTreeSet;

use crate::domain::{
    ActionKind, ActionRecord, ApiOutcome, ArgumentBinding, Dialogue, DialogueMetadata, DomainSchema, EntityMention, SeekerTurn, Turn,
    Utterance, END_DIALOGUE, GOODBYE, REQUEST_MORE, WAIT_FOR_USER_INPUT,
};
use crate::encoder::{Candidate, ContextState};
use crate::nlu::{DialogueModel, GoldOracle};
use crate::simulator::EntityTransferGraph;

/// Two turns and five actions: a sport affinity is taught and confirmed,
/// then the seeker says goodbye.
pub fn metric_fixture() -> Dialogue {
    let first = Utterance::seeker("i like the warriors");
    let team = EntityMention::from_tokens(&first.tokens, 3, 4, "sport_team");
    let mut set = ActionRecord::new(ActionKind::Api, "setSportAffinity");
    set.args.insert("team".into(), ArgumentBinding::SeekerEntity { turn: 0, start: 3, end: 4 });
    set.result_ref = Some("setSportPreferenceResult1".into());
    set.outcome = Some(ApiOutcome::Ok);
    let mut notify = ActionRecord::new(ActionKind::Nlg, "notify_setSportAffinity_success");
    notify
        .args
        .insert("setSportAffinityResult".into(), ArgumentBinding::ApiResult { result_ref: "setSportPreferenceResult1".into() });
    Dialogue {
        id: "fixture".into(),
        goal: EntityTransferGraph::default(),
        turns: vec![
            Turn {
                user: SeekerTurn::new(first, vec![team], Vec::new()),
                actions: vec![set, notify, ActionRecord::sys(WAIT_FOR_USER_INPUT)],
            },
            Turn {
                user: SeekerTurn::new(Utterance::seeker("that is all bye"), Vec::new(), Vec::new()),
                actions: vec![ActionRecord::new(ActionKind::Nlg, GOODBYE), ActionRecord::sys(END_DIALOGUE)],
            },
        ],
        metadata: DialogueMetadata::default(),
    }
}

/// Replays gold annotations except at the listed places: NER misses whole
/// turns, AP and AF miss `(turn, step)` positions.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    gold: GoldOracle,
    pub ner_misses: BTreeSet<usize>,
    pub ap_misses: BTreeSet<(usize, usize)>,
    pub af_misses: BTreeSet<(usize, usize)>,
}

impl ScriptedModel {
    pub fn new(dialogue: Dialogue, schema: &DomainSchema) -> Self {
        ScriptedModel { gold: GoldOracle::new(dialogue, schema), ner_misses: BTreeSet::new(), ap_misses: BTreeSet::new(), af_misses: BTreeSet::new() }
    }

    fn position(state: &ContextState) -> (usize, usize) {
        (state.current_index(), state.current().map_or(0, |t| t.actions.len()))
    }
}

impl DialogueModel for ScriptedModel {
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention> {
        let turn = self.gold.dialogue.turns.iter().position(|t| t.tokens() == tokens);
        match turn {
            Some(t) if self.ner_misses.contains(&t) => Vec::new(),
            _ => self.gold.recognize(tokens),
        }
    }

    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)> {
        let mut ranked = self.gold.rank_actions(state);
        if self.ap_misses.contains(&Self::position(state)) {
            let wrong = if ranked[0].0 == REQUEST_MORE { GOODBYE } else { REQUEST_MORE };
            let i = ranked.iter().position(|(n, _)| n == wrong).expect("schema action");
            ranked.swap(0, i);
            ranked[0].1 = 1.0;
            ranked[i].1 = 0.0;
        }
        ranked
    }

    fn score_arguments(&self, state: &ContextState, action: &str, arg: &str, arg_type: &str) -> Vec<(Candidate, f64)> {
        let scored = self.gold.score_arguments(state, action, arg, arg_type);
        if self.af_misses.contains(&Self::position(state)) {
            scored.into_iter().map(|(c, _)| (c, 0.0)).collect()
        } else {
            scored
        }
    }
}
