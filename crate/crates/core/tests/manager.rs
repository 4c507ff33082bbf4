use pref_teach::domain::*;
use pref_teach::encoder::{Candidate, ContextState};
use pref_teach::kb::{run_effect, KbFilter, PreferenceBackend, PreferenceStore, ScratchKb, StoreUser};
use pref_teach::manager::*;
use pref_teach::nlu::{DialogueModel, GoldOracle};
use pref_teach::simulator::{seed_prior, Simulator, VariationConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> DomainSchema {
    DomainSchema::default_schema()
}

fn corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    let sim = Simulator::new(schema(), VariationConfig { error_injection_rate: 0.3, ..Default::default() }).unwrap();
    sim.generate(n, seed).unwrap()
}

/// Independent replay of the gold API calls, starting from the dialogue's
/// earlier-session preferences.
fn replay(s: &DomainSchema, d: &Dialogue) -> ScratchKb {
    let mut kb = ScratchKb { user_id: "u".into(), ..Default::default() };
    seed_prior(s, d, &mut kb).unwrap();
    for a in d.turns.iter().flat_map(|t| &t.actions).filter(|a| a.kind == ActionKind::Api) {
        let values = a
            .args
            .iter()
            .filter_map(|(k, b)| match b {
                ArgumentBinding::SeekerEntity { turn, start, end } => Some((k.clone(), d.mention(*turn, *start, *end)?.value.clone())),
                _ => None,
            })
            .collect();
        run_effect(&s.api(&a.name).unwrap().effect, &values, &mut kb).unwrap();
    }
    kb
}

fn drive(model: &dyn DialogueModel, d: &Dialogue, kb: &mut dyn PreferenceBackend) -> SessionState {
    let s = schema();
    let mut state = SessionState::open(d.id.clone(), "u");
    for t in &d.turns {
        handle_utterance(&mut state, &t.user.utterance.text, model, &s, kb, &ManagerConfig::default()).unwrap();
    }
    state
}

fn strip(actions: &[ActionRecord]) -> Vec<ActionRecord> {
    actions.iter().cloned().map(|mut a| {
        a.text = None;
        a
    }).collect()
}

#[test]
fn open_session_starts_empty() {
    let a = SessionState::new("alice");
    let b = SessionState::new("alice");
    assert_eq!(a.phase, Phase::AwaitUser);
    assert_eq!(a.context.past_actions().count(), 0);
    assert_ne!(a.session_id, b.session_id);

    let store = PreferenceStore::in_memory();
    let d = corpus(40, 3).into_iter().find(|d| d.goal.api_sequence() == ["setSportAffinity"]).unwrap();
    drive(&GoldOracle::new(d.clone(), &schema()), &d, &mut StoreUser { store: &store, user_id: "alice" });
    assert!(!store.retrieve_kb("alice", &KbFilter::default()).unwrap().is_empty());
    let fresh = SessionState::new("alice");
    assert!(fresh.context.turns.is_empty());
}

#[test]
fn gold_replay_reproduces_actions_and_kb_state() {
    let s = schema();
    for d in corpus(300, 5) {
        let oracle = GoldOracle::new(d.clone(), &s);
        let mut kb = ScratchKb { user_id: "u".into(), ..Default::default() };
        seed_prior(&s, &d, &mut kb).unwrap();
        let state = drive(&oracle, &d, &mut kb);
        let t = state.transcript();
        assert_eq!(t.turns.len(), d.turns.len());
        for (got, want) in t.turns.iter().zip(&d.turns) {
            assert_eq!(strip(&got.actions), strip(&want.actions), "{}", d.id);
            assert_eq!(got.user.entities, want.user.entities);
            for a in got.actions.iter().filter(|a| a.kind == ActionKind::Nlg) {
                assert!(a.text.as_deref().is_some_and(|t| !t.is_empty()));
            }
        }
        assert_eq!(kb.kb.retrieve(&KbFilter::default()), replay(&s, &d).kb.retrieve(&KbFilter::default()), "{}", d.id);
        let end = if d.turns.last().unwrap().actions.last().unwrap().name == END_DIALOGUE { Phase::Ended } else { Phase::AwaitUser };
        assert_eq!(state.phase, end);
    }
}

#[test]
fn transcript_is_a_valid_corpus_record() {
    let d = corpus(20, 8).remove(3);
    let state = drive(&GoldOracle::new(d.clone(), &schema()), &d, &mut ScratchKb::default());
    let t = state.transcript();
    t.validate().unwrap();
    let mut buf = Vec::new();
    write_corpus(&mut buf, &[t.clone()]).unwrap();
    assert_eq!(read_corpus(&buf[..]).unwrap(), vec![t]);
}

#[test]
fn delete_all_walkthrough_order() {
    let d = corpus(400, 9).into_iter().find(|d| d.goal.api_sequence() == ["deleteAllAffinityAction"]).unwrap();
    let s = schema();
    let oracle = GoldOracle::new(d.clone(), &s);
    let mut kb = ScratchKb::default();
    let mut state = SessionState::open("walk", "u");
    let cfg = ManagerConfig::default();
    let first = handle_utterance(&mut state, &d.turns[0].user.utterance.text, &oracle, &s, &mut kb, &cfg).unwrap();
    let names: Vec<&str> = first.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["getAllAffinityAction", "notify_getAllAffinityAction_success", WAIT_FOR_USER_INPUT]);
    let second = handle_utterance(&mut state, &d.turns[1].user.utterance.text, &oracle, &s, &mut kb, &cfg).unwrap();
    let names: Vec<&str> = second.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["deleteAllAffinityAction", "notify_deleteAllAffinityAction_success", END_DIALOGUE]);
    assert!(second[0].args.contains_key("confirmAction"));
    assert_eq!(state.phase, Phase::Ended);
    let err = handle_utterance(&mut state, "hello", &oracle, &s, &mut kb, &cfg).unwrap_err();
    assert!(matches!(err, ManagerError::NotAwaitingUser(Phase::Ended)));
}

#[test]
fn delete_all_without_confirmation_is_refused() {
    let s = schema();
    let mut state = SessionState::open("x", "u");
    state.context.push_turn(tokenize("forget everything"), vec![]);
    let mut action = ActionRecord::new(ActionKind::Api, "deleteAllAffinityAction");
    let err = execute_api(&s, &mut state, &mut action, &mut ScratchKb::default()).unwrap_err();
    assert!(matches!(err, ManagerError::Unconfirmed(_)));
    let mut action = ActionRecord::new(ActionKind::Api, "noSuchApi");
    assert!(matches!(execute_api(&s, &mut state, &mut action, &mut ScratchKb::default()), Err(ManagerError::UnknownApi(_))));
}

#[test]
fn get_all_on_empty_kb_and_read_after_write() {
    let s = schema();
    let mut kb = ScratchKb::default();
    let mut state = SessionState::open("x", "u");
    let toks = tokenize("i love the warriors");
    let m = EntityMention::from_tokens(&toks, 3, 4, "sport_team");
    state.context.push_turn(toks, vec![m]);
    let mut get = ActionRecord::new(ActionKind::Api, "getAllAffinityAction");
    execute_api(&s, &mut state, &mut get, &mut kb).unwrap();
    let h = get.result_ref.clone().unwrap();
    assert!(state.result(&h).unwrap().records.is_empty());
    let mut set = ActionRecord::new(ActionKind::Api, "setSportAffinity");
    set.args.insert("team".into(), ArgumentBinding::SeekerEntity { turn: 0, start: 3, end: 4 });
    assert_eq!(execute_api(&s, &mut state, &mut set, &mut kb).unwrap(), 1);
    let mut get = ActionRecord::new(ActionKind::Api, "getAllAffinityAction");
    execute_api(&s, &mut state, &mut get, &mut kb).unwrap();
    let recs = &state.result(get.result_ref.as_deref().unwrap()).unwrap().records;
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].entity_value, "warriors");
}

#[test]
fn teaching_then_reuse_across_sessions() {
    let s = schema();
    let ds = corpus(400, 13);
    let teach = ds.iter().find(|d| d.goal.api_sequence() == ["setSportAffinity"]).unwrap();
    let reuse = ds.iter().find(|d| d.goal.api_sequence() == ["getAllAffinityAction"]).unwrap();
    let store = PreferenceStore::in_memory();
    drive(&GoldOracle::new(teach.clone(), &s), teach, &mut StoreUser { store: &store, user_id: "bob" });
    let team = teach.turns[0].user.entities[0].value.clone();
    let state = drive(&GoldOracle::new(reuse.clone(), &s), reuse, &mut StoreUser { store: &store, user_id: "bob" });
    let api = state.context.turns[0].actions.iter().find(|a| a.kind == ActionKind::Api).unwrap();
    let recs = &state.result(api.result_ref.as_deref().unwrap()).unwrap().records;
    assert!(recs.iter().any(|r| r.entity_value == team), "{recs:?}");
    let notify = state.context.turns[0].actions.iter().find(|a| a.kind == ActionKind::Nlg).unwrap();
    assert!(notify.text.as_deref().unwrap().contains(&team));
}

/// Arbitrary but deterministic predictions, including SYS actions, low
/// confidence and unfillable arguments.
struct ChaosModel {
    seed: u64,
    actions: Vec<String>,
}

impl ChaosModel {
    fn rng(&self, state: &ContextState, salt: u64) -> ChaCha8Rng {
        let n = state.past_actions().count() as u64 + 31 * state.turns.len() as u64;
        ChaCha8Rng::seed_from_u64(self.seed ^ (n << 8) ^ salt)
    }
}

impl DialogueModel for ChaosModel {
    fn recognize(&self, tokens: &[String]) -> Vec<EntityMention> {
        if tokens.len() > 1 {
            vec![EntityMention::from_tokens(tokens, 0, 1, "sport_team")]
        } else {
            Vec::new()
        }
    }

    fn rank_actions(&self, state: &ContextState) -> Vec<(String, f64)> {
        let mut rng = self.rng(state, 1);
        let mut w: Vec<f64> = self.actions.iter().map(|_| rng.gen::<f64>().powi(4)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let mut out: Vec<(String, f64)> = self.actions.iter().cloned().zip(w).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    fn score_arguments(&self, state: &ContextState, _: &str, _: &str, arg_type: &str) -> Vec<(Candidate, f64)> {
        let mut rng = self.rng(state, 2);
        state.candidates(&schema()).into_iter().filter(|c| c.type_name == arg_type).map(|c| (c, rng.gen())).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn phase_machine_is_safe(seed in any::<u64>(), utterances in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,3}", 1..12)) {
        let s = schema();
        let model = ChaosModel { seed, actions: s.signatures().into_iter().map(|x| x.name).collect() };
        let mut kb = ScratchKb::default();
        let mut state = SessionState::open("p", "u");
        let cfg = ManagerConfig::default();
        for u in &utterances {
            let before = state.phase;
            let r = handle_utterance(&mut state, u, &model, &s, &mut kb, &cfg);
            match before {
                Phase::AwaitUser => {
                    let steps = r.unwrap();
                    prop_assert!(steps.len() <= cfg.max_agent_steps);
                    prop_assert!(matches!(state.phase, Phase::AwaitUser | Phase::Ended));
                    let last = steps.last().unwrap();
                    prop_assert_eq!(last.kind, ActionKind::Sys);
                    prop_assert_eq!(state.phase == Phase::Ended, last.name == END_DIALOGUE);
                    for st in &steps {
                        if st.kind == ActionKind::Nlg {
                            prop_assert!(st.text.as_deref().is_some_and(|t| !t.is_empty()));
                        }
                        if st.kind == ActionKind::Api && s.api(&st.name).unwrap().produces.is_some() {
                            prop_assert!(st.result_ref.is_some());
                        }
                    }
                }
                other => {
                    prop_assert!(r.is_err());
                    prop_assert_eq!(state.phase, other);
                }
            }
        }
        if state.phase == Phase::Ended {
            state.transcript().validate().unwrap();
        }
    }
}

#[test]
fn missing_argument_falls_back_to_a_request() {
    // A model that always wants setSportAffinity but never finds a team.
    struct Eager;
    impl DialogueModel for Eager {
        fn recognize(&self, _: &[String]) -> Vec<EntityMention> {
            Vec::new()
        }
        fn rank_actions(&self, _: &ContextState) -> Vec<(String, f64)> {
            vec![("setSportAffinity".into(), 0.9), (WAIT_FOR_USER_INPUT.into(), 0.1)]
        }
        fn score_arguments(&self, _: &ContextState, _: &str, _: &str, _: &str) -> Vec<(Candidate, f64)> {
            Vec::new()
        }
    }
    let s = schema();
    let mut state = SessionState::open("m", "u");
    let steps = handle_utterance(&mut state, "i like them", &Eager, &s, &mut ScratchKb::default(), &ManagerConfig::default()).unwrap();
    let names: Vec<&str> = steps.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["request_setSportAffinity_team", WAIT_FOR_USER_INPUT]);
    assert_eq!(state.phase, Phase::AwaitUser);

    struct Unsure;
    impl DialogueModel for Unsure {
        fn recognize(&self, _: &[String]) -> Vec<EntityMention> {
            Vec::new()
        }
        fn rank_actions(&self, _: &ContextState) -> Vec<(String, f64)> {
            vec![("goodbye".into(), 0.2)]
        }
        fn score_arguments(&self, _: &ContextState, _: &str, _: &str, _: &str) -> Vec<(Candidate, f64)> {
            Vec::new()
        }
    }
    let steps = handle_utterance(&mut state, "hmm", &Unsure, &s, &mut ScratchKb::default(), &ManagerConfig::default()).unwrap();
    let names: Vec<&str> = steps.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, [CLARIFY_GENERIC, WAIT_FOR_USER_INPUT]);
}
