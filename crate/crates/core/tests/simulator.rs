use std::collections::{BTreeMap, BTreeSet};

use pref_teach::domain::*;
use pref_teach::kb::{run_effect, KbFilter, ScratchKb};
use pref_teach::simulator::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schema() -> DomainSchema {
    DomainSchema::default_schema()
}

/// A dialogue carrying only a goal made of the given API calls.
fn seed_with(apis: &[&str]) -> Dialogue {
    let mut goal = EntityTransferGraph::default();
    for a in apis {
        goal.add_vertex(Vertex::ApiCall { api: a.to_string() });
    }
    Dialogue { id: "s".into(), goal, turns: Vec::new(), metadata: DialogueMetadata::default() }
}

fn restricted(apis: &[&str]) -> DomainSchema {
    let mut s = schema();
    s.apis.retain(|a| apis.contains(&a.name.as_str()));
    s.apis.sort_by_key(|a| apis.iter().position(|n| *n == a.name));
    s
}

#[test]
fn start_distribution_uses_add_one_smoothing() {
    let s = restricted(&["setSportAffinity", "getAllAffinityAction"]);
    let seeds = [
        seed_with(&["setSportAffinity"]),
        seed_with(&["setSportAffinity", "getAllAffinityAction"]),
        seed_with(&["getAllAffinityAction"]),
    ];
    let tm = estimate_transitions(&seeds, [1.0, 0.0, 0.0], &s).unwrap();
    assert!((tm.start_prob("setSportAffinity") - 0.6).abs() < 1e-12);
    assert!((tm.start_prob("getAllAffinityAction") - 0.4).abs() < 1e-12);
    assert!(tm.is_valid());
}

#[test]
fn single_seed_puts_most_mass_on_stop() {
    let s = schema();
    let n = s.apis.len() as f64;
    let tm = estimate_transitions(&[seed_with(&["setSportAffinity"])], [1.0, 0.0, 0.0], &s).unwrap();
    let row = &tm.rows[tm.api_index["setSportAffinity"]];
    let stop = row[tm.stop_index()];
    assert!((stop - 2.0 / (n + 2.0)).abs() < 1e-12);
    assert!(row[..tm.stop_index()].iter().all(|p| *p < stop));
}

#[test]
fn io_term_prefers_consumers_of_the_result() {
    let mut s = schema();
    let api = |json: serde_json::Value| -> ApiSpec { serde_json::from_value(json).unwrap() };
    s.apis = vec![
        api(serde_json::json!({"name": "A", "domain": "sports", "produces": "tokenT", "effect": {"op": "retrieve"}})),
        api(serde_json::json!({"name": "B", "domain": "sports", "arguments": [{"name": "x", "type": "tokenT", "required": true}], "effect": {"op": "retrieve"}})),
        api(serde_json::json!({"name": "C", "domain": "sports", "arguments": [{"name": "team", "type": "sport_team", "required": true}], "effect": {"op": "retrieve"}})),
    ];
    let tm = estimate_transitions(&[seed_with(&["A"])], [0.0, 0.0, 1.0], &s).unwrap();
    assert!(tm.prob("A", "B") > tm.prob("A", "C"));
    assert!(tm.prob("A", "B") > tm.prob("A", "A"));
    assert!(matches!(estimate_transitions(&[], [1.0, 0.0, 0.0], &s), Err(SimError::EmptySeeds)));
    assert!(matches!(
        estimate_transitions(&[seed_with(&["nope"])], [1.0, 0.0, 0.0], &s),
        Err(SimError::UnknownApi(_))
    ));
}

fn forcing(s: &DomainSchema, api: &str) -> TransitionMatrix {
    let apis: Vec<String> = s.apis.iter().map(|a| a.name.clone()).collect();
    let n = apis.len();
    let start = apis.iter().map(|a| if a == api { 1.0 } else { 0.0 }).collect();
    let rows = (0..n).map(|_| (0..=n).map(|j| if j == n { 1.0 } else { 0.0 }).collect()).collect();
    TransitionMatrix::from_parts(apis, start, rows)
}

#[test]
fn weather_goal_has_two_entities_feeding_one_call() {
    let s = schema();
    let tm = forcing(&s, "setWeatherProviderAffinity");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = sample_goal(&tm, &s, &GoalConfig::default(), &mut rng).unwrap();
    assert_eq!(g.api_sequence(), ["setWeatherProviderAffinity"]);
    assert_eq!(g.n_seeker_entities(), 2);
    assert_eq!(g.vertices.len(), 3);
    assert_eq!(g.edges.len(), 2);
    let types: BTreeSet<&str> = g
        .vertices
        .iter()
        .filter_map(|v| match v {
            Vertex::SeekerEntity { entity_type, .. } => Some(entity_type.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(types, BTreeSet::from(["weather_provider", "weather_condition"]));
    g.validate(&s).unwrap();
}

#[test]
fn no_transfer_means_one_entity_per_argument() {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig::default()).unwrap();
    let config = GoalConfig { transfer_prob: 0.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let g = sample_goal(&sim.tm, &s, &config, &mut rng).unwrap();
        let required: usize = g
            .api_sequence()
            .iter()
            .map(|a| s.api(a).unwrap().arguments.iter().filter(|x| x.required && s.is_entity_type(&x.arg_type)).count())
            .sum();
        assert_eq!(g.n_seeker_entities(), required);
    }
}

#[test]
fn empty_catalog_is_reported() {
    let mut s = schema();
    s.catalogs.iter_mut().find(|c| c.entity_type == "sport_team").unwrap().values.clear();
    let tm = forcing(&s, "setSportAffinity");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_goal(&tm, &s, &GoalConfig::default(), &mut rng), Err(SimError::NoCatalogValue(_))));
}

#[test]
fn first_api_frequencies_match_start_distribution() {
    let s = restricted(&["setSportAffinity", "getAllAffinityAction"]);
    let tm = TransitionMatrix::from_parts(
        vec!["setSportAffinity".into(), "getAllAffinityAction".into()],
        vec![0.7, 0.3],
        vec![vec![0.2, 0.3, 0.5], vec![0.4, 0.1, 0.5]],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1000;
    let mut first = 0;
    for _ in 0..n {
        let g = sample_goal(&tm, &s, &GoalConfig::default(), &mut rng).unwrap();
        first += usize::from(g.api_sequence()[0] == "setSportAffinity");
    }
    assert!((first as f64 / n as f64 - 0.7).abs() <= 0.05);
}

/// Goal graph of one API with its seeker values.
fn goal(s: &DomainSchema, api: &str, values: &[(&str, &str)]) -> EntityTransferGraph {
    let mut g = EntityTransferGraph::default();
    let mut sources = Vec::new();
    for (arg, value) in values {
        let ty = s.api(api).unwrap().arguments.iter().find(|a| a.name == *arg).unwrap().arg_type.clone();
        sources.push((g.add_vertex(Vertex::SeekerEntity { entity_type: ty, value: value.to_string() }), arg.to_string()));
    }
    let v = g.add_vertex(Vertex::ApiCall { api: api.into() });
    for (from, argument) in sources {
        g.edges.push(Edge { from, to: v, argument });
    }
    g
}

fn policies(s: &DomainSchema) -> (SeekerPolicy, ProviderPolicy) {
    (
        SeekerPolicy { bank: s.seeker_templates.clone(), seed_templates: Vec::new(), paraphrase_prob: 1.0 },
        ProviderPolicy { templates: s.provider_templates.clone(), sample_wording: false },
    )
}

fn trace(d: &Dialogue) -> Vec<Vec<String>> {
    d.turns.iter().map(|t| t.actions.iter().map(|a| a.name.clone()).collect()).collect()
}

#[test]
fn delete_all_follows_confirmation_trace() {
    let s = schema();
    let (seeker, provider) = policies(&s);
    let g = goal(&s, "deleteAllAffinityAction", &[("confirmAction", "yes")]);
    let variation = VariationConfig { error_injection_rate: 0.0, ..Default::default() };
    let d = run_interaction(&g, &seeker, &provider, &s, &variation, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(
        trace(&d),
        [
            vec!["getAllAffinityAction", "notify_getAllAffinityAction_success", WAIT_FOR_USER_INPUT],
            vec!["deleteAllAffinityAction", "notify_deleteAllAffinityAction_success", END_DIALOGUE],
        ]
    );
    let delete = &d.turns[1].actions[0];
    let ArgumentBinding::SeekerEntity { turn, start, end } = &delete.args["confirmAction"] else { panic!() };
    assert_eq!(d.mention(*turn, *start, *end).unwrap().entity_type, "confirmation");
}

#[test]
fn happy_path_is_one_turn() {
    let s = schema();
    let (seeker, provider) = policies(&s);
    let g = goal(&s, "setSportAffinity", &[("team", "Yankees")]);
    let variation = VariationConfig { error_injection_rate: 0.0, ..Default::default() };
    let d = run_interaction(&g, &seeker, &provider, &s, &variation, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(trace(&d), [vec!["setSportAffinity", "notify_setSportAffinity_success", END_DIALOGUE]]);
    assert_eq!(d.turns[0].user.entities[0].value, "yankees");
    assert!(d.turns[0].actions[1].text.as_deref().is_some_and(|t| t.contains("yankees")));
}

#[test]
fn withheld_entity_is_requested_then_supplied() {
    let s = schema();
    let (seeker, provider) = policies(&s);
    let g = goal(&s, "setSportAffinity", &[("team", "Warriors")]);
    let variation = VariationConfig { error_injection_rate: 1.0, withhold_share: 1.0, ..Default::default() };
    let d = run_interaction(&g, &seeker, &provider, &s, &variation, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(
        trace(&d),
        [
            vec!["request_setSportAffinity_team", WAIT_FOR_USER_INPUT],
            vec!["setSportAffinity", "notify_setSportAffinity_success", END_DIALOGUE],
        ]
    );
    assert!(d.turns[0].user.entities.is_empty());
    assert_eq!(d.turns[1].user.entities[0].value, "warriors");
}

#[test]
fn asking_before_setting_triggers_setup_prompt() {
    let s = schema();
    let (seeker, provider) = policies(&s);
    let g = goal(&s, "setSportAffinity", &[("team", "Cubs")]);
    let variation = VariationConfig { error_injection_rate: 1.0, withhold_share: 0.0, ..Default::default() };
    let d = run_interaction(&g, &seeker, &provider, &s, &variation, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(
        trace(&d),
        [
            vec!["getSportAffinity", "notify_getSportAffinity_failure", WAIT_FOR_USER_INPUT],
            vec!["setSportAffinity", "notify_setSportAffinity_success", END_DIALOGUE],
        ]
    );
    assert_eq!(d.turns[0].actions[0].outcome, Some(ApiOutcome::Empty));
}

fn corpus_bytes(n: usize, seed: u64) -> Vec<u8> {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig::default()).unwrap();
    let config = CorpusConfig { n_dialogues: n, variation: VariationConfig::default(), seed };
    let (dialogues, stats) = generate_corpus(&s, &config, &sim.tm).unwrap();
    assert_eq!(stats.n_dialogues, n);
    let mut out = Vec::new();
    write_corpus(&mut out, &dialogues).unwrap();
    out
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(corpus_bytes(1, 42), corpus_bytes(1, 42));
    assert_eq!(corpus_bytes(50, 7), corpus_bytes(50, 7));
    assert_ne!(corpus_bytes(50, 7), corpus_bytes(50, 8));
}

#[test]
fn parallel_matches_serial() {
    let sim = Simulator::new(schema(), VariationConfig::default()).unwrap();
    let all = sim.generate(64, 3).unwrap();
    for (i, d) in all.iter().enumerate() {
        assert_eq!(d, &sim.dialogue(3, i as u64).unwrap());
    }
}

#[test]
fn zero_dialogues_is_rejected() {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig::default()).unwrap();
    let config = CorpusConfig { n_dialogues: 0, variation: VariationConfig::default(), seed: 0 };
    assert!(generate_corpus(&s, &config, &sim.tm).is_err());
}

#[test]
fn schema_without_seeds_cannot_estimate() {
    let mut s = schema();
    s.seeds.clear();
    assert!(matches!(Simulator::new(s, VariationConfig::default()), Err(SimError::EmptySeeds)));
}

#[test]
fn mean_turns_stay_in_range() {
    let sim = Simulator::new(schema(), VariationConfig::default()).unwrap();
    let corpus = sim.generate(2000, 1).unwrap();
    let stats = CorpusStats::of(&corpus);
    let mean = stats.mean_turns();
    assert!((2.0..=6.0).contains(&mean), "mean turns {mean}");
    assert_eq!(stats.n_api, 12);
}

/// Independent reading of the goal's API semantics over a plain set of
/// (domain, type, value, condition) -> polarity.
fn interpret_goal(g: &EntityTransferGraph) -> BTreeMap<(String, String, String, Option<String>), Polarity> {
    let mut kb = BTreeMap::new();
    for v in g.api_vertices() {
        let Vertex::ApiCall { api } = &g.vertices[v] else { unreachable!() };
        let value_of = |arg: &str| match g.source(v, arg) {
            Some(Vertex::SeekerEntity { value, .. }) => normalize(value),
            other => panic!("{api}.{arg} fed by {other:?}"),
        };
        match api.as_str() {
            "setSportAffinity" => kb.insert(("sports".into(), "sport_team".into(), value_of("team"), None), Polarity::Like),
            "setSportDislike" => kb.insert(("sports".into(), "sport_team".into(), value_of("team"), None), Polarity::Dislike),
            "setDietOrCuisineAffinity" => {
                kb.insert(("restaurant".into(), "cuisine".into(), value_of("cuisine"), None), Polarity::Like)
            }
            "setDietOrCuisineDislike" => {
                kb.insert(("restaurant".into(), "cuisine".into(), value_of("cuisine"), None), Polarity::Dislike)
            }
            "setWeatherProviderAffinity" => kb.insert(
                ("weather_provider".into(), "weather_provider".into(), value_of("provider"), Some(value_of("condition"))),
                Polarity::Conditional,
            ),
            "deleteSportAffinity" => {
                let team = value_of("team");
                kb.retain(|k, _| !(k.0 == "sports" && k.2 == team));
                None
            }
            "deleteDietOrCuisineAffinity" => {
                let cuisine = value_of("cuisine");
                kb.retain(|k, _| !(k.0 == "restaurant" && k.2 == cuisine));
                None
            }
            "deleteAllAffinityAction" => {
                kb.clear();
                None
            }
            _ => None,
        };
    }
    kb
}

/// Executes a dialogue's API actions against a fresh store.
fn replay(s: &DomainSchema, d: &Dialogue) -> ScratchKb {
    let mut kb = ScratchKb { user_id: "u".into(), ..Default::default() };
    for a in d.turns.iter().flat_map(|t| &t.actions).filter(|a| a.kind == ActionKind::Api) {
        let values = a
            .args
            .iter()
            .filter_map(|(k, b)| match b {
                ArgumentBinding::SeekerEntity { turn, start, end } => {
                    Some((k.clone(), d.mention(*turn, *start, *end).unwrap().value.clone()))
                }
                _ => None,
            })
            .collect();
        run_effect(&s.api(&a.name).unwrap().effect, &values, &mut kb).unwrap();
    }
    kb
}

#[test]
fn replay_matches_goal_semantics() {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig { error_injection_rate: 0.3, ..Default::default() }).unwrap();
    for d in sim.generate(500, 21).unwrap() {
        let kb = replay(&s, &d);
        let got: BTreeMap<_, _> = kb
            .kb
            .retrieve(&KbFilter::default())
            .into_iter()
            .map(|r| ((r.domain, r.entity_type, r.entity_value, r.condition), r.polarity))
            .collect();
        assert_eq!(got, interpret_goal(&d.goal), "{}", d.id);
    }
}

#[test]
fn oos_split_is_disjoint() {
    let s = schema();
    let (train, eval) = split_out_of_sample(&s, 0.25, 1).unwrap();
    let train_t: BTreeSet<_> = train.seeker_templates.iter().collect();
    assert!(eval.seeker_templates.iter().all(|t| !train_t.contains(t)));
    assert_eq!(train.seeker_templates.len() + eval.seeker_templates.len(), s.seeker_templates.len());
    for (tc, ec) in train.catalogs.iter().zip(&eval.catalogs) {
        assert!(!ec.values.is_empty());
        assert!(ec.values.iter().all(|v| !tc.contains(v)), "{}", tc.entity_type);
    }
    assert!(eval.seeds.is_empty());
    train.validate().unwrap();
    eval.validate().unwrap();
    let sim = Simulator::new(train.clone(), VariationConfig::default()).unwrap();
    Simulator::with_transitions(eval, sim.tm.clone(), VariationConfig::default())
        .unwrap()
        .generate(50, 2)
        .unwrap();
}

#[test]
fn four_templates_hold_out_one() {
    let mut s = schema();
    let pinned: BTreeSet<SeekerTemplate> =
        seed_templates(&s, &seed_dialogues(&s).unwrap()).into_iter().collect();
    let mut kept: BTreeMap<String, usize> = BTreeMap::new();
    s.seeker_templates.retain(|t| {
        if pinned.contains(t) {
            return false;
        }
        let n = kept.entry(t.act.clone()).or_default();
        *n += 1;
        *n <= 4
    });
    let (_, eval) = split_out_of_sample(&s, 0.25, 3).unwrap();
    let mut per_act: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &eval.seeker_templates {
        *per_act.entry(t.act.as_str()).or_default() += 1;
    }
    assert_eq!(per_act.len(), kept.len());
    assert!(per_act.values().all(|n| *n == 1));
}

#[test]
fn held_out_catalog_contains_unseen_minor_league_teams() {
    let s = schema();
    let seen: BTreeSet<String> = seed_dialogues(&s)
        .unwrap()
        .iter()
        .flat_map(|d| d.turns.iter().flat_map(|t| t.user.entities.iter().map(|m| m.value.clone())))
        .collect();
    let (_, eval) = split_out_of_sample(&s, 0.5, 4).unwrap();
    let teams = eval.catalog("sport_team").unwrap();
    assert!(teams.values.iter().all(|v| !seen.contains(&normalize(v))));
    assert!(teams.values.len() >= 20);
}

#[test]
fn single_template_act_cannot_be_split() {
    let mut s = schema();
    let first = s.seeker_templates.iter().position(|t| t.act == "decline").unwrap();
    let keep = s.seeker_templates[first].clone();
    s.seeker_templates.retain(|t| t.act != "decline");
    s.seeker_templates.push(keep);
    assert!(matches!(split_out_of_sample(&s, 0.25, 0), Err(SimError::InsufficientTemplates { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_dialogues_are_well_formed(seed in any::<u64>(), index in 0u64..1000, rate in 0.0f64..=1.0) {
        let s = schema();
        let sim = Simulator::new(s.clone(), VariationConfig { error_injection_rate: rate, ..Default::default() }).unwrap();
        let d = sim.dialogue(seed, index).unwrap();
        d.validate().unwrap();
        d.goal.validate(&s).unwrap();
        prop_assert!(d.goal.is_acyclic());
        for turn in &d.turns {
            for a in &turn.actions {
                let sig = s.signature(&a.name).unwrap();
                prop_assert!(a.args.keys().all(|k| sig.argument(k).is_some()));
                if a.kind == ActionKind::Nlg {
                    prop_assert!(a.text.as_deref().is_some_and(|t| !t.is_empty()));
                }
            }
        }
        let json = serde_json::to_string(&d).unwrap();
        let back: Dialogue = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}

#[test]
fn bigram_frequencies_follow_the_chain() {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig::default()).unwrap();
    let tm = &sim.tm;
    let n = tm.apis.len();
    let mut counts = vec![vec![0usize; n + 1]; n];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = GoalConfig::default();
    for _ in 0..5000 {
        let g = sample_goal(tm, &s, &config, &mut rng).unwrap();
        let seq: Vec<usize> = g.api_sequence().iter().map(|a| tm.api_index[*a]).collect();
        for w in seq.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        if seq.len() < config.max_len {
            counts[*seq.last().unwrap()][n] += 1;
        }
    }
    let mut worst = 0.0f64;
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, c) in row.iter().enumerate() {
            let dev = (*c as f64 / total as f64 - tm.rows[i][j]).abs();
            worst = worst.max(dev);
        }
    }
    assert!(worst <= 0.05, "worst cell deviation {worst}");
}

#[test]
fn returning_seekers_start_with_stored_preferences() {
    let s = schema();
    let sim = Simulator::new(s.clone(), VariationConfig { returning_prob: 1.0, error_injection_rate: 0.0, ..Default::default() }).unwrap();
    let corpus = sim.generate(300, 3).unwrap();
    assert!(corpus.iter().all(|d| (1..=3).contains(&d.metadata.prior.len())));
    let mut opening_reads = 0;
    for d in &corpus {
        let first = &d.turns[0].actions[0];
        if first.name == "getAllAffinityAction" {
            assert_eq!(first.outcome, Some(ApiOutcome::Ok), "{}", d.id);
            opening_reads += 1;
        }
        let mut kb = ScratchKb { user_id: "u".into(), ..Default::default() };
        seed_prior(&s, d, &mut kb).unwrap();
        let stored = kb.kb.retrieve(&KbFilter::default());
        let expected: BTreeSet<String> = d.metadata.prior.iter().flat_map(|c| c.values.values()).map(|v| normalize(v)).collect();
        assert!(stored.iter().all(|r| expected.contains(&r.entity_value)));
        assert!(!stored.is_empty());
    }
    assert!(opening_reads > 0);
    let fresh = Simulator::new(s, VariationConfig { returning_prob: 0.0, ..Default::default() }).unwrap();
    assert!(fresh.generate(100, 3).unwrap().iter().all(|d| d.metadata.prior.is_empty()));
}
