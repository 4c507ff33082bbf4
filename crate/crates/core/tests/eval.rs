use pref_teach::domain::*;
use pref_teach::eval::fixture::{metric_fixture, ScriptedModel};
use pref_teach::eval::*;
use pref_teach::nlu::GoldOracle;
use pref_teach::simulator::{Simulator, VariationConfig};

fn schema() -> DomainSchema {
    DomainSchema::default_schema()
}

fn cells(r: &EvalReport) -> Vec<(usize, usize, usize, usize)> {
    r.rows.iter().map(|row| (row.per_turn.correct, row.per_turn.total, row.per_action.correct, row.per_action.total)).collect()
}

#[test]
fn fixture_is_well_formed() {
    let d = metric_fixture();
    d.validate().unwrap();
    assert_eq!(d.turns.len(), 2);
    assert_eq!(d.n_actions(), 5);
    assert!(annotation_gaps(&schema(), &[d]).is_empty());
}

#[test]
fn single_action_error_in_second_turn() {
    let s = schema();
    let mut m = ScriptedModel::new(metric_fixture(), &s);
    m.ap_misses.insert((1, 0));
    let r = evaluate(&m, &s, &[metric_fixture()]).unwrap();
    assert_eq!(r.rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ROWS);
    assert_eq!(r.row("AP").accuracy_per_action(), 4.0 / 5.0);
    assert_eq!(r.row("AP").accuracy_per_turn(), 1.0 / 2.0);
    assert_eq!(
        cells(&r),
        [(2, 2, 5, 5), (1, 2, 4, 5), (2, 2, 5, 5), (1, 2, 4, 5), (1, 2, 4, 5)],
    );
}

#[test]
fn mixed_error_placements() {
    let s = schema();
    let mut m = ScriptedModel::new(metric_fixture(), &s);
    m.ner_misses.insert(0);
    m.af_misses.insert((0, 1));
    m.ap_misses.insert((1, 1));
    let r = evaluate(&m, &s, &[metric_fixture()]).unwrap();
    // NER fails all three actions of turn 0; AF misses the notify; AP
    // misses the final end.
    assert_eq!(
        cells(&r),
        [(1, 2, 2, 5), (1, 2, 4, 5), (1, 2, 4, 5), (0, 2, 3, 5), (0, 2, 1, 5)],
    );
}

#[test]
fn argless_actions_count_as_filled() {
    let s = schema();
    let mut m = ScriptedModel::new(metric_fixture(), &s);
    m.af_misses.insert((1, 0));
    m.af_misses.insert((0, 2));
    let r = evaluate(&m, &s, &[metric_fixture()]).unwrap();
    assert_eq!(r.row("AF").per_action.correct, 5);
}

fn corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    Simulator::new(schema(), VariationConfig { error_injection_rate: 0.3, ..Default::default() }).unwrap().generate(n, seed).unwrap()
}

#[test]
fn gold_oracle_is_perfect_on_simulated_corpora() {
    let s = schema();
    let ds = corpus(120, 4);
    for d in &ds {
        let r = evaluate(&GoldOracle::new(d.clone(), &s), &s, std::slice::from_ref(d)).unwrap();
        for row in &r.rows {
            assert_eq!(row.per_turn.correct, row.per_turn.total, "{} {}", d.id, row.model);
            assert_eq!(row.per_action.correct, row.per_action.total, "{} {}", d.id, row.model);
        }
    }
}

#[test]
fn reports_are_pure_and_end_to_end_is_bounded() {
    let s = schema();
    let ds = corpus(60, 11);
    // One dialogue's oracle applied to others mispredicts freely.
    let m = GoldOracle::new(ds[0].clone(), &s);
    let a = evaluate(&m, &s, &ds).unwrap();
    let b = evaluate(&m, &s, &ds).unwrap();
    assert_eq!(a, b);
    let all = a.row("NER+AP+AF");
    for name in ["NER", "AP", "AF", "AP+AF"] {
        let r = a.row(name);
        assert!(all.per_turn.correct <= r.per_turn.correct);
        assert!(all.per_action.correct <= r.per_action.correct);
    }
    assert!(a.row("AP+AF").per_action.correct <= a.row("AP").per_action.correct);
    assert_eq!(a.stats, CorpusStats::of(&ds));
    assert_eq!(a.schema_fingerprint, s.fingerprint());
    assert!(a.table().lines().count() == 6);
}

#[test]
fn incomplete_annotations_are_rejected() {
    let s = schema();
    let mut d = metric_fixture();
    d.turns[0].actions[0].args.clear();
    match evaluate(&GoldOracle::new(d.clone(), &s), &s, &[d]) {
        Err(EvalError::AnnotationGap(ids)) => assert_eq!(ids, ["fixture"]),
        other => panic!("{other:?}"),
    }
    assert!(matches!(evaluate(&GoldOracle::new(metric_fixture(), &s), &s, &[]), Err(EvalError::Empty)));
}

#[test]
fn eval_sets_hold_out_material() {
    let s = schema();
    let cfg = EvalSetConfig { n_train: 300, n_in_sample: 50, n_out_of_sample: 50, ..Default::default() };
    let sets = build_eval_sets(&s, &cfg, 7).unwrap();
    assert_eq!((sets.train.len(), sets.in_sample.len(), sets.out_of_sample.len()), (300, 50, 50));
    let train_ids: std::collections::BTreeSet<_> = sets.train.iter().map(|d| (&d.metadata.seed, &d.metadata.index)).collect();
    assert!(sets.in_sample.iter().all(|d| !train_ids.contains(&(&d.metadata.seed, &d.metadata.index))));
    for (ty, cat) in s.catalog_index() {
        let held: Vec<&String> = cat.iter().filter(|v| !sets.train_schema.catalog(&ty).unwrap().contains(v)).collect();
        assert!(!held.is_empty(), "{ty}");
    }
    for d in &sets.out_of_sample {
        for m in d.turns.iter().flat_map(|t| t.entities()) {
            if let Some(c) = sets.train_schema.catalog(&m.entity_type) {
                assert!(!c.contains(&m.value), "{} leaked", m.value);
            }
        }
    }
    assert!(sets.unseen_entity_share() > 0.5);
    let again = build_eval_sets(&s, &cfg, 7).unwrap();
    assert_eq!(again.out_of_sample, sets.out_of_sample);
}

#[test]
fn ablation_differs_only_in_catalog_features() {
    let s = schema();
    let config = EvalSetConfig { n_train: 40, n_in_sample: 10, n_out_of_sample: 10, ..Default::default() };
    let sets = build_eval_sets(&s, &config, 3).unwrap();
    let mut train = pref_teach::nlu::TrainConfig { epochs: 1, ..Default::default() };
    train.network.encoder.dim = 8;
    train.network.ap_hidden = 8;
    train.network.af_hidden = 8;
    let a = ablate_catalog_features(&s, &sets, &train).unwrap();
    let (on, off) = (&a.bundles.0.train.network, &a.bundles.1.train.network);
    assert!(on.encoder.catalog_features && !off.encoder.catalog_features);
    assert_eq!(on.encoder.dim, off.encoder.dim);
    assert_eq!(a.with_cf.row("NER").per_turn.total, a.without_cf.row("NER").per_turn.total);
    let (turn, action) = a.ner_delta();
    assert!(turn.abs() <= 1.0 && action.abs() <= 1.0);
}
