//! Teacher-forced evaluation of the recognizers, evaluation-set
//! construction and the catalog-feature ablation.

pub mod fixture;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{normalize, CorpusStats, Dialogue, DomainSchema, EntityMention};
use crate::encoder::ContextState;
use crate::nlu::{fill_arguments, train, DialogueModel, ModelBundle, NluError, NluModel, TrainConfig};
use crate::simulator::{estimate_transitions, seed_dialogues, split_out_of_sample, SimError, Simulator, VariationConfig};

pub const ROWS: [&str; 5] = ["NER", "AP", "AF", "AP+AF", "NER+AP+AF"];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dialogues with incomplete annotations: {}", .0.join(", "))]
    AnnotationGap(Vec<String>),
    #[error("empty evaluation corpus")]
    Empty,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nlu(#[from] NluError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn record(&mut self, ok: bool) {
        self.correct += ok as usize;
        self.total += 1;
    }

    fn add(&mut self, o: &Tally) {
        self.correct += o.correct;
        self.total += o.total;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub per_turn: Tally,
    pub per_action: Tally,
}

impl EvalRow {
    pub fn accuracy_per_turn(&self) -> f64 {
        self.per_turn.accuracy()
    }

    pub fn accuracy_per_action(&self) -> f64 {
        self.per_action.accuracy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub stats: CorpusStats,
    pub schema_fingerprint: String,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> &EvalRow {
        self.rows.iter().find(|r| r.model == model).expect("known row")
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>14} {:>16}\n", "model", "ACC per-turn", "ACC per-action");
        for r in &self.rows {
            s += &format!("{:<12} {:>13.2}% {:>15.2}%\n", r.model, 100.0 * r.accuracy_per_turn(), 100.0 * r.accuracy_per_action());
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

#[derive(Default)]
struct Counts([(Tally, Tally); 5]);

impl Counts {
    fn add(&mut self, o: &Counts) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            a.0.add(&b.0);
            a.1.add(&b.1);
        }
    }
}

fn same_mentions(a: &[EntityMention], b: &[EntityMention]) -> bool {
    let key = |m: &EntityMention| (m.start, m.end, m.entity_type.clone());
    a.iter().map(key).collect::<BTreeSet<_>>() == b.iter().map(key).collect::<BTreeSet<_>>()
}

/// Dialogues whose actions miss a required argument binding.
pub fn annotation_gaps(schema: &DomainSchema, dialogues: &[Dialogue]) -> Vec<String> {
    let sigs: BTreeMap<String, _> = schema.signatures().into_iter().map(|s| (s.name.clone(), s)).collect();
    dialogues
        .iter()
        .filter(|d| {
            d.turns.iter().flat_map(|t| &t.actions).any(|a| match sigs.get(&a.name) {
                None => true,
                Some(s) => s.arguments.iter().any(|arg| arg.required && !a.args.contains_key(&arg.name)),
            })
        })
        .map(|d| d.id.clone())
        .collect()
}

fn evaluate_dialogue(model: &dyn DialogueModel, schema: &DomainSchema, d: &Dialogue) -> Counts {
    let mut c = Counts::default();
    for (t, turn) in d.turns.iter().enumerate() {
        let ner_ok = same_mentions(&model.recognize(turn.tokens()), turn.entities());
        let mut turn_ok = [ner_ok, true, true, true, ner_ok];
        let mut state = ContextState::teacher_forced(d, t, 0);
        for gold in &turn.actions {
            let ap_ok = model.rank_actions(&state).first().is_some_and(|(name, _)| name == &gold.name);
            let af_ok = match fill_arguments(model, schema, &state, &gold.name) {
                Ok(args) => args == gold.args,
                Err(_) => false,
            };
            let step = [ner_ok, ap_ok, af_ok, ap_ok && af_ok, ner_ok && ap_ok && af_ok];
            for (i, ok) in step.iter().enumerate() {
                c.0[i].1.record(*ok);
                turn_ok[i] &= ok;
            }
            state.push_action(gold.clone());
        }
        for (i, ok) in turn_ok.iter().enumerate() {
            c.0[i].0.record(*ok);
        }
    }
    c
}

/// Teacher-forced evaluation. A turn counts as correct for a row when all
/// of that row's predictions in the turn are correct; NER is judged once
/// per turn and shared by the turn's actions.
pub fn evaluate(model: &dyn DialogueModel, schema: &DomainSchema, dialogues: &[Dialogue]) -> Result<EvalReport, EvalError> {
    if dialogues.is_empty() {
        return Err(EvalError::Empty);
    }
    let gaps = annotation_gaps(schema, dialogues);
    if !gaps.is_empty() {
        return Err(EvalError::AnnotationGap(gaps));
    }
    let parts: Vec<Counts> = dialogues.par_iter().map(|d| evaluate_dialogue(model, schema, d)).collect();
    let mut total = Counts::default();
    parts.iter().for_each(|p| total.add(p));
    Ok(EvalReport {
        rows: ROWS
            .iter()
            .zip(total.0)
            .map(|(name, (per_turn, per_action))| EvalRow { model: name.to_string(), per_turn, per_action })
            .collect(),
        stats: CorpusStats::of(dialogues),
        schema_fingerprint: schema.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSetConfig {
    pub n_train: usize,
    pub n_in_sample: usize,
    pub n_out_of_sample: usize,
    /// Share of paraphrase templates and catalog values held out.
    pub held_out_fraction: f64,
    pub variation: VariationConfig,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        EvalSetConfig { n_train: 2000, n_in_sample: 200, n_out_of_sample: 200, held_out_fraction: 0.3, variation: VariationConfig::default() }
    }
}

impl EvalSetConfig {
    /// Corpus sizes of the original large-scale setup.
    pub fn full_scale() -> Self {
        EvalSetConfig { n_train: 50_000, n_in_sample: 500, n_out_of_sample: 500, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct EvalSets {
    /// Schema with held-out material removed; training draws from it.
    pub train_schema: DomainSchema,
    /// Schema restricted to held-out templates and catalog values.
    pub out_of_sample_schema: DomainSchema,
    pub train: Vec<Dialogue>,
    pub in_sample: Vec<Dialogue>,
    pub out_of_sample: Vec<Dialogue>,
}

impl EvalSets {
    pub fn stats_table(&self) -> String {
        CorpusStats::table(&[
            ("train", CorpusStats::of(&self.train)),
            ("in-sample", CorpusStats::of(&self.in_sample)),
            ("out-of-sample", CorpusStats::of(&self.out_of_sample)),
        ])
    }

    /// Fraction of out-of-sample entity mentions whose value never occurs
    /// as a token sequence in the training utterances.
    pub fn unseen_entity_share(&self) -> f64 {
        let texts: Vec<String> = self.train.iter().flat_map(|d| d.turns.iter().map(|t| format!(" {} ", t.tokens().join(" ")))).collect();
        let train_text: BTreeSet<&str> = texts.iter().map(|s| s.as_str()).collect();
        let mut seen_cache: BTreeMap<String, bool> = BTreeMap::new();
        let mentions: Vec<String> =
            self.out_of_sample.iter().flat_map(|d| d.turns.iter().flat_map(|t| t.entities().iter().map(|m| normalize(&m.value)))).collect();
        if mentions.is_empty() {
            return 0.0;
        }
        let unseen = mentions
            .iter()
            .filter(|v| {
                !*seen_cache.entry(v.to_string()).or_insert_with(|| {
                    let needle = format!(" {v} ");
                    train_text.iter().any(|t| t.contains(&needle))
                })
            })
            .count();
        unseen as f64 / mentions.len() as f64
    }
}

/// Training, in-sample and out-of-sample corpora. In-sample dialogues
/// come from the training schema on a fresh seed; out-of-sample ones use
/// only held-out templates and catalog values over the same chain.
pub fn build_eval_sets(schema: &DomainSchema, config: &EvalSetConfig, seed: u64) -> Result<EvalSets, EvalError> {
    let (train_schema, oos_schema) = split_out_of_sample(schema, config.held_out_fraction, seed)?;
    let tm = estimate_transitions(&seed_dialogues(schema)?, config.variation.mixing_ratio, schema)?;
    let sim = Simulator::with_transitions(train_schema.clone(), tm.clone(), config.variation.clone())?;
    let train = sim.generate(config.n_train, seed)?;
    let in_sample = sim.generate(config.n_in_sample, seed.wrapping_add(1))?;
    let oos_sim = Simulator::with_transitions(oos_schema.clone(), tm, config.variation.clone())?;
    let out_of_sample = oos_sim.generate(config.n_out_of_sample, seed.wrapping_add(2))?;
    Ok(EvalSets { train_schema, out_of_sample_schema: oos_schema, train, in_sample, out_of_sample })
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub with_cf: EvalReport,
    pub without_cf: EvalReport,
    pub bundles: (ModelBundle, ModelBundle),
}

impl Ablation {
    /// NER per-turn and per-action accuracy gains from catalog features.
    pub fn ner_delta(&self) -> (f64, f64) {
        let (a, b) = (self.with_cf.row("NER"), self.without_cf.row("NER"));
        (a.accuracy_per_turn() - b.accuracy_per_turn(), a.accuracy_per_action() - b.accuracy_per_action())
    }
}

/// Trains two bundles that differ only in the catalog-feature flag and
/// evaluates both on the out-of-sample set. Catalog lookups at evaluation
/// time use the full schema, held-out values included.
pub fn ablate_catalog_features(schema: &DomainSchema, sets: &EvalSets, config: &TrainConfig) -> Result<Ablation, EvalError> {
    let run = |cf: bool| -> Result<(ModelBundle, EvalReport), EvalError> {
        let mut c = *config;
        c.network.encoder.catalog_features = cf;
        let bundle = train(&sets.train_schema, &sets.train, &c)?;
        let model = NluModel::new(bundle.clone(), schema)?;
        let report = evaluate(&model, schema, &sets.out_of_sample)?;
        Ok((bundle, report))
    };
    let (b_on, with_cf) = run(true)?;
    let (b_off, without_cf) = run(false)?;
    Ok(Ablation { with_cf, without_cf, bundles: (b_on, b_off) })
}
