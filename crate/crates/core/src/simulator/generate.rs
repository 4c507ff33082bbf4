use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::Vertex;
use super::interaction::{run_interaction, ProviderPolicy, SeekerPolicy};
use super::seeds::{seed_dialogues, seed_templates};
use super::transitions::{estimate_transitions, sample_goal, TransitionMatrix};
use super::{SimError, VariationConfig};
use crate::domain::{normalize, Catalog, CorpusStats, Dialogue, DomainSchema, SeekerTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_dialogues: usize,
    #[serde(default)]
    pub variation: VariationConfig,
    pub seed: u64,
}

/// A schema prepared for sampling: transition chain, seeker and provider
/// policies, and the entity values seen in its seeds.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub schema: DomainSchema,
    pub tm: TransitionMatrix,
    pub variation: VariationConfig,
    seeker: SeekerPolicy,
    provider: ProviderPolicy,
    seed_values: BTreeMap<String, Vec<String>>,
}

impl Simulator {
    /// Estimates the chain from the schema's own seeds.
    pub fn new(schema: DomainSchema, variation: VariationConfig) -> Result<Self, SimError> {
        variation.validate()?;
        let seeds = seed_dialogues(&schema)?;
        let tm = estimate_transitions(&seeds, variation.mixing_ratio, &schema)?;
        Self::assemble(schema, tm, &seeds, variation)
    }

    /// Uses a given chain; the schema may have no seeds (held-out schemas).
    pub fn with_transitions(schema: DomainSchema, tm: TransitionMatrix, variation: VariationConfig) -> Result<Self, SimError> {
        variation.validate()?;
        let names: Vec<&str> = schema.apis.iter().map(|a| a.name.as_str()).collect();
        if tm.apis != names || !tm.is_valid() {
            return Err(SimError::Config("transition matrix does not match the schema's APIs".into()));
        }
        let seeds = seed_dialogues(&schema)?;
        Self::assemble(schema, tm, &seeds, variation)
    }

    fn assemble(
        schema: DomainSchema,
        tm: TransitionMatrix,
        seeds: &[Dialogue],
        variation: VariationConfig,
    ) -> Result<Self, SimError> {
        let mut seed_values: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for d in seeds {
            for m in d.turns.iter().flat_map(|t| &t.user.entities) {
                seed_values.entry(m.entity_type.clone()).or_default().insert(m.value.clone());
            }
        }
        let seeker = SeekerPolicy {
            bank: schema.seeker_templates.clone(),
            seed_templates: seed_templates(&schema, seeds),
            paraphrase_prob: variation.paraphrase_prob,
        };
        let provider = ProviderPolicy { templates: schema.provider_templates.clone(), sample_wording: true };
        Ok(Simulator {
            schema,
            tm,
            variation,
            seeker,
            provider,
            seed_values: seed_values.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        })
    }

    /// Dialogue `index` of the corpus seeded by `seed`. Each index has its
    /// own random stream, so the result does not depend on generation order.
    pub fn dialogue(&self, seed: u64, index: u64) -> Result<Dialogue, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut goal = sample_goal(&self.tm, &self.schema, &self.variation.goal, &mut rng)?;
        if !rng.gen_bool(self.variation.entity_resample_prob) {
            for v in &mut goal.vertices {
                if let Vertex::SeekerEntity { entity_type, value } = v {
                    if let Some(seen) = self.seed_values.get(entity_type) {
                        *value = seen[rng.gen_range(0..seen.len())].clone();
                    }
                }
            }
        }
        let mut d = run_interaction(&goal, &self.seeker, &self.provider, &self.schema, &self.variation, &mut rng)?;
        d.id = format!("sim-{seed}-{index}");
        d.metadata.seed = Some(seed);
        d.metadata.index = Some(index);
        Ok(d)
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Dialogue>, SimError> {
        (0..n as u64).into_par_iter().map(|i| self.dialogue(seed, i)).collect()
    }
}

/// Simulates `config.n_dialogues` dialogues over `tm` and reports the
/// corpus statistics.
pub fn generate_corpus(
    schema: &DomainSchema,
    config: &CorpusConfig,
    tm: &TransitionMatrix,
) -> Result<(Vec<Dialogue>, CorpusStats), SimError> {
    if config.n_dialogues == 0 {
        return Err(SimError::Config("n_dialogues must be at least 1".into()));
    }
    let sim = Simulator::with_transitions(schema.clone(), tm.clone(), config.variation.clone())?;
    let dialogues = sim.generate(config.n_dialogues, config.seed)?;
    let stats = CorpusStats::of(&dialogues);
    Ok((dialogues, stats))
}

fn held_out_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Splits the paraphrase bank and catalogs into a training schema and an
/// evaluation schema whose templates and entity values never occur in
/// training. Material lifted from the seeds always stays on the training
/// side; the evaluation schema carries no seeds.
pub fn split_out_of_sample(schema: &DomainSchema, fraction: f64, seed: u64) -> Result<(DomainSchema, DomainSchema), SimError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SimError::Config(format!("held-out fraction {fraction} is outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = seed_dialogues(schema)?;
    let pinned_templates: BTreeSet<SeekerTemplate> = seed_templates(schema, &seeds).into_iter().collect();
    let mut pinned_values: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for m in seeds.iter().flat_map(|d| d.turns.iter().flat_map(|t| &t.user.entities)) {
        pinned_values.entry(m.entity_type.as_str()).or_default().insert(m.value.as_str());
    }

    let mut by_act: BTreeMap<&str, Vec<&SeekerTemplate>> = BTreeMap::new();
    for t in &schema.seeker_templates {
        by_act.entry(t.act.as_str()).or_default().push(t);
    }
    let mut held: BTreeSet<&SeekerTemplate> = BTreeSet::new();
    for (act, templates) in &by_act {
        let mut free: Vec<&SeekerTemplate> = templates.iter().copied().filter(|t| !pinned_templates.contains(*t)).collect();
        if templates.len() < 2 || free.is_empty() {
            return Err(SimError::InsufficientTemplates { act: act.to_string(), count: templates.len() });
        }
        let k = held_out_count(templates.len(), fraction).min(free.len());
        free.shuffle(&mut rng);
        held.extend(free.into_iter().take(k));
    }

    let mut train_catalogs = Vec::new();
    let mut eval_catalogs = Vec::new();
    for c in &schema.catalogs {
        let pinned = pinned_values.get(c.entity_type.as_str());
        let is_pinned = |v: &String| pinned.is_some_and(|p| p.contains(normalize(v).as_str()));
        let mut free: Vec<&String> = c.values.iter().filter(|v| !is_pinned(v)).collect();
        if c.values.len() < 2 || free.is_empty() {
            return Err(SimError::Config(format!("catalog `{}` has no value to hold out", c.entity_type)));
        }
        let k = held_out_count(c.values.len(), fraction).min(free.len());
        free.shuffle(&mut rng);
        let eval_values: BTreeSet<&String> = free.into_iter().take(k).collect();
        let split = |keep: bool| Catalog {
            entity_type: c.entity_type.clone(),
            values: c.values.iter().filter(|v| eval_values.contains(v) != keep).cloned().collect(),
        };
        train_catalogs.push(split(true));
        eval_catalogs.push(split(false));
    }

    let mut train = schema.clone();
    train.seeker_templates = schema.seeker_templates.iter().filter(|t| !held.contains(t)).cloned().collect();
    train.catalogs = train_catalogs;
    let mut eval = schema.clone();
    eval.seeker_templates = schema.seeker_templates.iter().filter(|t| held.contains(t)).cloned().collect();
    eval.catalogs = eval_catalogs;
    eval.seeds.clear();
    Ok((train, eval))
}
