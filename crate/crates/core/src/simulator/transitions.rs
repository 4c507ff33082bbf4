use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Edge, EntityTransferGraph, Vertex};
use super::SimError;
use crate::domain::{Dialogue, DomainSchema};

pub const STOP: &str = "STOP";

/// First-order chain over APIs with an absorbing STOP state. Row `i`
/// holds P(next | apis[i]) over `apis` followed by STOP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub apis: Vec<String>,
    pub api_index: BTreeMap<String, usize>,
    pub start: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn stop_index(&self) -> usize {
        self.apis.len()
    }

    pub fn prob(&self, from: &str, to: &str) -> f64 {
        let i = self.api_index[from];
        let j = if to == STOP { self.stop_index() } else { self.api_index[to] };
        self.rows[i][j]
    }

    pub fn start_prob(&self, api: &str) -> f64 {
        self.start[self.api_index[api]]
    }

    /// Builds a matrix from explicit probabilities (rows include STOP).
    pub fn from_parts(apis: Vec<String>, start: Vec<f64>, rows: Vec<Vec<f64>>) -> Self {
        let api_index = apis.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        TransitionMatrix { apis, api_index, start, rows }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |row: &[f64]| row.iter().all(|p| *p >= 0.0 && p.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        ok(&self.start)
            && self.rows.len() == self.apis.len()
            && self.rows.iter().all(|r| r.len() == self.apis.len() + 1 && ok(r))
    }
}

fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = v.iter().sum();
    (total > 0.0).then(|| v.into_iter().map(|x| x / total).collect())
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Goal API sequence of a seed: its goal graph when present, otherwise
/// every API call.
fn seed_sequence(d: &Dialogue) -> Vec<String> {
    if d.goal.vertices.is_empty() {
        d.api_sequence().into_iter().map(str::to_string).collect()
    } else {
        d.goal.api_sequence().into_iter().map(str::to_string).collect()
    }
}

/// Estimates the API chain from seed dialogues. Each row mixes three
/// evidence sources, each normalized to a distribution first: add-one
/// smoothed seed counts, argument-type overlap between signatures, and
/// whether the predecessor's result type is an argument of the successor.
pub fn estimate_transitions(seeds: &[Dialogue], mixing: [f64; 3], schema: &DomainSchema) -> Result<TransitionMatrix, SimError> {
    if seeds.is_empty() {
        return Err(SimError::EmptySeeds);
    }
    if mixing.iter().any(|w| *w < 0.0) || (mixing.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SimError::Config("mixing weights must be non-negative and sum to 1".into()));
    }
    let apis: Vec<String> = schema.apis.iter().map(|a| a.name.clone()).collect();
    let n = apis.len();
    let index: BTreeMap<String, usize> = apis.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
    let mut start_counts = vec![0.0; n];
    let mut counts = vec![vec![0.0; n + 1]; n];
    for d in seeds {
        let seq = seed_sequence(d);
        let ids: Vec<usize> = seq
            .iter()
            .map(|a| index.get(a).copied().ok_or_else(|| SimError::UnknownApi(a.clone())))
            .collect::<Result<_, _>>()?;
        if let Some(&first) = ids.first() {
            start_counts[first] += 1.0;
        }
        for w in ids.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        if let Some(&last) = ids.last() {
            counts[last][n] += 1.0;
        }
    }
    let n_start: f64 = start_counts.iter().sum();
    let start: Vec<f64> = start_counts.iter().map(|c| (c + 1.0) / (n_start + n as f64)).collect();

    let arg_types = |api: &str| -> BTreeSet<String> {
        schema.api(api).map(|s| s.arguments.iter().map(|a| a.arg_type.clone()).collect()).unwrap_or_default()
    };
    let mut rows = Vec::with_capacity(n);
    for (i, a) in apis.iter().enumerate() {
        let total: f64 = counts[i].iter().sum();
        let count_term: Vec<f64> = counts[i].iter().map(|c| (c + 1.0) / (total + n as f64 + 1.0)).collect();
        let types_a = arg_types(a);
        let mut shared = vec![0.0; n + 1];
        let mut io = vec![0.0; n + 1];
        let produces = schema.api(a).and_then(|s| s.produces.clone());
        for (j, b) in apis.iter().enumerate() {
            let types_b = arg_types(b);
            let union = types_a.union(&types_b).count();
            if union > 0 {
                shared[j] = types_a.intersection(&types_b).count() as f64 / union as f64;
            }
            if produces.as_ref().is_some_and(|p| types_b.contains(p)) {
                io[j] = 1.0;
            }
        }
        let mut row = vec![0.0; n + 1];
        for (w, term) in mixing.iter().zip([Some(count_term), normalized(shared), normalized(io)]) {
            if let Some(term) = term {
                for (r, t) in row.iter_mut().zip(term) {
                    *r += w * t;
                }
            }
        }
        let row = normalized(row).unwrap_or_else(|| {
            let mut stop = vec![0.0; n + 1];
            stop[n] = 1.0;
            stop
        });
        rows.push(row);
    }
    Ok(TransitionMatrix { apis, api_index: index, start, rows })
}

/// Samples an API sequence of at most `max_len` calls from the chain.
pub fn sample_sequence<R: Rng + ?Sized>(tm: &TransitionMatrix, max_len: usize, rng: &mut R) -> Vec<String> {
    let mut seq = vec![sample_index(&tm.start, rng)];
    while seq.len() < max_len {
        let next = sample_index(&tm.rows[*seq.last().unwrap()], rng);
        if next == tm.stop_index() {
            break;
        }
        seq.push(next);
    }
    seq.into_iter().map(|i| tm.apis[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalConfig {
    /// Chance of reusing an existing type-compatible seeker entity.
    pub transfer_prob: f64,
    pub max_len: usize,
}

impl Default for GoalConfig {
    fn default() -> Self {
        GoalConfig { transfer_prob: 0.3, max_len: 5 }
    }
}

/// Samples a seeker goal: an API sequence from the chain, with every
/// required argument fed by a seeker entity or an earlier API result.
pub fn sample_goal<R: Rng + ?Sized>(
    tm: &TransitionMatrix,
    schema: &DomainSchema,
    config: &GoalConfig,
    rng: &mut R,
) -> Result<EntityTransferGraph, SimError> {
    let seq = sample_sequence(tm, config.max_len, rng);
    let mut g = EntityTransferGraph::default();
    for api in &seq {
        add_api(&mut g, schema, api, config, rng, 0)?;
    }
    Ok(g)
}

fn add_api<R: Rng + ?Sized>(
    g: &mut EntityTransferGraph,
    schema: &DomainSchema,
    api: &str,
    config: &GoalConfig,
    rng: &mut R,
    depth: usize,
) -> Result<usize, SimError> {
    let spec = schema.api(api).ok_or_else(|| SimError::UnknownApi(api.to_string()))?;
    if depth > schema.apis.len() {
        return Err(SimError::Config(format!("result dependencies of `{api}` do not terminate")));
    }
    let mut sources = Vec::new();
    for arg in spec.arguments.iter().filter(|a| a.required) {
        let from = if schema.is_entity_type(&arg.arg_type) {
            let reuse = (0..g.vertices.len()).rev().find(
                |&v| matches!(&g.vertices[v], Vertex::SeekerEntity { entity_type, .. } if entity_type == &arg.arg_type),
            );
            match reuse {
                Some(v) if rng.gen::<f64>() < config.transfer_prob => v,
                _ => {
                    let values = schema.catalog(&arg.arg_type).map(|c| c.values.as_slice()).unwrap_or(&[]);
                    if values.is_empty() {
                        return Err(SimError::NoCatalogValue(arg.arg_type.clone()));
                    }
                    let value = values[rng.gen_range(0..values.len())].clone();
                    g.add_vertex(Vertex::SeekerEntity { entity_type: arg.arg_type.clone(), value })
                }
            }
        } else {
            let producer = (0..g.vertices.len()).rev().find(|&v| match &g.vertices[v] {
                Vertex::ApiCall { api } => schema.api(api).and_then(|s| s.produces.as_deref()) == Some(arg.arg_type.as_str()),
                _ => false,
            });
            match producer {
                Some(v) => v,
                None => {
                    let producer = schema
                        .apis
                        .iter()
                        .find(|s| s.produces.as_deref() == Some(arg.arg_type.as_str()))
                        .ok_or_else(|| SimError::UnknownApi(arg.arg_type.clone()))?;
                    add_api(g, schema, &producer.name.clone(), config, rng, depth + 1)?
                }
            }
        };
        sources.push((from, arg.name.clone()));
    }
    let v = g.add_vertex(Vertex::ApiCall { api: api.to_string() });
    for (from, argument) in sources {
        g.edges.push(Edge { from, to: v, argument });
    }
    Ok(v)
}
