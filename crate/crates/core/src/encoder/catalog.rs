use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::domain::{normalize, DomainSchema};

/// Which tokens of a matched n-gram receive the indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Only the first token of the match.
    FirstToken,
    /// Every token inside the match.
    Covering,
}

/// Normalized catalog values per entity type, in a fixed type order.
#[derive(Debug, Clone, Default)]
pub struct CatalogIndex {
    pub types: Vec<String>,
    values: Vec<HashSet<String>>,
}

impl CatalogIndex {
    /// Index over `types` in the given order; types without a catalog in
    /// `schema` get an empty set.
    pub fn new(schema: &DomainSchema, types: &[String]) -> Self {
        let values = types
            .iter()
            .map(|ty| schema.catalog(ty).map(|c| c.values.iter().map(|v| normalize(v)).collect()).unwrap_or_default())
            .collect();
        CatalogIndex { types: types.to_vec(), values }
    }

    pub fn from_values(entries: &[(&str, &[&str])]) -> Self {
        CatalogIndex {
            types: entries.iter().map(|(t, _)| t.to_string()).collect(),
            values: entries.iter().map(|(_, vs)| vs.iter().map(|v| normalize(v)).collect()).collect(),
        }
    }

    pub fn contains(&self, type_index: usize, normalized: &str) -> bool {
        self.values[type_index].contains(normalized)
    }
}

/// Binary catalog-match features: `get(t, n, e)` is 1 when an n-gram of
/// length `n` (1-based) matching a value of type `e` is anchored at token `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogFeatures {
    pub n_tokens: usize,
    pub n_max: usize,
    pub n_types: usize,
    data: Vec<u8>,
}

impl CatalogFeatures {
    fn slot(&self, t: usize, n: usize, e: usize) -> usize {
        (t * self.n_max + (n - 1)) * self.n_types + e
    }

    pub fn get(&self, t: usize, n: usize, e: usize) -> u8 {
        self.data[self.slot(t, n, e)]
    }

    /// The `n`-gram plane as rows of per-type indicators, one row per token.
    pub fn plane(&self, n: usize) -> Vec<Vec<u8>> {
        (0..self.n_tokens).map(|t| (0..self.n_types).map(|e| self.get(t, n, e)).collect()).collect()
    }

    /// Flattened (n, e) features of token `t`.
    pub fn token(&self, t: usize) -> &[u8] {
        let w = self.n_max * self.n_types;
        &self.data[t * w..(t + 1) * w]
    }
}

pub fn catalog_features(tokens: &[String], index: &CatalogIndex, n_max: usize, mode: AnchorMode) -> CatalogFeatures {
    let n_types = index.types.len();
    let mut out = CatalogFeatures { n_tokens: tokens.len(), n_max, n_types, data: vec![0; tokens.len() * n_max * n_types] };
    let lowered: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    for start in 0..tokens.len() {
        for n in 1..=n_max.min(tokens.len() - start) {
            let gram = lowered[start..start + n].join(" ");
            for e in 0..n_types {
                if !index.contains(e, &gram) {
                    continue;
                }
                match mode {
                    AnchorMode::FirstToken => {
                        let s = out.slot(start, n, e);
                        out.data[s] = 1;
                    }
                    AnchorMode::Covering => {
                        for t in start..start + n {
                            let s = out.slot(t, n, e);
                            out.data[s] = 1;
                        }
                    }
                }
            }
        }
    }
    out
}
