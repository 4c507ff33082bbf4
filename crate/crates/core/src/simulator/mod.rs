//! Seed-driven dialogue simulation: goal sampling over an API chain and a
//! seeker-provider loop that renders annotated dialogues.

mod builder;
mod generate;
mod graph;
mod interaction;
mod nlg;
mod seeds;
mod transitions;

use serde::{Deserialize, Serialize};

pub use generate::{generate_corpus, split_out_of_sample, CorpusConfig, Simulator};
pub use graph::{Edge, EntityTransferGraph, GraphError, Vertex};
pub use interaction::{run_interaction, seed_prior, ProviderPolicy, SeekerPolicy};
pub use nlg::{fill_template, provider_candidates, realize_nlg, render_provider, NlgError, Realized};
pub use seeds::{goal_of, seed_dialogues, seed_templates};
pub use transitions::{estimate_transitions, sample_goal, sample_sequence, GoalConfig, TransitionMatrix, STOP};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("no seed dialogues to estimate transitions from")]
    EmptySeeds,
    #[error("unknown API `{0}`")]
    UnknownApi(String),
    #[error("entity type `{0}` has no catalog values")]
    NoCatalogValue(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("argument `{argument}` of `{action}` has no binding")]
    Unbound { action: String, argument: String },
    #[error("API execution failed: {0}")]
    Execution(String),
    #[error("seed `{id}`: {message}")]
    Seed { id: String, message: String },
    #[error("interaction deadlock: {0}")]
    Deadlock(String),
    #[error("act `{act}` has {count} templates; at least 2 are needed to hold one out")]
    InsufficientTemplates { act: String, count: usize },
    #[error(transparent)]
    Nlg(#[from] NlgError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationConfig {
    /// Chance of drawing entity values from the full catalog rather than
    /// from values seen in the seeds.
    pub entity_resample_prob: f64,
    /// Chance of wording a seeker turn from the paraphrase bank rather
    /// than from a seed utterance.
    pub paraphrase_prob: f64,
    /// Chance that a task opens with an unhappy-path event.
    pub error_injection_rate: f64,
    /// Weights over (seed counts, shared argument types, result feeds argument).
    pub mixing_ratio: [f64; 3],
    /// Among injected errors, share of withheld entities versus asking
    /// for preferences before any are set (when both are possible).
    pub withhold_share: f64,
    /// Chance that the seeker already taught some preferences in an
    /// earlier session.
    pub returning_prob: f64,
    pub goal: GoalConfig,
}

impl Default for VariationConfig {
    fn default() -> Self {
        VariationConfig {
            entity_resample_prob: 0.9,
            paraphrase_prob: 0.8,
            error_injection_rate: 0.1,
            mixing_ratio: [0.8, 0.1, 0.1],
            withhold_share: 0.5,
            returning_prob: 0.2,
            goal: GoalConfig::default(),
        }
    }
}

impl VariationConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [
            ("entity_resample_prob", self.entity_resample_prob),
            ("paraphrase_prob", self.paraphrase_prob),
            ("error_injection_rate", self.error_injection_rate),
            ("withhold_share", self.withhold_share),
            ("returning_prob", self.returning_prob),
            ("goal.transfer_prob", self.goal.transfer_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.mixing_ratio.iter().any(|w| !(*w >= 0.0)) || (self.mixing_ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SimError::Config("mixing weights must be non-negative and sum to 1".into()));
        }
        if self.goal.max_len == 0 {
            return Err(SimError::Config("goal.max_len must be at least 1".into()));
        }
        Ok(())
    }
}
