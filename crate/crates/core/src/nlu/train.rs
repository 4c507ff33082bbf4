use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Losses, Network, NetworkConfig};
use super::{ModelBundle, NluError, BUNDLE_VERSION};
use crate::domain::{Dialogue, DomainSchema};
use crate::encoder::{CatalogIndex, Inventory};
use crate::nn::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Dialogues per optimizer step.
    pub batch_size: usize,
    /// Chance of replacing an input token by the unknown token.
    pub unk_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { network: NetworkConfig::default(), epochs: 12, lr: 1e-3, batch_size: 4, unk_dropout: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NluError> {
        let bad = |m: &str| Err(NluError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.unk_dropout) {
            return bad("unk_dropout must lie in [0, 1)");
        }
        let d = self.network.encoder.dim;
        if d < 2 || d % 2 != 0 || self.network.encoder.n_max == 0 {
            return bad("encoder dim must be even and n_max positive");
        }
        if self.network.ap_hidden == 0 || self.network.af_hidden == 0 || self.network.recency_buckets == 0 {
            return bad("hidden widths and recency buckets must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: Losses,
    /// Mean NER loss per turn + AP per step + AF per filled argument.
    pub mean_loss: f64,
}

pub fn train(schema: &DomainSchema, dialogues: &[Dialogue], config: &TrainConfig) -> Result<ModelBundle, NluError> {
    train_with_progress(schema, dialogues, config, |_| {})
}

/// Trains all heads jointly with Adam. Each dialogue's unknown-token
/// dropout is drawn from its own stream, so results do not depend on
/// the thread count.
pub fn train_with_progress(
    schema: &DomainSchema,
    dialogues: &[Dialogue],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<ModelBundle, NluError> {
    config.validate()?;
    if dialogues.is_empty() {
        return Err(NluError::EmptyCorpus);
    }
    let inv = Inventory::build(schema, dialogues);
    let (net, alloc) = Network::new(config.network, &inv);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = alloc.initialize(&mut rng);
    let catalogs = CatalogIndex::new(schema, &inv.entity_types);
    let mut opt = Adam::new(params.len(), config.lr);
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    let mut history = Vec::new();
    let gold_ids: Vec<Vec<Vec<usize>>> = dialogues
        .iter()
        .map(|d| d.turns.iter().map(|t| t.tokens().iter().map(|w| inv.token(w)).collect()).collect())
        .collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = Losses::default();
        for batch in order.chunks(config.batch_size) {
            let p = &params;
            let results: Vec<(Losses, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut drng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0000 ^ epoch as u64);
                    drng.set_stream(i as u64);
                    let ids: Vec<Vec<usize>> = gold_ids[i]
                        .iter()
                        .map(|turn| turn.iter().map(|&id| if drng.gen_bool(config.unk_dropout) { 0 } else { id }).collect())
                        .collect();
                    let mut g = vec![0.0; p.len()];
                    let l = net.dialogue_gradient(p, &inv, schema, &catalogs, &dialogues[i], &ids, &mut g);
                    (l, g)
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            for (l, g) in &results {
                total.add(l);
                crate::nn::add_into(&mut grad, g);
            }
            let k = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|x| *x *= k);
            opt.step(&mut params, &grad);
        }
        let stats = EpochStats { epoch, losses: total, mean_loss: total.mean_total() };
        progress(&stats);
        history.push(stats);
    }

    Ok(ModelBundle {
        version: BUNDLE_VERSION,
        schema_fingerprint: schema.fingerprint(),
        train: *config,
        inventory: inv,
        params,
        history,
    })
}
