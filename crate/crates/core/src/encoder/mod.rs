//! Context encoding: catalog-match features, a shared bidirectional GRU
//! over the current utterance, and mean-pooled embeddings of the current
//! utterance, recent utterances, current and recent entity types, and
//! past actions.

mod catalog;
mod context;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use catalog::{catalog_features, AnchorMode, CatalogFeatures, CatalogIndex};
pub use context::{Candidate, ContextState, TurnContext};

use crate::domain::{ApiOutcome, Dialogue, DomainSchema};
use crate::nn::{add_scaled, Alloc, BiGru, BiGruCache, Init, Tensor};

pub const UNK: &str = "<unk>";
/// Age buckets for past actions: current turn, previous turn, older.
pub const AGE_BUCKETS: usize = 3;
const OUTCOMES: usize = 3;

/// Symbol tables shared by the encoder and the heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "InventoryData", into = "InventoryData")]
pub struct Inventory {
    pub tokens: Vec<String>,
    pub entity_types: Vec<String>,
    /// Entity types followed by result types.
    pub types: Vec<String>,
    pub actions: Vec<String>,
    pub args: Vec<String>,
    token_ix: HashMap<String, usize>,
    type_ix: HashMap<String, usize>,
    action_ix: HashMap<String, usize>,
    arg_ix: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct InventoryData {
    tokens: Vec<String>,
    entity_types: Vec<String>,
    types: Vec<String>,
    actions: Vec<String>,
    args: Vec<String>,
}

impl From<InventoryData> for Inventory {
    fn from(d: InventoryData) -> Self {
        let ix = |v: &[String]| v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Inventory {
            token_ix: ix(&d.tokens),
            type_ix: ix(&d.types),
            action_ix: ix(&d.actions),
            arg_ix: ix(&d.args),
            tokens: d.tokens,
            entity_types: d.entity_types,
            types: d.types,
            actions: d.actions,
            args: d.args,
        }
    }
}

impl From<Inventory> for InventoryData {
    fn from(i: Inventory) -> Self {
        InventoryData { tokens: i.tokens, entity_types: i.entity_types, types: i.types, actions: i.actions, args: i.args }
    }
}

impl Inventory {
    /// Vocabulary from the seeker utterances of `dialogues`, symbols from `schema`.
    pub fn build(schema: &DomainSchema, dialogues: &[Dialogue]) -> Self {
        let mut tokens = vec![UNK.to_string()];
        let mut seen: std::collections::HashSet<&str> = Default::default();
        for tok in dialogues.iter().flat_map(|d| d.turns.iter().flat_map(|t| t.tokens())) {
            if seen.insert(tok.as_str()) {
                tokens.push(tok.clone());
            }
        }
        tokens[1..].sort();
        let mut types = schema.entity_types.clone();
        types.extend(schema.result_types());
        let signatures = schema.signatures();
        let mut args: Vec<String> = signatures.iter().flat_map(|s| s.arguments.iter().map(|a| a.name.clone())).collect();
        args.sort();
        args.dedup();
        InventoryData {
            tokens,
            entity_types: schema.entity_types.clone(),
            types,
            actions: signatures.into_iter().map(|s| s.name).collect(),
            args,
        }
        .into()
    }

    pub fn token(&self, t: &str) -> usize {
        self.token_ix.get(t).copied().unwrap_or(0)
    }

    pub fn type_index(&self, t: &str) -> Option<usize> {
        self.type_ix.get(t).copied()
    }

    pub fn action_index(&self, a: &str) -> Option<usize> {
        self.action_ix.get(a).copied()
    }

    pub fn arg_index(&self, a: &str) -> Option<usize> {
        self.arg_ix.get(a).copied()
    }

    pub fn entity_type_index(&self, t: &str) -> Option<usize> {
        self.entity_types.iter().position(|e| e == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub n_max: usize,
    pub catalog_features: bool,
    /// Number of previous utterances pooled into the past-utterance block.
    pub window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { dim: 32, n_max: 4, catalog_features: true, window: 3 }
    }
}

/// Index-level view of a context, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnInput {
    pub ids: Vec<usize>,
    pub cf: Vec<Vec<f64>>,
    pub past_utterances: Vec<Vec<usize>>,
    pub current_types: Vec<usize>,
    pub past_types: Vec<usize>,
}

/// Forward state of one turn, reused by every step taken in it.
#[derive(Debug, Clone)]
pub struct TurnEncoding {
    input: TurnInput,
    gru: BiGruCache,
    pub states: Vec<Vec<f64>>,
    blocks: [Vec<f64>; 4],
}

/// Gradients collected on the turn-level blocks.
#[derive(Debug, Clone)]
pub struct TurnGrad {
    pub states: Vec<Vec<f64>>,
    blocks: [Vec<f64>; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tok: Tensor,
    pub ty: Tensor,
    pub act: Tensor,
    pub gru: BiGru,
    cf_dim: usize,
}

impl Encoder {
    pub fn new(alloc: &mut Alloc, config: EncoderConfig, inv: &Inventory) -> Encoder {
        assert!(config.dim >= 2 && config.dim % 2 == 0, "encoder dim must be even");
        let d = config.dim;
        let cf_dim = if config.catalog_features { 2 * config.n_max * inv.entity_types.len() } else { 0 };
        let tok = alloc.tensor("enc.tok", inv.tokens.len(), d, Init::Normal(0.1));
        let ty = alloc.tensor("enc.type", inv.types.len(), d, Init::Normal(0.1));
        let act = alloc.tensor("enc.action", inv.actions.len() * OUTCOMES * AGE_BUCKETS, d, Init::Normal(0.1));
        let gru = BiGru::new(alloc, "enc.gru", d + cf_dim, d / 2);
        Encoder { config, tok, ty, act, gru, cf_dim }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Width of the pooled context vector.
    pub fn context_dim(&self) -> usize {
        5 * self.config.dim
    }

    pub fn cf_dim(&self) -> usize {
        self.cf_dim
    }

    /// Per-token catalog features: first-token and covering planes, concatenated.
    pub fn token_features(&self, tokens: &[String], catalogs: &CatalogIndex) -> Vec<Vec<f64>> {
        if !self.config.catalog_features {
            return vec![Vec::new(); tokens.len()];
        }
        let first = catalog_features(tokens, catalogs, self.config.n_max, AnchorMode::FirstToken);
        let cover = catalog_features(tokens, catalogs, self.config.n_max, AnchorMode::Covering);
        (0..tokens.len())
            .map(|t| first.token(t).iter().chain(cover.token(t)).map(|&b| b as f64).collect())
            .collect()
    }

    pub fn turn_input(&self, state: &ContextState, inv: &Inventory, catalogs: &CatalogIndex) -> TurnInput {
        let Some(cur) = state.current() else {
            return TurnInput { ids: vec![], cf: vec![], past_utterances: vec![], current_types: vec![], past_types: vec![] };
        };
        let last = state.current_index();
        let first_past = last.saturating_sub(self.config.window);
        let past = &state.turns[first_past..last];
        let types = |ms: &[crate::domain::EntityMention]| ms.iter().filter_map(|m| inv.type_index(&m.entity_type)).collect::<Vec<_>>();
        TurnInput {
            ids: cur.tokens.iter().map(|t| inv.token(t)).collect(),
            cf: self.token_features(&cur.tokens, catalogs),
            past_utterances: past.iter().map(|t| t.tokens.iter().map(|w| inv.token(w)).collect()).collect(),
            current_types: types(&cur.entities),
            past_types: past.iter().flat_map(|t| types(&t.entities)).collect(),
        }
    }

    /// Row of the action-item table for an action with its outcome and age.
    pub fn action_item(&self, inv: &Inventory, name: &str, outcome: Option<ApiOutcome>, age: usize) -> Option<usize> {
        let a = inv.action_index(name)?;
        let o = match outcome {
            None => 0,
            Some(ApiOutcome::Ok) => 1,
            Some(ApiOutcome::Empty) => 2,
        };
        Some((a * OUTCOMES + o) * AGE_BUCKETS + age.min(AGE_BUCKETS - 1))
    }

    pub fn action_items(&self, state: &ContextState, inv: &Inventory) -> Vec<usize> {
        state.past_actions().filter_map(|(a, age)| self.action_item(inv, &a.name, a.outcome, age)).collect()
    }

    fn mean_rows(&self, p: &[f64], table: Tensor, rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.config.dim];
        let mut n = 0usize;
        for r in rows {
            add_scaled(&mut out, &p[table.row(r)], 1.0);
            n += 1;
        }
        if n > 0 {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        out
    }

    fn mean_rows_backward(&self, g: &mut [f64], table: Tensor, rows: &[usize], grad: &[f64]) {
        if rows.is_empty() {
            return;
        }
        let k = 1.0 / rows.len() as f64;
        for &r in rows {
            add_scaled(&mut g[table.row(r)], grad, k);
        }
    }

    /// Mean of utterance means.
    fn past_utterance_block(&self, p: &[f64], utts: &[Vec<usize>]) -> Vec<f64> {
        let d = self.config.dim;
        let nonempty: Vec<&Vec<usize>> = utts.iter().filter(|u| !u.is_empty()).collect();
        let mut out = vec![0.0; d];
        for u in &nonempty {
            let m = self.mean_rows(p, self.tok, u.iter().copied());
            add_scaled(&mut out, &m, 1.0 / nonempty.len() as f64);
        }
        out
    }

    pub fn embed_tokens(&self, p: &[f64], ids: &[usize]) -> Vec<f64> {
        self.mean_rows(p, self.tok, ids.iter().copied())
    }

    pub fn embed_tokens_backward(&self, g: &mut [f64], ids: &[usize], grad: &[f64]) {
        self.mean_rows_backward(g, self.tok, ids, grad)
    }

    pub fn type_row<'a>(&self, p: &'a [f64], ty: usize) -> &'a [f64] {
        &p[self.ty.row(ty)]
    }

    pub fn encode_turn(&self, p: &[f64], input: &TurnInput) -> TurnEncoding {
        let xs: Vec<Vec<f64>> = input
            .ids
            .iter()
            .zip(&input.cf)
            .map(|(&id, cf)| {
                let mut x = p[self.tok.row(id)].to_vec();
                x.extend_from_slice(cf);
                x
            })
            .collect();
        let gru = self.gru.forward(p, &xs);
        let d = self.config.dim;
        let mut cu = vec![0.0; d];
        for s in &gru.states {
            add_scaled(&mut cu, s, 1.0 / gru.states.len() as f64);
        }
        let pu = self.past_utterance_block(p, &input.past_utterances);
        let ce = self.mean_rows(p, self.ty, input.current_types.iter().copied());
        let pe = self.mean_rows(p, self.ty, input.past_types.iter().copied());
        TurnEncoding { input: input.clone(), states: gru.states.clone(), gru, blocks: [cu, pu, ce, pe] }
    }

    /// The pooled context [E_cu, E_pu, E_ce, E_pe, E_pa] for a step whose
    /// past actions map to `items`.
    pub fn context(&self, p: &[f64], enc: &TurnEncoding, items: &[usize]) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.context_dim());
        for b in &enc.blocks {
            c.extend_from_slice(b);
        }
        c.extend(self.mean_rows(p, self.act, items.iter().copied()));
        c
    }

    pub fn new_turn_grad(&self, enc: &TurnEncoding) -> TurnGrad {
        let d = self.config.dim;
        TurnGrad { states: vec![vec![0.0; d]; enc.states.len()], blocks: std::array::from_fn(|_| vec![0.0; d]) }
    }

    pub fn context_backward(&self, items: &[usize], gc: &[f64], tg: &mut TurnGrad, g: &mut [f64]) {
        let d = self.config.dim;
        for (i, b) in tg.blocks.iter_mut().enumerate() {
            add_scaled(b, &gc[i * d..(i + 1) * d], 1.0);
        }
        self.mean_rows_backward(g, self.act, items, &gc[4 * d..5 * d]);
    }

    pub fn turn_backward(&self, p: &[f64], enc: &TurnEncoding, tg: &TurnGrad, g: &mut [f64]) {
        let n = enc.states.len();
        let mut gstates = tg.states.clone();
        for s in gstates.iter_mut() {
            add_scaled(s, &tg.blocks[0], 1.0 / n as f64);
        }
        if n > 0 {
            let gx = self.gru.backward(p, &enc.gru, &gstates, g);
            let d = self.config.dim;
            for (id, gxi) in enc.input.ids.iter().zip(&gx) {
                add_scaled(&mut g[self.tok.row(*id)], &gxi[..d], 1.0);
            }
        }
        let utts: Vec<&Vec<usize>> = enc.input.past_utterances.iter().filter(|u| !u.is_empty()).collect();
        for u in &utts {
            let scaled: Vec<f64> = tg.blocks[1].iter().map(|x| x / utts.len() as f64).collect();
            self.mean_rows_backward(g, self.tok, u, &scaled);
        }
        self.mean_rows_backward(g, self.ty, &enc.input.current_types, &tg.blocks[2]);
        self.mean_rows_backward(g, self.ty, &enc.input.past_types, &tg.blocks[3]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{tokenize, ActionKind, ActionRecord, EntityMention};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cf: bool) -> (DomainSchema, Inventory, Encoder, Vec<f64>, CatalogIndex) {
        let schema = DomainSchema::default_schema();
        let inv = Inventory::build(&schema, &crate::simulator::seed_dialogues(&schema).unwrap());
        let mut alloc = Alloc::default();
        let enc = Encoder::new(&mut alloc, EncoderConfig { catalog_features: cf, ..Default::default() }, &inv);
        let p = alloc.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        let cats = CatalogIndex::new(&schema, &inv.entity_types);
        (schema, inv, enc, p, cats)
    }

    fn state() -> ContextState {
        let mut s = ContextState::default();
        let toks = tokenize("i like the yankees");
        let m = EntityMention::from_tokens(&toks, 3, 4, "sport_team");
        s.push_turn(toks, vec![m]);
        s.push_action(ActionRecord::new(ActionKind::Api, "setSportAffinity"));
        s.push_turn(tokenize("also sushi"), vec![]);
        s
    }

    #[test]
    fn context_has_five_blocks_and_no_nan() {
        let (_, inv, enc, p, cats) = setup(true);
        for st in [ContextState::default(), state()] {
            let input = enc.turn_input(&st, &inv, &cats);
            let te = enc.encode_turn(&p, &input);
            let c = enc.context(&p, &te, &enc.action_items(&st, &inv));
            assert_eq!(c.len(), 5 * 32);
            assert!(c.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn blocks_only_depend_on_their_inputs() {
        let (_, inv, enc, p, cats) = setup(true);
        let st = state();
        let base = enc.context(&p, &enc.encode_turn(&p, &enc.turn_input(&st, &inv, &cats)), &enc.action_items(&st, &inv));
        // Changing an old action only moves the action block.
        let mut st2 = st.clone();
        st2.turns[0].actions[0].name = "getAllAffinityAction".into();
        let other = enc.context(&p, &enc.encode_turn(&p, &enc.turn_input(&st2, &inv, &cats)), &enc.action_items(&st2, &inv));
        assert_eq!(base[..128], other[..128]);
        assert_ne!(base[128..], other[128..]);
        // Changing the current utterance only moves the first block.
        let mut st3 = st.clone();
        st3.turns[1].tokens = tokenize("also pizza");
        let other = enc.context(&p, &enc.encode_turn(&p, &enc.turn_input(&st3, &inv, &cats)), &enc.action_items(&st3, &inv));
        assert_ne!(base[..32], other[..32]);
        assert_eq!(base[32..], other[32..]);
    }

    #[test]
    fn catalog_features_are_wired_when_enabled() {
        let (_, inv, enc, _, cats) = setup(true);
        let st = state();
        let input = enc.turn_input(&st, &inv, &cats);
        assert_eq!(input.cf[1].len(), enc.cf_dim());
        assert!(input.cf[1].iter().any(|&x| x == 1.0), "sushi is a cuisine");
        let (_, inv, enc, _, cats) = setup(false);
        assert!(enc.turn_input(&st, &inv, &cats).cf.iter().all(|v| v.is_empty()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (_, inv, enc, mut p, cats) = setup(true);
        let st = state();
        let input = enc.turn_input(&st, &inv, &cats);
        let items = enc.action_items(&st, &inv);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..enc.context_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &[f64]| -> f64 {
            let te = enc.encode_turn(p, &input);
            enc.context(p, &te, &items).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let te = enc.encode_turn(&p, &input);
        let mut tg = enc.new_turn_grad(&te);
        let mut g = vec![0.0; p.len()];
        enc.context_backward(&items, &w, &mut tg, &mut g);
        enc.turn_backward(&p, &te, &tg, &mut g);
        let touched: Vec<usize> = (0..p.len()).filter(|&i| g[i] != 0.0).collect();
        assert!(touched.len() > 100);
        for &i in touched.iter().step_by(7) {
            let h = 1e-5;
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p);
            p[i] = orig - h;
            let down = loss(&p);
            p[i] = orig;
            let num = (up - down) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-7 + 1e-5 * num.abs(), "{i}: {num} vs {}", g[i]);
        }
    }
}
