use serde::{Deserialize, Serialize};

use super::crf::{CrfGrad, CrfParams};
use super::tags;
use crate::domain::{ArgumentBinding, Dialogue, DomainSchema};
use crate::encoder::{Candidate, CatalogIndex, ContextState, Encoder, EncoderConfig, Inventory, TurnEncoding, TurnGrad, TurnInput};
use crate::nn::{add_bias, add_scaled, matvec, matvec_backward, sigmoid, softmax, Alloc, Init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of the action-prediction MLP.
    pub ap_hidden: usize,
    /// Hidden width of the argument-filling attention.
    pub af_hidden: usize,
    /// Recency ranks 0..n-1; older candidates share the last bucket.
    pub recency_buckets: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { encoder: EncoderConfig::default(), ap_hidden: 64, af_hidden: 32, recency_buckets: 4 }
    }
}

/// Parameter layout of the joint model; the values live in a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub enc: Encoder,
    n_tags: usize,
    ner_w: Tensor,
    ner_b: Tensor,
    crf_trans: Tensor,
    crf_start: Tensor,
    crf_end: Tensor,
    ap_w1: Tensor,
    ap_b1: Tensor,
    ap_w2: Tensor,
    ap_b2: Tensor,
    af_action: Tensor,
    af_arg: Tensor,
    af_recency: Tensor,
    af_wc: Tensor,
    af_wz: Tensor,
    af_b: Tensor,
    af_v: Tensor,
    pub n_params: usize,
}

/// Per-head losses summed over a batch, with the counts they cover.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub ner: f64,
    pub ap: f64,
    pub af: f64,
    pub turns: usize,
    pub steps: usize,
    pub fills: usize,
}

impl Losses {
    pub fn add(&mut self, o: &Losses) {
        self.ner += o.ner;
        self.ap += o.ap;
        self.af += o.af;
        self.turns += o.turns;
        self.steps += o.steps;
        self.fills += o.fills;
    }

    pub fn mean_total(&self) -> f64 {
        self.ner / self.turns.max(1) as f64 + self.ap / self.steps.max(1) as f64 + self.af / self.fills.max(1) as f64
    }
}

/// A candidate prepared for scoring: pooled token ids, type and recency rows.
#[derive(Debug, Clone)]
pub struct CandidateInput {
    pub ids: Vec<usize>,
    pub ty: usize,
    pub recency: usize,
}

struct AfQuery {
    action: usize,
    arg: usize,
    ty: usize,
}

impl Network {
    pub fn new(config: NetworkConfig, inv: &Inventory) -> (Network, Alloc) {
        let mut a = Alloc::default();
        let enc = Encoder::new(&mut a, config.encoder, inv);
        let d = config.encoder.dim;
        let cd = enc.context_dim();
        let k = tags::n_tags(inv.entity_types.len());
        let n_actions = inv.actions.len();
        let (ha, hf) = (config.ap_hidden, config.af_hidden);
        let net = Network {
            config,
            enc,
            n_tags: k,
            ner_w: a.tensor("ner.w", k, d, Init::Glorot),
            ner_b: a.tensor("ner.b", k, 1, Init::Zero),
            crf_trans: a.tensor("crf.trans", k, k, Init::Zero),
            crf_start: a.tensor("crf.start", k, 1, Init::Zero),
            crf_end: a.tensor("crf.end", k, 1, Init::Zero),
            ap_w1: a.tensor("ap.w1", ha, cd, Init::Glorot),
            ap_b1: a.tensor("ap.b1", ha, 1, Init::Zero),
            ap_w2: a.tensor("ap.w2", n_actions, ha, Init::Glorot),
            ap_b2: a.tensor("ap.b2", n_actions, 1, Init::Zero),
            af_action: a.tensor("af.action", n_actions, d, Init::Normal(0.1)),
            af_arg: a.tensor("af.arg", inv.args.len().max(1), d, Init::Normal(0.1)),
            af_recency: a.tensor("af.recency", config.recency_buckets.max(1), d, Init::Normal(0.1)),
            af_wc: a.tensor("af.wc", hf, cd, Init::Glorot),
            af_wz: a.tensor("af.wz", hf, 6 * d, Init::Glorot),
            af_b: a.tensor("af.b", hf, 1, Init::Zero),
            af_v: a.tensor("af.v", hf, 1, Init::Glorot),
            n_params: 0,
        };
        let net = Network { n_params: a.size(), ..net };
        (net, a)
    }

    fn crf<'a>(&self, p: &'a [f64]) -> CrfParams<'a> {
        CrfParams { k: self.n_tags, trans: self.crf_trans.of(p), start: self.crf_start.of(p), end: self.crf_end.of(p) }
    }

    fn emissions(&self, p: &[f64], states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        states
            .iter()
            .map(|s| {
                let mut e = vec![0.0; self.n_tags];
                matvec(p, self.ner_w, s, &mut e);
                add_bias(p, self.ner_b, &mut e);
                e
            })
            .collect()
    }

    /// Most likely BIO tags for the encoded utterance.
    pub fn tag(&self, p: &[f64], enc: &TurnEncoding) -> Vec<usize> {
        self.crf(p).viterbi(&self.emissions(p, &enc.states)).0
    }

    fn ner_backward(&self, p: &[f64], enc: &TurnEncoding, gold: &[usize], tg: &mut TurnGrad, g: &mut [f64]) -> f64 {
        let em = self.emissions(p, &enc.states);
        let (loss, cg): (f64, CrfGrad) = self.crf(p).nll(&em, gold);
        add_scaled(self.crf_trans.of_mut(g), &cg.trans, 1.0);
        add_scaled(self.crf_start.of_mut(g), &cg.start, 1.0);
        add_scaled(self.crf_end.of_mut(g), &cg.end, 1.0);
        for (t, ge) in cg.emissions.iter().enumerate() {
            matvec_backward(p, self.ner_w, &enc.states[t], ge, g, Some(&mut tg.states[t]));
            add_scaled(self.ner_b.of_mut(g), ge, 1.0);
        }
        loss
    }

    fn ap_hidden(&self, p: &[f64], c: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.config.ap_hidden];
        matvec(p, self.ap_w1, c, &mut h);
        add_bias(p, self.ap_b1, &mut h);
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        h
    }

    /// Probability of every action in inventory order.
    pub fn action_probs(&self, p: &[f64], c: &[f64]) -> Vec<f64> {
        let h = self.ap_hidden(p, c);
        let mut logits = vec![0.0; self.ap_w2.rows];
        matvec(p, self.ap_w2, &h, &mut logits);
        add_bias(p, self.ap_b2, &mut logits);
        softmax(&logits)
    }

    fn ap_backward(&self, p: &[f64], c: &[f64], gold: usize, gc: &mut [f64], g: &mut [f64]) -> f64 {
        let h = self.ap_hidden(p, c);
        let probs = self.action_probs(p, c);
        let loss = -probs[gold].max(1e-300).ln();
        let mut dl = probs;
        dl[gold] -= 1.0;
        let mut dh = vec![0.0; h.len()];
        matvec_backward(p, self.ap_w2, &h, &dl, g, Some(&mut dh));
        add_scaled(self.ap_b2.of_mut(g), &dl, 1.0);
        for (dhi, hi) in dh.iter_mut().zip(&h) {
            if *hi <= 0.0 {
                *dhi = 0.0;
            }
        }
        matvec_backward(p, self.ap_w1, c, &dh, g, Some(gc));
        add_scaled(self.ap_b1.of_mut(g), &dh, 1.0);
        loss
    }

    fn query(&self, inv: &Inventory, action: &str, arg: &str, arg_type: &str) -> Option<AfQuery> {
        Some(AfQuery { action: inv.action_index(action)?, arg: inv.arg_index(arg)?, ty: inv.type_index(arg_type)? })
    }

    fn z(&self, p: &[f64], cand: &CandidateInput, q: &AfQuery) -> Vec<f64> {
        let mut z = self.enc.embed_tokens(p, &cand.ids);
        z.extend_from_slice(self.enc.type_row(p, cand.ty));
        z.extend_from_slice(&p[self.af_recency.row(cand.recency.min(self.af_recency.rows - 1))]);
        z.extend_from_slice(&p[self.af_arg.row(q.arg)]);
        z.extend_from_slice(self.enc.type_row(p, q.ty));
        z.extend_from_slice(&p[self.af_action.row(q.action)]);
        z
    }

    fn af_hidden(&self, p: &[f64], wc_c: &[f64], z: &[f64]) -> Vec<f64> {
        let mut u = wc_c.to_vec();
        matvec(p, self.af_wz, z, &mut u);
        add_bias(p, self.af_b, &mut u);
        u.iter_mut().for_each(|x| *x = x.tanh());
        u
    }

    fn af_scores(&self, p: &[f64], c: &[f64], cands: &[CandidateInput], q: &AfQuery) -> Vec<f64> {
        let mut wc_c = vec![0.0; self.config.af_hidden];
        matvec(p, self.af_wc, c, &mut wc_c);
        cands
            .iter()
            .map(|cand| {
                let a = self.af_hidden(p, &wc_c, &self.z(p, cand, q));
                a.iter().zip(self.af_v.of(p)).map(|(x, v)| x * v).sum::<f64>()
            })
            .collect()
    }

    /// Binary cross-entropy over type-compatible candidates with `gold` positive.
    fn af_backward(&self, p: &[f64], c: &[f64], cands: &[CandidateInput], q: &AfQuery, gold: usize, gc: &mut [f64], g: &mut [f64]) -> f64 {
        let d = self.config.encoder.dim;
        let mut wc_c = vec![0.0; self.config.af_hidden];
        matvec(p, self.af_wc, c, &mut wc_c);
        let mut du_sum = vec![0.0; self.config.af_hidden];
        let mut loss = 0.0;
        for (i, cand) in cands.iter().enumerate() {
            let z = self.z(p, cand, q);
            let a = self.af_hidden(p, &wc_c, &z);
            let s: f64 = a.iter().zip(self.af_v.of(p)).map(|(x, v)| x * v).sum();
            let prob = sigmoid(s);
            let y = if i == gold { 1.0 } else { 0.0 };
            loss -= if i == gold { prob.max(1e-300).ln() } else { (1.0 - prob).max(1e-300).ln() };
            let ds = prob - y;
            add_scaled(self.af_v.of_mut(g), &a, ds);
            let du: Vec<f64> = a.iter().zip(self.af_v.of(p)).map(|(ai, v)| ds * v * (1.0 - ai * ai)).collect();
            add_scaled(self.af_b.of_mut(g), &du, 1.0);
            add_scaled(&mut du_sum, &du, 1.0);
            let mut dz = vec![0.0; z.len()];
            matvec_backward(p, self.af_wz, &z, &du, g, Some(&mut dz));
            self.enc.embed_tokens_backward(g, &cand.ids, &dz[..d]);
            add_scaled(&mut g[self.enc.ty.row(cand.ty)], &dz[d..2 * d], 1.0);
            add_scaled(&mut g[self.af_recency.row(cand.recency.min(self.af_recency.rows - 1))], &dz[2 * d..3 * d], 1.0);
            add_scaled(&mut g[self.af_arg.row(q.arg)], &dz[3 * d..4 * d], 1.0);
            add_scaled(&mut g[self.enc.ty.row(q.ty)], &dz[4 * d..5 * d], 1.0);
            add_scaled(&mut g[self.af_action.row(q.action)], &dz[5 * d..6 * d], 1.0);
        }
        matvec_backward(p, self.af_wc, c, &du_sum, g, Some(gc));
        loss
    }

    /// Candidates of type `arg_type` prepared for scoring, paired with the
    /// originals. `ids_of` maps a seeker-entity binding to token ids.
    pub fn candidate_inputs<'a>(
        &self,
        inv: &Inventory,
        cands: &'a [Candidate],
        arg_type: &str,
        ids_of: impl Fn(&Candidate) -> Vec<usize>,
    ) -> Vec<(&'a Candidate, CandidateInput)> {
        cands
            .iter()
            .filter(|c| c.type_name == arg_type)
            .filter_map(|c| Some((c, CandidateInput { ids: ids_of(c), ty: inv.type_index(&c.type_name)?, recency: c.recency })))
            .collect()
    }

    /// Sigmoid scores of the type-compatible candidates for one argument.
    pub fn score_arguments<'a>(
        &self,
        p: &[f64],
        inv: &Inventory,
        c: &[f64],
        cands: &'a [Candidate],
        action: &str,
        arg: &str,
        arg_type: &str,
    ) -> Vec<(&'a Candidate, f64)> {
        let Some(q) = self.query(inv, action, arg, arg_type) else { return Vec::new() };
        let prepared = self.candidate_inputs(inv, cands, arg_type, |c| c.tokens.iter().map(|t| inv.token(t)).collect());
        let inputs: Vec<CandidateInput> = prepared.iter().map(|(_, ci)| ci.clone()).collect();
        let scores = self.af_scores(p, c, &inputs, &q);
        prepared.into_iter().map(|(c, _)| c).zip(scores.into_iter().map(sigmoid)).collect()
    }

    /// Losses and gradient of one teacher-forced dialogue. `ids[t]` are the
    /// (possibly dropped-out) token ids of turn t.
    pub fn dialogue_gradient(
        &self,
        p: &[f64],
        inv: &Inventory,
        schema: &DomainSchema,
        catalogs: &CatalogIndex,
        d: &Dialogue,
        ids: &[Vec<usize>],
        g: &mut [f64],
    ) -> Losses {
        let mut losses = Losses::default();
        let signatures: std::collections::HashMap<String, crate::domain::ActionSignature> =
            schema.signatures().into_iter().map(|s| (s.name.clone(), s)).collect();
        for (t, turn) in d.turns.iter().enumerate() {
            let mut state = ContextState::teacher_forced(d, t, 0);
            let input = self.training_input(inv, catalogs, &state, ids);
            let enc = self.enc.encode_turn(p, &input);
            let mut tg = self.enc.new_turn_grad(&enc);
            let gold_tags = tags::encode(turn.entities(), turn.tokens().len(), |ty| inv.entity_type_index(ty));
            losses.ner += self.ner_backward(p, &enc, &gold_tags, &mut tg, g);
            losses.turns += 1;
            for action in &turn.actions {
                let items = self.enc.action_items(&state, inv);
                let c = self.enc.context(p, &enc, &items);
                let mut gc = vec![0.0; c.len()];
                if let Some(gold) = inv.action_index(&action.name) {
                    losses.ap += self.ap_backward(p, &c, gold, &mut gc, g);
                    losses.steps += 1;
                }
                if let Some(sig) = signatures.get(&action.name) {
                    let cands = state.candidates(schema);
                    for spec in &sig.arguments {
                        let (Some(binding), Some(q)) = (action.args.get(&spec.name), self.query(inv, &action.name, &spec.name, &spec.arg_type)) else {
                            continue;
                        };
                        let prepared = self.candidate_inputs(inv, &cands, &spec.arg_type, |c| match c.binding {
                            ArgumentBinding::SeekerEntity { turn, start, end } => ids[turn][start..end].to_vec(),
                            _ => Vec::new(),
                        });
                        let Some(gold) = prepared.iter().position(|(c, _)| &c.binding == binding) else { continue };
                        let inputs: Vec<CandidateInput> = prepared.into_iter().map(|(_, ci)| ci).collect();
                        losses.af += self.af_backward(p, &c, &inputs, &q, gold, &mut gc, g);
                        losses.fills += 1;
                    }
                }
                self.enc.context_backward(&items, &gc, &mut tg, g);
                state.push_action(action.clone());
            }
            self.enc.turn_backward(p, &enc, &tg, g);
        }
        losses
    }

    /// Same as [`Encoder::turn_input`] but with token ids supplied by the caller.
    pub fn training_input(&self, inv: &Inventory, catalogs: &CatalogIndex, state: &ContextState, ids: &[Vec<usize>]) -> TurnInput {
        let mut input = self.enc.turn_input(state, inv, catalogs);
        let last = state.current_index();
        let first_past = last.saturating_sub(self.config.encoder.window);
        input.ids = ids[last].clone();
        input.past_utterances = ids[first_past..last].to_vec();
        input
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::Simulator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dialogue_gradient_matches_finite_differences() {
        let schema = DomainSchema::default_schema();
        let sim = Simulator::new(schema.clone(), Default::default()).unwrap();
        let ds = sim.generate(3, 11).unwrap();
        let inv = Inventory::build(&schema, &ds);
        let config = NetworkConfig {
            encoder: EncoderConfig { dim: 8, n_max: 2, ..Default::default() },
            ap_hidden: 6,
            af_hidden: 5,
            recency_buckets: 3,
        };
        let (net, alloc) = Network::new(config, &inv);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = alloc.initialize(&mut rng);
        let cats = CatalogIndex::new(&schema, &inv.entity_types);
        let d = &ds[1];
        let ids: Vec<Vec<usize>> = d.turns.iter().map(|t| t.tokens().iter().map(|w| inv.token(w)).collect()).collect();
        let mut g = vec![0.0; p.len()];
        let l = net.dialogue_gradient(&p, &inv, &schema, &cats, d, &ids, &mut g);
        assert!(l.steps > 0 && l.fills > 0 && l.turns > 0);
        let total = |p: &[f64]| {
            let mut scratch = vec![0.0; p.len()];
            let l = net.dialogue_gradient(p, &inv, &schema, &cats, d, &ids, &mut scratch);
            l.ner + l.ap + l.af
        };
        let touched: Vec<usize> = (0..p.len()).filter(|&i| g[i] != 0.0).collect();
        for _ in 0..300 {
            let i = touched[rng.gen_range(0..touched.len())];
            let h = 1e-6;
            let orig = p[i];
            p[i] = orig + h;
            let up = total(&p);
            p[i] = orig - h;
            let down = total(&p);
            p[i] = orig;
            let num = (up - down) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-6 + 1e-4 * num.abs(), "param {i}: numeric {num} analytic {}", g[i]);
        }
    }
}
