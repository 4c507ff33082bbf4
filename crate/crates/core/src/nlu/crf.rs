//! Linear-chain CRF over BIO tags. Disallowed transitions score −∞ and
//! their parameters are never read.

use super::tags::{allowed, allowed_start};
use crate::nn::log_sum_exp;

/// Borrowed CRF parameters: `trans[i * k + j]` scores tag i followed by j.
#[derive(Debug, Clone, Copy)]
pub struct CrfParams<'a> {
    pub k: usize,
    pub trans: &'a [f64],
    pub start: &'a [f64],
    pub end: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emissions: Vec<Vec<f64>>,
    pub trans: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams<'_> {
    fn t(&self, i: usize, j: usize) -> f64 {
        if allowed(i, j) {
            self.trans[i * self.k + j]
        } else {
            f64::NEG_INFINITY
        }
    }

    fn s(&self, j: usize) -> f64 {
        if allowed_start(j) {
            self.start[j]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Unnormalized score of a tag path.
    pub fn score(&self, em: &[Vec<f64>], path: &[usize]) -> f64 {
        if path.is_empty() {
            return 0.0;
        }
        let mut s = self.s(path[0]) + em[0][path[0]];
        for t in 1..path.len() {
            s += self.t(path[t - 1], path[t]) + em[t][path[t]];
        }
        s + self.end[path[path.len() - 1]]
    }

    fn alphas(&self, em: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.k;
        let mut a = vec![(0..k).map(|j| self.s(j) + em[0][j]).collect::<Vec<f64>>()];
        for t in 1..em.len() {
            let prev = &a[t - 1];
            let row = (0..k)
                .map(|j| log_sum_exp(&(0..k).map(|i| prev[i] + self.t(i, j)).collect::<Vec<_>>()) + em[t][j])
                .collect();
            a.push(row);
        }
        a
    }

    fn betas(&self, em: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.k;
        let n = em.len();
        let mut b = vec![vec![0.0; k]; n];
        b[n - 1] = self.end.to_vec();
        for t in (0..n - 1).rev() {
            for i in 0..k {
                let terms: Vec<f64> = (0..k).map(|j| self.t(i, j) + em[t + 1][j] + b[t + 1][j]).collect();
                b[t][i] = log_sum_exp(&terms);
            }
        }
        b
    }

    /// log Z; 0 for an empty sequence.
    pub fn log_partition(&self, em: &[Vec<f64>]) -> f64 {
        if em.is_empty() {
            return 0.0;
        }
        let a = self.alphas(em);
        log_sum_exp(&(0..self.k).map(|j| a[em.len() - 1][j] + self.end[j]).collect::<Vec<_>>())
    }

    /// Highest-scoring path and its score.
    pub fn viterbi(&self, em: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let n = em.len();
        if n == 0 {
            return (Vec::new(), 0.0);
        }
        let k = self.k;
        let mut delta: Vec<f64> = (0..k).map(|j| self.s(j) + em[0][j]).collect();
        let mut back = vec![vec![0usize; k]; n];
        for t in 1..n {
            let mut next = vec![f64::NEG_INFINITY; k];
            for j in 0..k {
                for i in 0..k {
                    let v = delta[i] + self.t(i, j);
                    if v > next[j] {
                        next[j] = v;
                        back[t][j] = i;
                    }
                }
                next[j] += em[t][j];
            }
            delta = next;
        }
        let (mut best, mut score) = (0, f64::NEG_INFINITY);
        for (j, d) in delta.iter().enumerate() {
            if d + self.end[j] > score {
                score = d + self.end[j];
                best = j;
            }
        }
        let mut path = vec![best; n];
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        (path, score)
    }

    /// Negative log-likelihood of `gold` and its gradient.
    pub fn nll(&self, em: &[Vec<f64>], gold: &[usize]) -> (f64, CrfGrad) {
        let k = self.k;
        let n = em.len();
        let mut g = CrfGrad {
            emissions: vec![vec![0.0; k]; n],
            trans: vec![0.0; k * k],
            start: vec![0.0; k],
            end: vec![0.0; k],
        };
        if n == 0 {
            return (0.0, g);
        }
        let a = self.alphas(em);
        let b = self.betas(em);
        let log_z = log_sum_exp(&(0..k).map(|j| a[n - 1][j] + self.end[j]).collect::<Vec<_>>());
        for t in 0..n {
            for j in 0..k {
                g.emissions[t][j] = (a[t][j] + b[t][j] - log_z).exp();
            }
        }
        for j in 0..k {
            g.start[j] = g.emissions[0][j];
            g.end[j] = g.emissions[n - 1][j];
        }
        for t in 1..n {
            for i in 0..k {
                for j in 0..k {
                    if allowed(i, j) {
                        g.trans[i * k + j] += (a[t - 1][i] + self.t(i, j) + em[t][j] + b[t][j] - log_z).exp();
                    }
                }
            }
        }
        g.emissions.iter_mut().zip(gold).for_each(|(row, &y)| row[y] -= 1.0);
        g.start[gold[0]] -= 1.0;
        g.end[gold[n - 1]] -= 1.0;
        for t in 1..n {
            g.trans[gold[t - 1] * k + gold[t]] -= 1.0;
        }
        (log_z - self.score(em, gold), g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paths(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..n {
            out = out.into_iter().flat_map(|p| (0..k).map(move |j| [p.clone(), vec![j]].concat())).collect();
        }
        out
    }

    struct Owned {
        k: usize,
        trans: Vec<f64>,
        start: Vec<f64>,
        end: Vec<f64>,
    }

    impl Owned {
        fn view(&self) -> CrfParams<'_> {
            CrfParams { k: self.k, trans: &self.trans, start: &self.start, end: &self.end }
        }
    }

    fn random(seed: u64, n: usize) -> (Owned, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 5;
        let mut r = |m: usize| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let p = Owned { k, trans: r(k * k), start: r(k), end: r(k) };
        let em = (0..n).map(|_| r(k)).collect();
        (p, em)
    }

    #[test]
    fn partition_and_viterbi_match_enumeration() {
        for seed in 0..10 {
            for n in 1..=4 {
                let (p, em) = random(seed, n);
                let crf = p.view();
                let scores: Vec<f64> = paths(n, 5).iter().map(|q| crf.score(&em, q)).collect();
                assert!((crf.log_partition(&em) - log_sum_exp(&scores)).abs() < 1e-9);
                let (path, best) = crf.viterbi(&em);
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!((best - max).abs() < 1e-9);
                assert!((crf.score(&em, &path) - max).abs() < 1e-9);
                assert!(allowed_start(path[0]) && path.windows(2).all(|w| allowed(w[0], w[1])));
            }
        }
    }

    #[test]
    fn disallowed_paths_have_no_mass() {
        let (p, em) = random(1, 2);
        let crf = p.view();
        assert_eq!(crf.score(&em, &[0, 2]), f64::NEG_INFINITY);
        assert_eq!(crf.score(&em, &[2, 2]), f64::NEG_INFINITY);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (mut p, mut em) = random(4, 4);
        let gold = vec![1, 2, 0, 3];
        let (_, g) = p.view().nll(&em, &gold);
        let h = 1e-6;
        let f = |p: &Owned, em: &[Vec<f64>]| p.view().nll(em, &gold).0;
        for t in 0..4 {
            for j in 0..5 {
                em[t][j] += h;
                let up = f(&p, &em);
                em[t][j] -= 2.0 * h;
                let down = f(&p, &em);
                em[t][j] += h;
                assert!(((up - down) / (2.0 * h) - g.emissions[t][j]).abs() < 1e-6);
            }
        }
        for i in 0..25 {
            p.trans[i] += h;
            let up = f(&p, &em);
            p.trans[i] -= 2.0 * h;
            let down = f(&p, &em);
            p.trans[i] += h;
            let num = (up - down) / (2.0 * h);
            assert!((num - g.trans[i]).abs() < 1e-6, "trans {i}: {num} vs {}", g.trans[i]);
        }
        for j in 0..5 {
            p.start[j] += h;
            let up = f(&p, &em);
            p.start[j] -= 2.0 * h;
            let down = f(&p, &em);
            p.start[j] += h;
            assert!(((up - down) / (2.0 * h) - g.start[j]).abs() < 1e-6);
            p.end[j] += h;
            let up = f(&p, &em);
            p.end[j] -= 2.0 * h;
            let down = f(&p, &em);
            p.end[j] += h;
            assert!(((up - down) / (2.0 * h) - g.end[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_sequence() {
        let (p, _) = random(0, 0);
        assert_eq!(p.view().log_partition(&[]), 0.0);
        assert_eq!(p.view().viterbi(&[]).0, Vec::<usize>::new());
        assert_eq!(p.view().nll(&[], &[]).0, 0.0);
    }
}
