//! Dense f64 primitives with hand-written backward passes. All parameters
//! of a model live in one flat vector; a [`Tensor`] is a named window
//! into it.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn row(&self, r: usize) -> Range<usize> {
        debug_assert!(r < self.rows);
        let start = self.offset + r * self.cols;
        start..start + self.cols
    }

    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.range()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Normal with the given standard deviation (embeddings).
    Normal(f64),
    /// Glorot uniform over rows + cols.
    Glorot,
}

/// Hands out consecutive tensors and remembers how to initialize them.
#[derive(Debug, Clone, Default)]
pub struct Alloc {
    size: usize,
    tensors: Vec<(String, Tensor, Init)>,
}

impl Alloc {
    pub fn tensor(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Tensor {
        let t = Tensor { offset: self.size, rows, cols };
        self.size += rows * cols;
        self.tensors.push((name.to_string(), t, init));
        t
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, Tensor)> {
        self.tensors.iter().map(|(n, t, _)| (n.as_str(), *t))
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.size];
        for (_, t, init) in &self.tensors {
            let out = t.of_mut(&mut p);
            match *init {
                Init::Zero => {}
                Init::Normal(sd) => out.iter_mut().for_each(|x| *x = sd * standard_normal(rng)),
                Init::Glorot => {
                    let a = (6.0 / (t.rows + t.cols) as f64).sqrt();
                    out.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                }
            }
        }
        p
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// y += W x, with W stored row-major as `t`.
pub fn matvec(p: &[f64], t: Tensor, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), t.cols);
    debug_assert_eq!(y.len(), t.rows);
    let w = t.of(p);
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &w[r * t.cols..(r + 1) * t.cols];
        *yr += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Backward of `y += W x`: gW += gy xᵀ and, when given, gx += Wᵀ gy.
pub fn matvec_backward(p: &[f64], t: Tensor, x: &[f64], gy: &[f64], g: &mut [f64], gx: Option<&mut [f64]>) {
    let gw = t.of_mut(g);
    for (r, gyr) in gy.iter().enumerate() {
        if *gyr == 0.0 {
            continue;
        }
        let row = &mut gw[r * t.cols..(r + 1) * t.cols];
        row.iter_mut().zip(x).for_each(|(a, b)| *a += gyr * b);
    }
    if let Some(gx) = gx {
        let w = t.of(p);
        for (r, gyr) in gy.iter().enumerate() {
            if *gyr == 0.0 {
                continue;
            }
            let row = &w[r * t.cols..(r + 1) * t.cols];
            gx.iter_mut().zip(row).for_each(|(a, b)| *a += gyr * b);
        }
    }
}

pub fn add_bias(p: &[f64], b: Tensor, y: &mut [f64]) {
    y.iter_mut().zip(b.of(p)).for_each(|(a, b)| *a += b);
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += k * b);
}

/// Gated recurrent unit over a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    wz: Tensor,
    wr: Tensor,
    wn: Tensor,
    uz: Tensor,
    ur: Tensor,
    un: Tensor,
    bz: Tensor,
    br: Tensor,
    bn: Tensor,
    bun: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct GruCache {
    xs: Vec<Vec<f64>>,
    /// hs[0] is the zero initial state; hs[t + 1] follows xs[t].
    pub hs: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

impl Gru {
    pub fn new(alloc: &mut Alloc, name: &str, input: usize, hidden: usize) -> Gru {
        let mut w = |suffix: &str, cols: usize| alloc.tensor(&format!("{name}.{suffix}"), hidden, cols, Init::Glorot);
        let (wz, wr, wn) = (w("wz", input), w("wr", input), w("wn", input));
        let (uz, ur, un) = (w("uz", hidden), w("ur", hidden), w("un", hidden));
        let mut b = |suffix: &str| alloc.tensor(&format!("{name}.{suffix}"), hidden, 1, Init::Zero);
        let (bz, br, bn, bun) = (b("bz"), b("br"), b("bn"), b("bun"));
        Gru { input, hidden, wz, wr, wn, uz, ur, un, bz, br, bn, bun }
    }

    pub fn forward(&self, p: &[f64], xs: &[Vec<f64>]) -> GruCache {
        let h = self.hidden;
        let mut c = GruCache { xs: xs.to_vec(), hs: vec![vec![0.0; h]], ..Default::default() };
        for x in xs {
            let prev = c.hs.last().unwrap().clone();
            let gate = |w: Tensor, u: Tensor, b: Tensor| {
                let mut a = vec![0.0; h];
                matvec(p, w, x, &mut a);
                matvec(p, u, &prev, &mut a);
                add_bias(p, b, &mut a);
                a.into_iter().map(sigmoid).collect::<Vec<f64>>()
            };
            let z = gate(self.wz, self.uz, self.bz);
            let r = gate(self.wr, self.ur, self.br);
            let mut m = vec![0.0; h];
            matvec(p, self.un, &prev, &mut m);
            add_bias(p, self.bun, &mut m);
            let mut a = vec![0.0; h];
            matvec(p, self.wn, x, &mut a);
            add_bias(p, self.bn, &mut a);
            let n: Vec<f64> = (0..h).map(|i| (a[i] + r[i] * m[i]).tanh()).collect();
            let next: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * prev[i]).collect();
            c.z.push(z);
            c.r.push(r);
            c.n.push(n);
            c.m.push(m);
            c.hs.push(next);
        }
        c
    }

    /// Backpropagates gradients on the outputs hs[1..] and returns the
    /// gradients on the inputs.
    pub fn backward(&self, p: &[f64], c: &GruCache, ghs: &[Vec<f64>], g: &mut [f64]) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let steps = c.xs.len();
        let mut gxs = vec![vec![0.0; self.input]; steps];
        let mut carry = vec![0.0; h];
        for t in (0..steps).rev() {
            let prev = &c.hs[t];
            let (z, r, n, m) = (&c.z[t], &c.r[t], &c.n[t], &c.m[t]);
            let dh: Vec<f64> = (0..h).map(|i| ghs[t][i] + carry[i]).collect();
            let mut dprev: Vec<f64> = (0..h).map(|i| dh[i] * z[i]).collect();
            let da_z: Vec<f64> = (0..h).map(|i| dh[i] * (prev[i] - n[i]) * z[i] * (1.0 - z[i])).collect();
            let da_n: Vec<f64> = (0..h).map(|i| dh[i] * (1.0 - z[i]) * (1.0 - n[i] * n[i])).collect();
            let da_r: Vec<f64> = (0..h).map(|i| da_n[i] * m[i] * r[i] * (1.0 - r[i])).collect();
            let dm: Vec<f64> = (0..h).map(|i| da_n[i] * r[i]).collect();
            let x = &c.xs[t];
            let gx = &mut gxs[t];
            matvec_backward(p, self.wn, x, &da_n, g, Some(gx));
            add_into(self.bn.of_mut(g), &da_n);
            matvec_backward(p, self.un, prev, &dm, g, Some(&mut dprev));
            add_into(self.bun.of_mut(g), &dm);
            matvec_backward(p, self.wz, x, &da_z, g, Some(gx));
            matvec_backward(p, self.uz, prev, &da_z, g, Some(&mut dprev));
            add_into(self.bz.of_mut(g), &da_z);
            matvec_backward(p, self.wr, x, &da_r, g, Some(gx));
            matvec_backward(p, self.ur, prev, &da_r, g, Some(&mut dprev));
            add_into(self.br.of_mut(g), &da_r);
            carry = dprev;
        }
        gxs
    }
}

/// Two GRUs reading the sequence in opposite directions; each output is
/// the concatenation [forward state, backward state].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

#[derive(Debug, Clone, Default)]
pub struct BiGruCache {
    fwd: GruCache,
    bwd: GruCache,
    pub states: Vec<Vec<f64>>,
}

impl BiGru {
    pub fn new(alloc: &mut Alloc, name: &str, input: usize, hidden: usize) -> BiGru {
        BiGru {
            fwd: Gru::new(alloc, &format!("{name}.fwd"), input, hidden),
            bwd: Gru::new(alloc, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn output(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn forward(&self, p: &[f64], xs: &[Vec<f64>]) -> BiGruCache {
        let fwd = self.fwd.forward(p, xs);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let bwd = self.bwd.forward(p, &rev);
        let n = xs.len();
        let states = (0..n)
            .map(|t| {
                let mut s = fwd.hs[t + 1].clone();
                s.extend_from_slice(&bwd.hs[n - t]);
                s
            })
            .collect();
        BiGruCache { fwd, bwd, states }
    }

    pub fn backward(&self, p: &[f64], c: &BiGruCache, gstates: &[Vec<f64>], g: &mut [f64]) -> Vec<Vec<f64>> {
        let n = gstates.len();
        let hf = self.fwd.hidden;
        let gf: Vec<Vec<f64>> = gstates.iter().map(|s| s[..hf].to_vec()).collect();
        let gb: Vec<Vec<f64>> = (0..n).map(|t| gstates[n - 1 - t][hf..].to_vec()).collect();
        let mut gx = self.fwd.backward(p, &c.fwd, &gf, g);
        let gx_rev = self.bwd.backward(p, &c.bwd, &gb, g);
        for t in 0..n {
            add_into(&mut gx[t], &gx_rev[n - 1 - t]);
        }
        gx
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 && self.m[i] == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
