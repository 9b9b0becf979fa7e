//! Flat-parameter LSTM with a per-skill sigmoid head.
//!
//! Event `t` is predicted from the state after consuming events `0..t`
//! (the zero state for `t = 0`), then its `(item, correct)` token is fed in.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n_tokens: usize,
    pub embed: usize,
    pub hidden: usize,
    pub n_skills: usize,
}

impl Shape {
    pub fn n_params(&self) -> usize {
        self.off_c() + self.n_skills
    }
    pub fn off_emb(&self) -> usize {
        0
    }
    pub fn off_w(&self) -> usize {
        self.n_tokens * self.embed
    }
    pub fn w_cols(&self) -> usize {
        self.embed + self.hidden
    }
    pub fn off_b(&self) -> usize {
        self.off_w() + 4 * self.hidden * self.w_cols()
    }
    pub fn off_v(&self) -> usize {
        self.off_b() + 4 * self.hidden
    }
    pub fn off_c(&self) -> usize {
        self.off_v() + self.n_skills * self.hidden
    }
}

/// An encoded attempt sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodedSeq {
    pub tokens: Vec<usize>,
    pub skills: Vec<usize>,
    pub labels: Vec<bool>,
}

impl EncodedSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
    fn window(&self, lo: usize, hi: usize) -> EncodedSeq {
        EncodedSeq {
            tokens: self.tokens[lo..hi].to_vec(),
            skills: self.skills[lo..hi].to_vec(),
            labels: self.labels[lo..hi].to_vec(),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigma(z)` for label 1, `-log(1 - sigma(z))` for label 0.
#[inline]
fn bce_logit(z: f64, y: bool) -> f64 {
    let s = if y { -z } else { z };
    // log(1 + e^s)
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl State {
    pub fn zeros(hidden: usize) -> State {
        State {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

struct StepCache {
    x_h: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub fn logit(shape: &Shape, p: &[f64], h: &[f64], skill: usize) -> f64 {
    let v = &p[shape.off_v() + skill * shape.hidden..][..shape.hidden];
    p[shape.off_c() + skill] + dot(v, h)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Advances the state by one token.
pub fn step(shape: &Shape, p: &[f64], state: &State, token: usize) -> State {
    step_cached(shape, p, state, token).0
}

fn step_cached(shape: &Shape, p: &[f64], state: &State, token: usize) -> (State, StepCache) {
    let (de, hd) = (shape.embed, shape.hidden);
    let cols = shape.w_cols();
    let mut x_h = Vec::with_capacity(cols);
    x_h.extend_from_slice(&p[shape.off_emb() + token * de..][..de]);
    x_h.extend_from_slice(&state.h);
    let w = &p[shape.off_w()..shape.off_b()];
    let b = &p[shape.off_b()..shape.off_v()];
    let mut a = vec![0.0; 4 * hd];
    for (r, ar) in a.iter_mut().enumerate() {
        *ar = b[r] + dot(&w[r * cols..(r + 1) * cols], &x_h);
    }
    let i: Vec<f64> = a[..hd].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = a[hd..2 * hd].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = a[2 * hd..3 * hd].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = a[3 * hd..].iter().map(|&v| v.tanh()).collect();
    let c: Vec<f64> = (0..hd).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();
    (
        State { h, c },
        StepCache {
            x_h,
            i,
            f,
            o,
            g,
            c_prev: state.c.clone(),
            tanh_c,
        },
    )
}

/// Summed BCE and the predicted probabilities over `seq`, starting from `init`.
pub fn forward(shape: &Shape, p: &[f64], seq: &EncodedSeq, init: &State) -> (f64, Vec<f64>, State) {
    let mut state = init.clone();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let z = logit(shape, p, &state.h, seq.skills[t]);
        loss += bce_logit(z, seq.labels[t]);
        probs.push(sigmoid(z));
        state = step(shape, p, &state, seq.tokens[t]);
    }
    (loss, probs, state)
}

/// Summed BCE of one window and its gradient added into `grad`. The incoming
/// state is treated as a constant.
pub fn backward_window(
    shape: &Shape,
    p: &[f64],
    seq: &EncodedSeq,
    init: &State,
    grad: &mut [f64],
) -> (f64, Vec<f64>, State) {
    let (de, hd) = (shape.embed, shape.hidden);
    let cols = shape.w_cols();
    let n = seq.len();
    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut dlogits = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut loss = 0.0;
    let mut state = init.clone();
    for t in 0..n {
        let z = logit(shape, p, &state.h, seq.skills[t]);
        loss += bce_logit(z, seq.labels[t]);
        let s = sigmoid(z);
        probs.push(s);
        dlogits.push(s - if seq.labels[t] { 1.0 } else { 0.0 });
        hs.push(state.h.clone());
        let (next, cache) = step_cached(shape, p, &state, seq.tokens[t]);
        caches.push(cache);
        state = next;
    }

    let (off_w, off_b, off_v, off_c) = (shape.off_w(), shape.off_b(), shape.off_v(), shape.off_c());
    let mut dh = vec![0.0; hd];
    let mut dc = vec![0.0; hd];
    let mut da = vec![0.0; 4 * hd];
    for t in (0..n).rev() {
        let cache = &caches[t];
        // through the state update that consumed token t
        for k in 0..hd {
            let tc = cache.tanh_c[k];
            let dck = dc[k] + dh[k] * cache.o[k] * (1.0 - tc * tc);
            let (i, f, o, g) = (cache.i[k], cache.f[k], cache.o[k], cache.g[k]);
            da[k] = dck * g * i * (1.0 - i);
            da[hd + k] = dck * cache.c_prev[k] * f * (1.0 - f);
            da[2 * hd + k] = dh[k] * tc * o * (1.0 - o);
            da[3 * hd + k] = dck * i * (1.0 - g * g);
            dc[k] = dck * f;
        }
        let mut dxh = vec![0.0; cols];
        for r in 0..4 * hd {
            let ar = da[r];
            if ar == 0.0 {
                continue;
            }
            grad[off_b + r] += ar;
            let wrow = &p[off_w + r * cols..][..cols];
            let grow = &mut grad[off_w + r * cols..][..cols];
            for j in 0..cols {
                grow[j] += ar * cache.x_h[j];
                dxh[j] += ar * wrow[j];
            }
        }
        let e0 = seq.tokens[t] * de;
        for j in 0..de {
            grad[e0 + j] += dxh[j];
        }
        dh.copy_from_slice(&dxh[de..]);
        // loss at t reads h before token t
        let s = seq.skills[t];
        let dl = dlogits[t];
        grad[off_c + s] += dl;
        let v = &p[off_v + s * hd..][..hd];
        let gv = &mut grad[off_v + s * hd..][..hd];
        for k in 0..hd {
            gv[k] += dl * hs[t][k];
            dh[k] += dl * v[k];
        }
    }
    (loss, probs, state)
}

/// Loss and gradient of a whole sequence processed in windows of `max_len`,
/// carrying state across windows.
pub fn seq_grad(shape: &Shape, p: &[f64], seq: &EncodedSeq, max_len: usize, grad: &mut [f64]) -> (f64, Vec<f64>) {
    let mut state = State::zeros(shape.hidden);
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(seq.len());
    let mut lo = 0;
    while lo < seq.len() {
        let hi = (lo + max_len).min(seq.len());
        let (l, pr, next) = backward_window(shape, p, &seq.window(lo, hi), &state, grad);
        loss += l;
        probs.extend(pr);
        state = next;
        lo = hi;
    }
    (loss, probs)
}
