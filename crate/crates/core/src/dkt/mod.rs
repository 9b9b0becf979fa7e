//! LSTM knowledge tracing.
//!
//! The tracer is trained on holdout students only. Its hidden state just
//! before an anchor attempt, together with predicted success on the anchor's
//! skill and on the outcome's skill, forms the pre-treatment covariates.

mod features;
pub mod lstm;

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventLog, InteractionEvent};
use crate::seeds;

pub use features::{ExtractDiagnostics, KnowledgeFeatures, extract_features, feature_names, features_at};
use lstm::{EncodedSeq, Shape, State};

#[derive(Debug, Error, PartialEq)]
pub enum DktError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("labels are all {0}; AUC is undefined")]
    DegenerateLabels(bool),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no training sequence with at least two attempts")]
    EmptyTrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DktConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Students per optimizer step.
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            hidden_dim: 50,
            embed_dim: 64,
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 8,
            max_seq_len: 200,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl DktConfig {
    pub fn validate(&self) -> Result<(), DktError> {
        let bad = |m: &str| Err(DktError::InvalidConfig(m.into()));
        if self.hidden_dim < 1 || self.embed_dim < 1 {
            return bad("hidden_dim and embed_dim must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size < 1 || self.max_seq_len < 1 {
            return bad("batch_size and max_seq_len must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        Ok(())
    }
}

/// Item and skill vocabularies. Index 0 is the reserved unknown slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub items: Vec<String>,
    pub skills: Vec<String>,
}

impl Vocab {
    pub fn from_log(log: &EventLog) -> Vocab {
        let mut items: Vec<String> = log.events().iter().map(|e| e.problem_id.clone()).collect();
        let mut skills: Vec<String> = log.events().iter().map(|e| e.skill_id.clone()).collect();
        items.sort();
        items.dedup();
        skills.sort();
        skills.dedup();
        Vocab { items, skills }
    }

    pub fn item(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|s| s.as_str().cmp(id)).ok().map(|i| i + 1)
    }

    pub fn skill(&self, id: &str) -> Option<usize> {
        self.skills.binary_search_by(|s| s.as_str().cmp(id)).ok().map(|i| i + 1)
    }

    pub fn n_tokens(&self) -> usize {
        2 * (self.items.len() + 1)
    }

    pub fn n_skill_slots(&self) -> usize {
        self.skills.len() + 1
    }

    /// Encodes a sequence; unknown ids map to slot 0.
    pub fn encode(&self, evs: &[InteractionEvent]) -> EncodedSeq {
        let mut s = EncodedSeq::default();
        for e in evs {
            let item = self.item(&e.problem_id).unwrap_or(0);
            s.tokens.push(2 * item + e.correct as usize);
            s.skills.push(self.skill(&e.skill_id).unwrap_or(0));
            s.labels.push(e.correct);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-prediction BCE over the epoch.
    pub loss: f64,
    /// Training AUC of the predictions made during the epoch.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktModel {
    pub config: DktConfig,
    pub vocab: Vocab,
    pub shape: Shape,
    pub params: Vec<f64>,
    pub curve: Vec<EpochStats>,
}

impl DktModel {
    /// Random initialization; forget-gate biases start at 1.
    pub fn init(vocab: Vocab, config: &DktConfig) -> DktModel {
        let shape = Shape {
            n_tokens: vocab.n_tokens(),
            embed: config.embed_dim,
            hidden: config.hidden_dim,
            n_skills: vocab.n_skill_slots(),
        };
        let mut rng = seeds::stream(config.seed, "dkt-init", 0);
        let mut params = vec![0.0; shape.n_params()];
        let r = 1.0 / (config.hidden_dim as f64).sqrt();
        for v in &mut params[..shape.off_w()] {
            *v = rng.random_range(-0.1..0.1);
        }
        for v in &mut params[shape.off_w()..shape.off_b()] {
            *v = rng.random_range(-r..r);
        }
        let hd = shape.hidden;
        for v in &mut params[shape.off_b() + hd..shape.off_b() + 2 * hd] {
            *v = 1.0;
        }
        for v in &mut params[shape.off_v()..shape.off_c()] {
            *v = rng.random_range(-r..r);
        }
        DktModel {
            config: config.clone(),
            vocab,
            shape,
            params,
            curve: Vec::new(),
        }
    }

    pub fn initial_state(&self) -> State {
        State::zeros(self.shape.hidden)
    }

    pub fn step(&self, state: &State, token: usize) -> State {
        lstm::step(&self.shape, &self.params, state, token)
    }

    /// Success probability on `skill` (a vocabulary slot) from `h`.
    pub fn predict(&self, h: &[f64], skill: usize) -> f64 {
        lstm::sigmoid(lstm::logit(&self.shape, &self.params, h, skill))
    }

    /// Predicted probabilities for every attempt of an encoded sequence.
    pub fn predict_seq(&self, seq: &EncodedSeq) -> Vec<f64> {
        let mut probs = Vec::with_capacity(seq.len());
        let mut state = self.initial_state();
        let mut lo = 0;
        while lo < seq.len() {
            let hi = (lo + self.config.max_seq_len).min(seq.len());
            for t in lo..hi {
                probs.push(self.predict(&state.h, seq.skills[t]));
                state = self.step(&state, seq.tokens[t]);
            }
            lo = hi;
        }
        probs
    }

    /// Mean BCE over `seqs`.
    pub fn loss(&self, seqs: &[EncodedSeq]) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for s in seqs {
            total += lstm::forward(&self.shape, &self.params, s, &self.initial_state()).0;
            n += s.len();
        }
        total / n.max(1) as f64
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains on every student with at least two attempts.
pub fn train_dkt(holdout: &EventLog, cfg: &DktConfig) -> Result<DktModel, DktError> {
    cfg.validate()?;
    let vocab = Vocab::from_log(holdout);
    let seqs: Vec<EncodedSeq> = holdout
        .students()
        .filter(|(_, evs)| evs.len() >= 2)
        .map(|(_, evs)| vocab.encode(evs))
        .collect();
    if seqs.is_empty() {
        return Err(DktError::EmptyTrainingSet);
    }
    let mut model = DktModel::init(vocab, cfg);
    train_on(&mut model, &seqs)?;
    Ok(model)
}

/// Runs `model.config.epochs` epochs of minibatch Adam over `seqs`.
pub fn train_on(model: &mut DktModel, seqs: &[EncodedSeq]) -> Result<(), DktError> {
    let cfg = model.config.clone();
    let n_params = model.shape.n_params();
    let mut adam = Adam::new(n_params);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeds::stream(cfg.seed, "dkt-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let (mut ep_loss, mut ep_n) = (0.0, 0usize);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let shape = model.shape;
            let params = &model.params;
            let parts: Vec<(Vec<f64>, f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = vec![0.0; n_params];
                    let (l, pr) = lstm::seq_grad(&shape, params, &seqs[i], cfg.max_seq_len, &mut g);
                    (g, l, pr)
                })
                .collect();
            let n_pred: usize = chunk.iter().map(|&i| seqs[i].len()).sum();
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for ((g, l, pr), &i) in parts.into_iter().zip(chunk) {
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                loss += l;
                scores.extend(pr);
                labels.extend_from_slice(&seqs[i].labels);
            }
            if !loss.is_finite() {
                return Err(DktError::NonFiniteLoss { epoch, batch });
            }
            let inv = 1.0 / n_pred as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            clip(&mut grad, cfg.grad_clip);
            adam.update(&mut model.params, &grad, cfg.learning_rate);
            ep_loss += loss;
            ep_n += n_pred;
        }
        model.curve.push(EpochStats {
            epoch,
            loss: ep_loss / ep_n as f64,
            auc: auc(&scores, &labels).ok(),
        });
    }
    Ok(())
}

/// ROC-AUC by the rank-sum formula with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, DktError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(DktError::DegenerateLabels(false));
    }
    if n_neg == 0 {
        return Err(DktError::DegenerateLabels(true));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC over next-attempt predictions (every attempt after the first).
pub fn evaluate_auc(model: &DktModel, eval: &EventLog) -> Result<f64, DktError> {
    let per: Vec<(Vec<f64>, Vec<bool>)> = eval
        .students()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(_, evs)| {
            let seq = model.vocab.encode(evs);
            let probs = model.predict_seq(&seq);
            (probs[1.min(probs.len())..].to_vec(), seq.labels[1.min(seq.len())..].to_vec())
        })
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, l) in per {
        scores.extend(s);
        labels.extend(l);
    }
    auc(&scores, &labels)
}

/// Max relative error between the analytic gradient of the summed loss on
/// `probe` and central differences, over every parameter. The probe is
/// backpropagated as a single window so the analytic gradient is exact.
pub fn grad_check(model: &DktModel, probe: &EncodedSeq, eps: f64) -> f64 {
    let shape = model.shape;
    let mut grad = vec![0.0; shape.n_params()];
    lstm::seq_grad(&shape, &model.params, probe, probe.len().max(1), &mut grad);
    let init = model.initial_state();
    let mut p = model.params.clone();
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + eps;
        let up = lstm::forward(&shape, &p, probe, &init).0;
        p[k] = orig - eps;
        let down = lstm::forward(&shape, &p, probe, &init).0;
        p[k] = orig;
        let num = (up - down) / (2.0 * eps);
        let err = (grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
