//! Synthetic event logs with known potential outcomes.
//!
//! Each student has a latent ability `θ` that grows by a fixed increment per
//! attempt. The success probability of an attempt is
//! `guess + (1 - guess - slip) * logistic((θ - difficulty) / scale)` plus any
//! pending tutoring boost. Help-seeking students request tutoring with
//! probability `clamp(base + strength * (1 - p), 0.01, 0.95)`, so they ask
//! exactly when they are least likely to succeed. Tutoring raises the success
//! probability of the next attempt by `τ` and of the one after by `τ / 2`.
//! Potential outcomes of the next attempt are drawn with common random numbers
//! and stored next to the factual log.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventLog, Gender, InteractionEvent, Provenance, SessionMeta, StudentContext};
use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no ground-truth unit satisfies the selection")]
    EmptySelection,
}

/// Shape of the true treatment effect on the next attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectFn {
    Constant { c: f64 },
    /// `τ = a + b * mastery`, mastery being the untreated logistic success
    /// term of the next attempt.
    LinearInMastery { a: f64, b: f64 },
    Zero,
}

impl EffectFn {
    pub fn eval(&self, mastery: f64) -> f64 {
        match *self {
            EffectFn::Constant { c } => c,
            EffectFn::LinearInMastery { a, b } => a + b * mastery,
            EffectFn::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub sd: f64,
}

/// Generator for the optional student-context table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextSim {
    pub pretest_mean: f64,
    pub pretest_scale: f64,
    /// Measurement noise of the pretest in standardized units.
    pub pretest_noise_sd: f64,
    pub low_ses_rate: f64,
    /// Log-odds shift of low-SES status per SD of initial ability.
    pub low_ses_ability_slope: f64,
    pub n_schools: usize,
}

impl Default for ContextSim {
    fn default() -> Self {
        ContextSim {
            pretest_mean: 210.0,
            pretest_scale: 15.0,
            pretest_noise_sd: 0.5,
            low_ses_rate: 0.3,
            low_ses_ability_slope: -0.5,
            n_schools: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_students: usize,
    pub n_problems: usize,
    pub n_skills: usize,
    /// Inclusive `[min, max]` attempts per student.
    pub seq_len_range: [usize; 2],
    pub ability_dist: NormalParams,
    pub learning_rate: f64,
    /// Problem-level difficulty around its skill offset.
    pub difficulty_dist: NormalParams,
    /// SD of the per-skill difficulty offset shared by all its problems.
    pub skill_difficulty_sd: f64,
    /// Inclusive `[min, max]` consecutive attempts on one skill.
    pub block_len_range: [usize; 2],
    pub selection_strength: f64,
    pub base_treat_prob: f64,
    /// Fraction of students who ever consider requesting help.
    pub help_seeker_fraction: f64,
    pub effect_fn: EffectFn,
    /// Logistic scale of the success curve.
    pub outcome_noise: f64,
    pub guess: f64,
    pub slip: f64,
    /// Persistent success-probability gain after a student's first session,
    /// starting three attempts after it.
    pub carryover: f64,
    pub context: ContextSim,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_students: 2000,
            n_problems: 300,
            n_skills: 30,
            seq_len_range: [15, 35],
            ability_dist: NormalParams { mean: 0.5, sd: 0.3 },
            learning_rate: 0.01,
            difficulty_dist: NormalParams { mean: 0.0, sd: 0.3 },
            skill_difficulty_sd: 1.5,
            block_len_range: [3, 6],
            selection_strength: 1.0,
            base_treat_prob: 0.02,
            help_seeker_fraction: 0.5,
            effect_fn: EffectFn::Constant { c: 0.04 },
            outcome_noise: 1.0,
            guess: 0.05,
            slip: 0.1,
            carryover: 0.0,
            context: ContextSim::default(),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_students == 0 {
            return bad("n_students must be positive");
        }
        if self.n_skills < 2 {
            return bad("n_skills must be at least 2");
        }
        if self.n_problems < self.n_skills {
            return bad("n_problems must be at least n_skills");
        }
        let [lo, hi] = self.seq_len_range;
        if lo < 4 || hi < lo {
            return bad("seq_len_range must satisfy 4 <= min <= max");
        }
        let [blo, bhi] = self.block_len_range;
        if blo < 1 || bhi < blo {
            return bad("block_len_range must satisfy 1 <= min <= max");
        }
        if !(self.base_treat_prob > 0.0 && self.base_treat_prob < 1.0) {
            return bad("base_treat_prob must be in (0, 1)");
        }
        if !(self.help_seeker_fraction > 0.0 && self.help_seeker_fraction <= 1.0) {
            return bad("help_seeker_fraction must be in (0, 1]");
        }
        if !(self.selection_strength >= 0.0) {
            return bad("selection_strength must be >= 0");
        }
        if !(self.outcome_noise > 0.0) {
            return bad("outcome_noise must be positive");
        }
        if !(self.guess >= 0.0 && self.slip >= 0.0 && self.guess + self.slip < 1.0) {
            return bad("guess and slip must be >= 0 with guess + slip < 1");
        }
        if !(self.ability_dist.sd >= 0.0
            && self.difficulty_dist.sd >= 0.0
            && self.skill_difficulty_sd >= 0.0)
        {
            return bad("standard deviations must be >= 0");
        }
        if !(self.context.low_ses_rate > 0.0 && self.context.low_ses_rate < 1.0) {
            return bad("context.low_ses_rate must be in (0, 1)");
        }
        if self.context.n_schools == 0 {
            return bad("context.n_schools must be positive");
        }
        Ok(())
    }
}

/// Truth for one candidate analytic unit: an attempt with a following
/// attempt on which tutoring was possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTruth {
    pub unit_id: String,
    pub student_id: String,
    pub seq_index: usize,
    /// Effect on next-attempt success probability.
    pub tau: f64,
    /// Direct effect on the first attempt of the next distinct skill.
    pub tau_skill: f64,
    /// True probability of requesting tutoring on this attempt.
    pub e: f64,
    /// `E[Y_next]` given the latent state: `p0 + e * tau`.
    pub m: f64,
    /// Success probability of this attempt.
    pub p: f64,
    pub mastery_next: f64,
    pub theta: f64,
    pub treated: bool,
    pub y0: bool,
    pub y1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub units: Vec<UnitTruth>,
    /// Latent ability at every attempt, per student.
    pub trajectories: BTreeMap<String, Vec<f64>>,
    pub help_seekers: BTreeMap<String, bool>,
}

impl GroundTruth {
    pub fn unit(&self, student_id: &str, seq_index: usize) -> Option<&UnitTruth> {
        self.units
            .binary_search_by(|u| {
                (u.student_id.as_str(), u.seq_index).cmp(&(student_id, seq_index))
            })
            .ok()
            .map(|i| &self.units[i])
    }

    /// Writes one JSON object per unit.
    pub fn write_jsonl<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        for u in &self.units {
            serde_json::to_writer(&mut out, u)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// Mean true effect over the units accepted by `filter`.
pub fn oracle_ate<F: Fn(&UnitTruth) -> bool>(gt: &GroundTruth, filter: F) -> Result<f64, SimError> {
    let (sum, n) = gt
        .units
        .iter()
        .filter(|u| filter(u))
        .fold((0.0, 0usize), |(s, n), u| (s + u.tau, n + 1));
    if n == 0 {
        return Err(SimError::EmptySelection);
    }
    Ok(sum / n as f64)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn student_id(i: usize) -> String {
    format!("s{i:05}")
}

pub fn unit_id(student_id: &str, seq_index: usize) -> String {
    format!("{student_id}#{seq_index}")
}

struct Problem {
    skill: usize,
    difficulty: f64,
}

struct StudentSim {
    events: Vec<InteractionEvent>,
    sessions: Vec<SessionMeta>,
    context: StudentContext,
    units: Vec<UnitTruth>,
    trajectory: Vec<f64>,
    seeker: bool,
}

/// Draws a population and its ground truth. Deterministic given `cfg.seed`.
pub fn simulate_population(cfg: &SimConfig) -> Result<(EventLog, GroundTruth), SimError> {
    cfg.validate()?;
    let problems = draw_problems(cfg);
    let students: Vec<StudentSim> = (0..cfg.n_students)
        .into_par_iter()
        .map(|i| simulate_student(cfg, &problems, i))
        .collect();

    let mut events = Vec::new();
    let mut sessions = BTreeMap::new();
    let mut context = BTreeMap::new();
    let mut units = Vec::new();
    let mut trajectories = BTreeMap::new();
    let mut help_seekers = BTreeMap::new();
    for s in students {
        let id = s.context.student_id.clone();
        events.extend(s.events);
        for m in s.sessions {
            sessions.insert(m.session_id.clone(), m);
        }
        units.extend(s.units);
        trajectories.insert(id.clone(), s.trajectory);
        help_seekers.insert(id.clone(), s.seeker);
        context.insert(id, s.context);
    }
    let n = events.len();
    let log = EventLog::from_sorted(
        events,
        sessions,
        context,
        Provenance {
            source: format!("simulator(seed={})", cfg.seed),
            format: "sim".to_string(),
            rows_in: n,
            kept: n,
            dropped_malformed: 0,
            deduplicated: 0,
        },
    );
    Ok((
        log,
        GroundTruth {
            units,
            trajectories,
            help_seekers,
        },
    ))
}

fn draw_problems(cfg: &SimConfig) -> Vec<Problem> {
    let mut rng = seeds::stream(cfg.seed, "problems", 0);
    let skill_offsets: Vec<f64> = (0..cfg.n_skills)
        .map(|_| cfg.skill_difficulty_sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    (0..cfg.n_problems)
        .map(|j| {
            let skill = j % cfg.n_skills;
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            Problem {
                skill,
                difficulty: skill_offsets[skill] + cfg.difficulty_dist.mean + cfg.difficulty_dist.sd * z,
            }
        })
        .collect()
}

fn simulate_student(cfg: &SimConfig, problems: &[Problem], index: usize) -> StudentSim {
    let mut rng = seeds::stream(cfg.seed, "student", index as u64);
    let sid = student_id(index);
    let z0: f64 = rng.sample(rand_distr::StandardNormal);
    let theta0 = cfg.ability_dist.mean + cfg.ability_dist.sd * z0;
    let seeker = rng.random::<f64>() < cfg.help_seeker_fraction;
    let len = rng.random_range(cfg.seq_len_range[0]..=cfg.seq_len_range[1]);

    // problem sequence: blocks of consecutive attempts on one skill
    let by_skill: Vec<Vec<usize>> = (0..cfg.n_skills)
        .map(|k| (k..cfg.n_problems).step_by(cfg.n_skills).collect())
        .collect();
    let mut seq = Vec::with_capacity(len);
    let mut last_skill = usize::MAX;
    while seq.len() < len {
        let mut skill = rng.random_range(0..cfg.n_skills);
        if skill == last_skill {
            skill = (skill + 1 + rng.random_range(0..cfg.n_skills - 1)) % cfg.n_skills;
        }
        last_skill = skill;
        let block = rng.random_range(cfg.block_len_range[0]..=cfg.block_len_range[1]);
        for _ in 0..block {
            if seq.len() == len {
                break;
            }
            let pool = &by_skill[skill];
            seq.push(pool[rng.random_range(0..pool.len())]);
        }
    }

    let theta: Vec<f64> = (0..len).map(|t| theta0 + cfg.learning_rate * t as f64).collect();
    let mastery: Vec<f64> = (0..len)
        .map(|t| logistic((theta[t] - problems[seq[t]].difficulty) / cfg.outcome_noise))
        .collect();
    let span = 1.0 - cfg.guess - cfg.slip;
    let base_p: Vec<f64> = mastery.iter().map(|m| cfg.guess + span * m).collect();

    // uniforms for correctness and treatment, drawn up front so both
    // potential outcomes use the same numbers
    let u_correct: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
    let u_treat: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();

    let mut boost = vec![0.0f64; len + 2];
    let mut carry_from = usize::MAX;
    let mut tutored = vec![false; len];
    let mut correct = vec![false; len];
    let mut units = Vec::new();
    let mut sessions = Vec::new();
    let mut session_ids = vec![None; len];
    let start_ts: i64 = 1_700_000_000_000 + index as i64 * 1_000;
    let mut ts = Vec::with_capacity(len);
    let mut clock = start_ts;
    for _ in 0..len {
        ts.push(clock);
        clock += rng.random_range(30_000..300_000);
    }

    let carry = |t: usize, from: usize| if t >= from { cfg.carryover } else { 0.0 };
    for t in 0..len {
        let p = (base_p[t] + boost[t] + carry(t, carry_from)).clamp(0.0, 1.0);
        correct[t] = u_correct[t] < p;
        let cooldown = t > 0 && tutored[t - 1];
        let e = if cooldown || !seeker {
            0.0
        } else {
            (cfg.base_treat_prob + cfg.selection_strength * (1.0 - p)).clamp(0.01, 0.95)
        };
        let z = u_treat[t] < e;
        tutored[t] = z;
        if t + 1 < len && !cooldown {
            let q = (base_p[t + 1] + boost[t + 1] + carry(t + 1, carry_from)).clamp(0.0, 1.0);
            let raw = cfg.effect_fn.eval(mastery[t + 1]);
            let p1 = (q + raw).clamp(0.0, 1.0);
            let tau = p1 - q;
            let skill_t = problems[seq[t]].skill;
            let next_skill = (t + 1..len).find(|&k| problems[seq[k]].skill != skill_t);
            let tau_skill = match next_skill {
                Some(k) if k == t + 1 => tau,
                Some(k) if k == t + 2 => {
                    let q2 = base_p[k];
                    (q2 + raw / 2.0).clamp(0.0, 1.0) - q2
                }
                _ => 0.0,
            };
            units.push(UnitTruth {
                unit_id: unit_id(&sid, t),
                student_id: sid.clone(),
                seq_index: t,
                tau,
                tau_skill,
                e,
                m: q + e * tau,
                p,
                mastery_next: mastery[t + 1],
                theta: theta[t],
                treated: z,
                y0: u_correct[t + 1] < q,
                y1: u_correct[t + 1] < p1,
            });
            if z {
                boost[t + 1] += tau;
                if t + 2 < len {
                    let q2 = (base_p[t + 2] + boost[t + 2]).clamp(0.0, 1.0);
                    boost[t + 2] += (q2 + raw / 2.0).clamp(0.0, 1.0) - q2;
                }
            }
        }
        if z {
            if carry_from == usize::MAX {
                carry_from = t + 3;
            }
            let sess = draw_session(&mut rng, &sid, t, sessions.len() as u32);
            session_ids[t] = Some(sess.session_id.clone());
            sessions.push(sess);
        }
    }

    let events = (0..len)
        .map(|t| InteractionEvent {
            student_id: sid.clone(),
            seq_index: t,
            timestamp: ts[t],
            problem_id: format!("p{:04}", seq[t]),
            skill_id: format!("k{:03}", problems[seq[t]].skill),
            correct: correct[t],
            tutored: tutored[t],
            session_id: session_ids[t].clone(),
            extras: BTreeMap::new(),
        })
        .collect();

    let c = &cfg.context;
    let zp = z0 + c.pretest_noise_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let ses_logit = (c.low_ses_rate / (1.0 - c.low_ses_rate)).ln() + c.low_ses_ability_slope * z0;
    let gender = match rng.random_range(0..3) {
        0 => Gender::A,
        1 => Gender::B,
        _ => Gender::C,
    };
    let context = StudentContext {
        student_id: sid.clone(),
        pretest_score: Some(c.pretest_mean + c.pretest_scale * zp),
        gender: Some(gender),
        low_ses_flag: Some(rng.random::<f64>() < logistic(ses_logit)),
        school_id: Some(format!("sch{:02}", rng.random_range(0..c.n_schools))),
    };
    StudentSim {
        events,
        sessions,
        context,
        units,
        trajectory: theta,
        seeker,
    }
}

/// Session statistics loosely matching typical short chat sessions
/// (median 14 messages, median 4.2 minutes, tutors sending ~60%).
fn draw_session<R: Rng>(rng: &mut R, sid: &str, t: usize, prior: u32) -> SessionMeta {
    let msgs = LogNormal::new(14f64.ln(), 0.70).expect("valid lognormal");
    let total = (msgs.sample(rng).round() as u32).max(2);
    let tutor = Binomial::new(total as u64, 0.6).expect("valid binomial").sample(rng) as u32;
    let dur = LogNormal::new(4.2f64.ln(), 0.78).expect("valid lognormal");
    let share = Beta::new(2.0, 5.5).expect("valid beta");
    SessionMeta {
        session_id: format!("{sid}-t{t}"),
        messages_total: total,
        tutor_messages: tutor,
        student_messages: total - tutor,
        duration_minutes: dur.sample(rng),
        student_word_share: share.sample(rng),
        prior_session_count: prior,
    }
}
