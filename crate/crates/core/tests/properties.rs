use std::collections::BTreeSet;

use causal_kt::analysis::{propensity_histogram, robustness_value, trim_by_propensity};
use causal_kt::checkpoint;
use causal_kt::dkt::auc;
use causal_kt::estimators::{
    EffectEstimate, Estimand, NuisanceEstimates, bonferroni, residualize,
};
use causal_kt::sample::{SamplePolicy, build_samples};
use causal_kt::seeds::derive_seed;
use causal_kt::sim::{SimConfig, simulate_population};
use proptest::prelude::*;

fn small_sim(seed: u64, n: usize) -> SimConfig {
    SimConfig {
        n_students: n,
        n_problems: 60,
        n_skills: 6,
        seed,
        ..SimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bonferroni_is_capped_scaling(p in prop::collection::vec(0.0f64..=1.0, 1..20), extra in 0usize..5) {
        let m = p.len() + extra;
        let adj = bonferroni(&p, m);
        for (a, q) in adj.iter().zip(&p) {
            prop_assert_eq!(*a, (q * m as f64).min(1.0));
            prop_assert!(*a >= *q);
        }
    }

    #[test]
    fn robustness_value_in_unit_interval(t in -50.0f64..50.0, dof in 1.0f64..1e5, q in 0.01f64..=1.0) {
        let rv = robustness_value(t, dof, q).robustness_value;
        prop_assert!((0.0..=1.0).contains(&rv));
        prop_assert_eq!(rv == 0.0, t == 0.0);
    }

    #[test]
    fn robustness_value_grows_with_t(t in 0.1f64..20.0, dof in 10.0f64..1e4) {
        let a = robustness_value(t, dof, 1.0).robustness_value;
        let b = robustness_value(t * 1.5, dof, 1.0).robustness_value;
        prop_assert!(b > a);
    }

    #[test]
    fn residualize_is_elementwise(rows in prop::collection::vec((0.0f64..=1.0, any::<bool>(), 0.0f64..=1.0, 0.01f64..0.99), 1..50)) {
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let z: Vec<f64> = rows.iter().map(|r| r.1 as u8 as f64).collect();
        let nuisance = NuisanceEstimates {
            m_hat: rows.iter().map(|r| r.2).collect(),
            e_hat: rows.iter().map(|r| r.3).collect(),
        };
        let r = residualize(&y, &z, &nuisance).unwrap();
        for i in 0..rows.len() {
            prop_assert_eq!(r.y_tilde[i], y[i] - nuisance.m_hat[i]);
            prop_assert_eq!(r.z_tilde[i], z[i] - nuisance.e_hat[i]);
        }
    }

    #[test]
    fn effect_interval_brackets_estimate(
        scores in prop::collection::vec(-3.0f64..3.0, 2..80),
        groups in 2usize..10,
    ) {
        let clusters: Vec<usize> = (0..scores.len()).map(|i| i % groups).collect();
        let e = EffectEstimate::from_scores(&scores, &clusters, Estimand::Ate).unwrap();
        prop_assert!(e.ci_low <= e.estimate && e.estimate <= e.ci_high);
        prop_assert!(e.std_error >= 0.0);
        prop_assert!((0.0..=1.0).contains(&e.p_value));
        let one = vec![0; scores.len()];
        prop_assert!(EffectEstimate::from_scores(&scores, &one, Estimand::Ate).is_err());
    }

    #[test]
    fn trimming_accounts_for_every_unit(e in prop::collection::vec(0.0f64..=1.0, 1..200), lo in 0.0f64..0.3, hi in 0.7f64..=1.0) {
        match trim_by_propensity(&e, lo, hi) {
            Ok((kept, report)) => {
                prop_assert_eq!(report.below + report.above + report.kept, e.len());
                prop_assert_eq!(kept.len(), report.kept);
                prop_assert!(report.min <= report.max);
                prop_assert!(kept.iter().all(|&i| e[i] >= lo && e[i] <= hi));
            }
            Err(_) => prop_assert!(e.iter().all(|&v| v < lo || v > hi)),
        }
        let mass: usize = propensity_histogram(&e).iter().map(|b| b.count).sum();
        prop_assert_eq!(mass, e.len());
    }

    #[test]
    fn auc_is_complemented_by_reversed_scores(pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..100)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auc(&flipped, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_rejects_any_flipped_payload_byte(values in prop::collection::vec(-1e6f64..1e6, 1..30), pos in any::<prop::sample::Index>()) {
        let bytes = checkpoint::to_bytes("test", &values);
        let back: Vec<f64> = checkpoint::from_bytes("test", &bytes, "mem").unwrap();
        prop_assert_eq!(&back, &values);
        let mut bad = bytes.clone();
        let i = pos.index(bad.len());
        bad[i] ^= 0x01;
        prop_assert!(checkpoint::from_bytes::<Vec<f64>>("test", &bad, "mem").is_err());
    }

    #[test]
    fn stage_seeds_are_deterministic_and_distinct(seed in any::<u64>()) {
        let labels = ["simulate", "sample", "dkt", "estimate", "analyze"];
        let a: Vec<u64> = labels.iter().map(|l| derive_seed(seed, l)).collect();
        let b: Vec<u64> = labels.iter().map(|l| derive_seed(seed, l)).collect();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), labels.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_truth_is_consistent(seed in 0u64..1000) {
        let cfg = small_sim(seed, 30);
        let (log, gt) = simulate_population(&cfg).unwrap();
        let (log2, gt2) = simulate_population(&cfg).unwrap();
        prop_assert_eq!(&gt.units, &gt2.units);
        prop_assert!(log.same_content(&log2));
        for u in &gt.units {
            prop_assert!((0.0..1.0).contains(&u.e));
            prop_assert!((-1.0..=1.0).contains(&u.tau));
            prop_assert!((0.0..=1.0).contains(&u.p));
            let ev = log.event(&u.student_id, u.seq_index).unwrap();
            prop_assert_eq!(ev.tutored, u.treated);
            if !gt.help_seekers[&u.student_id] {
                prop_assert_eq!(u.e, 0.0);
            }
        }
        for (_, evs) in log.students() {
            prop_assert!(evs.len() >= cfg.seq_len_range[0] && evs.len() <= cfg.seq_len_range[1]);
            for (k, e) in evs.iter().enumerate() {
                prop_assert_eq!(e.seq_index, k);
                if k > 0 {
                    prop_assert!(evs[k - 1].timestamp < e.timestamp);
                    prop_assert!(!(evs[k - 1].tutored && e.tutored));
                }
            }
        }
    }

    #[test]
    fn samples_respect_sutva_and_conservation(seed in 0u64..1000, offset in 1usize..6) {
        let (log, _) = simulate_population(&small_sim(seed, 80)).unwrap();
        let policy = SamplePolicy { placebo_offset: offset, seed, ..SamplePolicy::default() };
        let Ok(s) = build_samples(&log, &policy) else { return Ok(()) };
        let treated: BTreeSet<&str> = s.treated.iter().map(|r| r.student_id.as_str()).collect();
        let control: BTreeSet<&str> = s.control.iter().map(|r| r.student_id.as_str()).collect();
        let holdout: BTreeSet<&str> = s.holdout.student_ids().collect();
        prop_assert!(treated.is_disjoint(&control));
        prop_assert!(holdout.is_disjoint(&control));
        prop_assert!(holdout.is_disjoint(&treated));
        for id in &control {
            prop_assert!(log.student(id).unwrap().iter().all(|e| !e.tutored));
        }
        prop_assert!(s.treated.iter().all(|r| r.z == 1 && r.y_next.is_some()));
        prop_assert!(s.control.iter().all(|r| r.z == 0 && r.y_next.is_some()));
        for r in s.treated.iter().chain(&s.control) {
            prop_assert_eq!(r.y_placebo.is_some(), r.anchor_seq >= offset);
            if let Some(y) = r.y_placebo {
                prop_assert_eq!(y, log.event(&r.student_id, r.anchor_seq - offset).unwrap().correct);
            }
            if let Some(k) = r.next_seq {
                prop_assert!(k > r.anchor_seq);
            }
        }
        prop_assert!(s.flow.check().is_empty(), "flow: {:?}", s.flow.check());
    }
}
