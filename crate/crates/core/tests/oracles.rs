mod common;

use proptest::prelude::*;
use sasrecllm::metrics::{
    compute_auc, compute_log_loss, compute_uauc, confusion_report, relative_improvement, MetricReport, ScoredExample,
};
use sasrecllm::nn::{causal_mask, multi_head_attention};
use sasrecllm::tensor::{bce_loss, matmul, softmax_rows};
use sasrecllm::{ParamStore, Real, RngStream, Tape, Tensor};

fn scored() -> impl Strategy<Value = Vec<ScoredExample>> {
    // coarse scores force plenty of ties
    prop::collection::vec((0usize..6, any::<bool>(), 0u8..12), 1..=200).prop_map(|v| {
        v.into_iter()
            .map(|(u, y, s)| ScoredExample::new(u, y as u8 as Real, s as Real / 11.0))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fast_auc_equals_double_loop(xs in scored()) {
        prop_assert_eq!(compute_auc(&xs), common::auc_double_loop(&xs));
    }

    #[test]
    fn uauc_is_mean_of_per_user_double_loops(xs in scored()) {
        let mut per_user = std::collections::BTreeMap::<usize, Vec<ScoredExample>>::new();
        for e in &xs {
            per_user.entry(e.user).or_default().push(*e);
        }
        let vals: Vec<Real> = per_user.values().filter_map(|g| common::auc_double_loop(g)).collect();
        let u = compute_uauc(&xs);
        prop_assert_eq!(u.users, vals.len());
        prop_assert_eq!(u.skipped_users, per_user.len() - vals.len());
        match u.value {
            None => prop_assert!(vals.is_empty()),
            Some(v) => prop_assert!((v - common::mean(&vals)).abs() < 1e-12),
        }
    }

    #[test]
    fn log_loss_is_mean_bce(v in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..200)) {
        let xs: Vec<ScoredExample> = v.iter().map(|&(y, p)| ScoredExample::new(0, y as u8 as Real, p)).collect();
        let direct: Real = xs.iter().map(|e| bce_loss(e.score, e.label).unwrap()).sum::<Real>() / xs.len() as Real;
        prop_assert!((compute_log_loss(&xs).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn confusion_metrics_are_consistent(xs in scored()) {
        let c = confusion_report(&xs, 0.5);
        let n = xs.len() as Real;
        let correct = xs.iter().filter(|e| (e.score >= 0.5) == (e.label >= 0.5)).count() as Real;
        prop_assert!((c.accuracy - correct / n).abs() < 1e-12);
        if c.precision + c.recall > 0.0 {
            let f1 = 2.0 * c.precision * c.recall / (c.precision + c.recall);
            prop_assert!((c.f1 - f1).abs() < 1e-12);
        }
        for m in [c.precision, c.recall, c.f1, c.accuracy] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms(xs in scored()) {
        let t: Vec<ScoredExample> = xs.iter().map(|e| ScoredExample::new(e.user, e.label, (3.0 * e.score).exp())).collect();
        prop_assert_eq!(compute_auc(&xs), compute_auc(&t));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = Tensor::randn(&[rows, cols], 3.0, &mut RngStream::new(seed));
        let y = softmax_rows(&x);
        for i in 0..rows {
            let s: Real = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&p| p > 0.0));
        }
        let shifted = softmax_rows(&x.map(|v| v + shift));
        prop_assert!(y.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let s: Real = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
                prop_assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_naive_per_head_loop(
        len in 1usize..7,
        heads in 1usize..4,
        dh in 1usize..4,
        seed in any::<u64>(),
        pad in 0usize..3,
    ) {
        let d = heads * dh;
        let mut rng = RngStream::new(seed);
        let q = Tensor::randn(&[len, d], 1.0, &mut rng);
        let k = Tensor::randn(&[len, d], 1.0, &mut rng);
        let v = Tensor::randn(&[len, d], 1.0, &mut rng);
        // left padding, as in right-aligned sequences; the last key stays valid
        let valid: Vec<bool> = (0..len).map(|j| j >= pad.min(len - 1)).collect();
        let mask = causal_mask(len, len, Some(&valid));
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = multi_head_attention(&mut tape, qv, kv, vv, heads, &mask).unwrap();
        let out = tape.value(out);
        let expect = common::naive_attention(&q, &k, &v, heads, &valid);
        prop_assert!(out.max_abs_diff(&expect) <= 1e-10);
    }
}

#[test]
fn auc_hand_examples() {
    let e = |y: Real, s: Real| ScoredExample::new(0, y, s);
    assert_eq!(compute_auc(&[e(1.0, 0.9), e(0.0, 0.1)]), Some(1.0));
    assert_eq!(compute_auc(&[e(1.0, 0.1), e(0.0, 0.9)]), Some(0.0));
    assert_eq!(compute_auc(&[e(1.0, 0.5), e(0.0, 0.5)]), Some(0.5));
    // 0.8 beats both negatives, 0.4 beats one, 0.2 neither: 3 of 6 pairs
    let xs = [e(1.0, 0.8), e(1.0, 0.4), e(1.0, 0.2), e(0.0, 0.3), e(0.0, 0.6)];
    assert_eq!(compute_auc(&xs), Some(3.0 / 6.0));
    assert_eq!(compute_auc(&[e(1.0, 0.3), e(1.0, 0.4)]), None);
}

#[test]
fn relative_improvement_of_reference_values() {
    // AUC 0.696 / UAUC 0.685 against a baseline at 0.648 / 0.641
    let r = relative_improvement(0.696, 0.685, 0.648, 0.641) * 100.0;
    assert!((r - 7.14).abs() < 0.1, "{r}");
    assert!((r - 7.135).abs() < 1e-3);
}

#[test]
fn aggregate_uses_sample_standard_deviation() {
    let mk = |auc: Real| MetricReport {
        auc: Some(auc),
        ..MetricReport::evaluate(&[ScoredExample::new(0, 1.0, 0.7), ScoredExample::new(0, 0.0, 0.2)]).unwrap()
    };
    let agg = MetricReport::aggregate(&[mk(0.6), mk(0.7), mk(0.8)]).unwrap();
    assert!((agg.auc.unwrap() - 0.7).abs() < 1e-12);
    assert!((agg.stddev.unwrap().auc - 0.1).abs() < 1e-12);
}
