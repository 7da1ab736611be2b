mod common;

use sasrecllm::baselines::{icl_variant, McModel, MfModel, NcfModel, RnnModel};
use sasrecllm::data::{LabeledExample, SplitBundle};
use sasrecllm::synthetic::SyntheticConfig;
use sasrecllm::system::{build_vocab, SystemConfig};
use sasrecllm::training::TrainConfig;
use sasrecllm::{Real, RngStream};

use common::*;

/// Shuffles `xs` with a fixed seed and cuts 70/15/15, stamping timestamps in
/// the shuffled order.
fn bundle_from(mut xs: Vec<LabeledExample>, seed: u64) -> SplitBundle {
    let mut rng = RngStream::new(seed);
    rng.shuffle(&mut xs);
    for (t, e) in xs.iter_mut().enumerate() {
        e.timestamp = t as u64;
    }
    let n = xs.len();
    let test = xs.split_off(n * 85 / 100);
    let validation = xs.split_off(n * 70 / 100);
    SplitBundle {
        train: xs,
        validation,
        test,
        ..Default::default()
    }
}

fn train_cfg(lr: Real, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        patience: 1000,
        peak_lr: lr,
        weight_decay: 0.0,
        seed: 4,
        ..TrainConfig::default()
    }
}

/// `y = [sign(u) = sign(i)]` over a full 24×24 grid: a rank-one pattern.
fn sign_grid() -> Vec<LabeledExample> {
    let mut xs = Vec::new();
    for u in 1..=24 {
        for i in 1..=24 {
            xs.push(ex(u, i, ((u % 2) == (i % 2)) as u8, 0, &[]));
        }
    }
    xs
}

#[test]
fn mf_recovers_a_rank_one_pattern() {
    let b = bundle_from(sign_grid(), 1);
    let mut m = MfModel::new(24, 24, 2, 0.1, 3).unwrap();
    m.observe(&b.train);
    m.fit(&b, &train_cfg(0.05, 60), "mf").unwrap();
    let (rep, _) = m.evaluate(&b.test).unwrap();
    assert!(rep.auc.unwrap() > 0.95, "{rep:?}");
}

#[test]
fn ncf_learns_group_xor() {
    // groups of four: label = group(u) XOR group(i)
    let mut xs = Vec::new();
    for u in 1..=24 {
        for i in 1..=24 {
            xs.push(ex(u, i, ((u / 4) % 2 != (i / 4) % 2) as u8, 0, &[]));
        }
    }
    let b = bundle_from(xs, 2);
    let mut m = NcfModel::new(24, 24, 4, &[16, 8], 0.3, 5).unwrap();
    m.fit(&b, &train_cfg(0.01, 80), "ncf").unwrap();
    let (rep, _) = m.evaluate(&b.test).unwrap();
    assert!(rep.auc.unwrap() > 0.9, "{rep:?}");
}

#[test]
fn rnn_learns_a_cyclic_successor() {
    // items cycle 1→2→…→6→1; the true successor is positive, any other item negative
    let mut rng = RngStream::new(6);
    let mut xs = Vec::new();
    for k in 0..600 {
        let len = 1 + k % 4;
        let start = rng.below(6);
        let hist: Vec<usize> = (0..len).map(|t| (start + t) % 6 + 1).collect();
        let next = (start + len) % 6 + 1;
        let item = if k % 2 == 0 {
            next
        } else {
            let mut j = rng.below(6) + 1;
            if j == next {
                j = j % 6 + 1;
            }
            j
        };
        xs.push(ex(k + 1, item, (item == next) as u8, 0, &hist));
    }
    let b = bundle_from(xs, 3);
    let mut m = RnnModel::new(6, 8, 4, 0.5, 7).unwrap();
    m.fit(&b, &train_cfg(0.02, 40), "rnn").unwrap();
    let (rep, _) = m.evaluate(&b.test).unwrap();
    assert!(rep.auc.unwrap() > 0.9, "{rep:?}");
}

#[test]
fn markov_rows_are_distributions() {
    let train = vec![
        ex(1, 1, 1, 1, &[]),
        ex(1, 2, 1, 2, &[]),
        ex(1, 9, 0, 3, &[]),
        ex(1, 1, 1, 4, &[]),
        ex(1, 3, 1, 5, &[]),
        ex(2, 1, 1, 1, &[]),
        ex(2, 2, 1, 2, &[]),
    ];
    let m = McModel::fit(&train, 5);
    let row = m.row(1).unwrap();
    assert!((row.values().sum::<Real>() - 1.0).abs() < 1e-12);
    assert!((m.prob(1, 2) - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.prob(1, 3) - 1.0 / 3.0).abs() < 1e-12);
    // negatives are not transitions; unseen rows and users fall back to uniform
    assert_eq!(m.prob(2, 9), 0.0);
    assert_eq!(m.prob(4, 1), 0.2);
    assert_eq!(m.predict(1, 2), m.prob(3, 2));
    assert_eq!(m.predict(42, 2), 0.2);
    for i in 1..=5 {
        let s: Real = (1..=5).map(|j| m.prob(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
    }
}

#[test]
fn untrained_prompting_is_near_chance_on_random_labels() {
    let cfg = SyntheticConfig {
        users: 60,
        items: 40,
        ..SyntheticConfig::default()
    };
    let mut b = synthetic_bundle(&cfg);
    let mut rng = RngStream::new(8);
    for e in &mut b.test {
        e.label = rng.below(2) as u8;
    }
    let vocab = build_vocab(&b.titles).unwrap();
    let sc = SystemConfig {
        sasrec: tiny_sasrec_config(b.num_items()),
        llm: tiny_llm_config(vocab.len(), 160),
        proj_token_num: 1,
        max_titles: 5,
    };
    let seeds = [101, 102, 103, 104, 105];
    let r = icl_variant(&sc, &vocab, &b.test, &b, &seeds).unwrap();
    assert_eq!(r.per_seed.len(), 5);
    let auc = r.aggregate.auc.unwrap();
    assert!((auc - 0.5).abs() <= 0.05, "{auc}");
    let again = icl_variant(&sc, &vocab, &b.test, &b, &seeds[..1]).unwrap();
    assert_eq!(again.per_seed[0], r.per_seed[0]);
}
