mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use sasrecllm::data::{
    self, binarize, binarize_with_cap, build_warm_cold, parse_amazon_books, parse_movielens, prepare_bundle,
    record_stats, split_8_1_1, RatingRecord, SplitBundle,
};
use sasrecllm::Error;

use common::*;

fn movielens() -> data::ParseOutcome {
    parse_movielens(&fixture("movielens/ratings.dat"), &fixture("movielens/movies.dat")).unwrap()
}

#[test]
fn movielens_fixture_counts() {
    let p = movielens();
    assert_eq!((p.lines, p.rejected, p.missing_title), (1000, 5, 3));
    let s = record_stats(&p.records);
    assert_eq!((s.records, s.users, s.items), (992, 23, 60));
    assert_eq!((s.positives, s.negatives), (563, 429));
    let first = &p.records[0];
    assert_eq!((first.user, first.item, first.rating, first.timestamp), (1, 1193, 5, 978300760));
}

#[test]
fn movielens_titles_are_decoded_as_latin1() {
    let p = movielens();
    let r = p.records.iter().find(|r| r.item == 73).expect("item 73 rated");
    assert_eq!(r.title, "Misérables, Les (1995)");
}

#[test]
fn movielens_fixture_split() {
    let b = prepare_bundle(&movielens().records).unwrap();
    assert_eq!((b.train.len(), b.validation.len(), b.test.len()), (793, 99, 100));
    assert_eq!((b.warm_test.len(), b.cold_test.len()), (96, 4));
    let mut cold_users: Vec<usize> = b.cold_test.iter().map(|e| e.user).collect();
    cold_users.dedup();
    assert_eq!(cold_users, [21, 22]);
    assert_eq!(b.train.iter().filter(|e| e.label == 1).count(), 444);
    let all: Vec<_> = b.train.iter().chain(&b.validation).chain(&b.test).collect();
    assert_eq!(all.iter().map(|e| e.history.len()).max(), Some(33));
    assert_eq!(all.iter().filter(|e| e.history.is_empty()).count(), 42);
    let u1: Vec<_> = all.iter().filter(|e| e.user == 1).collect();
    assert_eq!(u1.len(), 53);
    assert_eq!(u1.iter().max_by_key(|e| e.timestamp).unwrap().history.len(), 24);
    let f = &b.train[0];
    assert_eq!((f.user, f.item, f.label, f.timestamp), (22, 260, 1, 978290000));
    assert!(f.history.is_empty());
}

#[test]
fn edge_users_around_the_warm_threshold() {
    let b = prepare_bundle(&movielens().records).unwrap();
    let counts = data::train_counts(&b.train);
    // 2 late only, 3 early + 2 late, 4 early + 1 late
    assert_eq!(counts.get(&21), None);
    assert_eq!(counts.get(&22), Some(&3));
    assert_eq!(counts.get(&23), Some(&4));
    assert!(b.warm_test.iter().any(|e| e.user == 23));
    assert!(!b.warm_test.iter().any(|e| e.user == 21 || e.user == 22));
}

#[test]
fn amazon_fixture_counts() {
    let p = parse_amazon_books(&fixture("amazon/books.csv")).unwrap();
    assert_eq!((p.lines, p.rejected), (120, 1));
    let s = record_stats(&p.records);
    assert_eq!((s.records, s.users, s.items, s.positives), (119, 12, 15, 43));
    // dense first-seen ids
    assert_eq!((p.records[0].user, p.records[0].item), (1, 1));
    assert_eq!(data::reduce_amazon(p.records.clone()).len(), 119);
}

#[test]
fn too_many_malformed_lines_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.dat");
    let movies = dir.path().join("movies.dat");
    std::fs::write(&movies, "1::A (2000)::Drama\n").unwrap();
    let mut text: String = (0..98).map(|t| format!("1::1::4::{t}\n")).collect();
    text.push_str("garbage\n1::1::9::5\n");
    std::fs::write(&ratings, text).unwrap();
    match parse_movielens(&ratings, &movies) {
        Err(Error::Data(msg)) => assert!(msg.contains("2 of 100"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    // exactly 1% passes
    let text: String = (0..99).map(|t| format!("1::1::4::{t}\n")).chain(["x\n".into()]).collect();
    std::fs::write(&ratings, text).unwrap();
    assert_eq!(parse_movielens(&ratings, &movies).unwrap().rejected, 1);
}

#[test]
fn hundred_examples_split_80_10_10() {
    let xs: Vec<_> = (0..100).rev().map(|t| ex(t % 7 + 1, t % 11 + 1, (t % 2) as u8, t as u64, &[])).collect();
    let b = split_8_1_1(xs).unwrap();
    assert_eq!((b.train.len(), b.validation.len(), b.test.len()), (80, 10, 10));
    assert!(b.train.iter().all(|e| e.timestamp < 80));
    assert!(b.validation.iter().all(|e| (80..90).contains(&e.timestamp)));
    assert!(b.test.iter().all(|e| e.timestamp >= 90));
    assert!(matches!(split_8_1_1(vec![ex(1, 1, 1, 0, &[]); 9]), Err(Error::Split(_))));
}

#[test]
fn histories_are_strictly_earlier_likes_and_capped() {
    let rec = |item, rating, timestamp| RatingRecord {
        user: 1,
        item,
        rating,
        timestamp,
        title: String::new(),
    };
    // item 3 shares a timestamp with item 2 and must not see it
    let rs = [rec(1, 5, 10), rec(2, 4, 20), rec(3, 5, 20), rec(4, 2, 30), rec(5, 4, 40), rec(6, 1, 50)];
    let xs = binarize(&rs);
    let h: Vec<&[usize]> = xs.iter().map(|e| e.history.as_slice()).collect();
    assert_eq!(h, [&[][..], &[1], &[1], &[1, 2, 3], &[1, 2, 3], &[1, 2, 3, 5]]);
    assert_eq!(xs.iter().map(|e| e.label).collect::<Vec<_>>(), [1, 1, 1, 0, 1, 0]);
    let capped = binarize_with_cap(&rs, 2);
    assert_eq!(capped[5].history, [3, 5]);
}

fn examples() -> impl Strategy<Value = Vec<data::LabeledExample>> {
    prop::collection::vec((1usize..12, 1usize..30, 0u8..2, 0u64..60, prop::collection::vec(1usize..30, 0..5)), 10..120)
        .prop_map(|v| v.into_iter().map(|(u, i, y, t, h)| ex(u, i, y, t, &h)).collect())
}

proptest! {
    #[test]
    fn warm_means_more_than_three_training_examples(xs in examples()) {
        let b = build_warm_cold(split_8_1_1(xs).unwrap());
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for e in &b.train {
            *counts.entry(e.user).or_default() += 1;
        }
        prop_assert_eq!(b.warm_test.len() + b.cold_test.len(), b.test.len());
        for e in &b.warm_test {
            prop_assert!(counts.get(&e.user).copied().unwrap_or(0) > 3);
        }
        for e in &b.cold_test {
            prop_assert!(counts.get(&e.user).copied().unwrap_or(0) <= 3);
        }
    }

    #[test]
    fn split_is_chronological_and_exhaustive(xs in examples()) {
        let n = xs.len();
        let b = split_8_1_1(xs).unwrap();
        prop_assert_eq!(b.train.len(), n * 8 / 10);
        prop_assert_eq!(b.validation.len(), n / 10);
        prop_assert_eq!(b.train.len() + b.validation.len() + b.test.len(), n);
        let last_train = b.train.iter().map(|e| e.timestamp).max().unwrap();
        prop_assert!(b.validation.iter().chain(&b.test).all(|e| e.timestamp >= last_train));
    }

    #[test]
    fn bundle_tsv_round_trips(xs in examples(), titles in prop::collection::btree_map(1usize..30, "[a-zA-Z ,()é]{0,12}", 0..10)) {
        let mut b: SplitBundle = build_warm_cold(split_8_1_1(xs).unwrap());
        b.titles = titles;
        let back = SplitBundle::from_tsv(&b.to_tsv()).unwrap();
        prop_assert_eq!(back.content_hash(), b.content_hash());
        prop_assert_eq!(back, b);
    }
}

#[test]
fn bundle_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let b = prepare_bundle(&movielens().records).unwrap();
    let path = dir.path().join("bundle.tsv");
    b.save(&path).unwrap();
    assert_eq!(SplitBundle::load(&path).unwrap(), b);
    assert!(matches!(SplitBundle::from_tsv("#bogus\n"), Err(Error::Data(_))));
    assert!(matches!(SplitBundle::from_tsv("#train\n1\t2\t7\t0\t\n"), Err(Error::Data(_))));
}
