//! Synthetic rating corpus with separately tunable signals.
//!
//! * **text** — each title carries a positive or negative adjective; the sign
//!   shifts the like probability for everyone, so a pure-text model can use it.
//! * **collaborative** — users and items belong to hidden groups; a user likes
//!   in-group items more. Items also have a hidden quality. Neither is visible
//!   in the titles, so only ID-based models can exploit them.
//! * **sequential** — within a user's stream, the next item tends to be the
//!   in-group successor of the previous one.
//!
//! A fraction of users only appears late in the timeline, so they have few or
//! no training interactions after the chronological split (cold users). A
//! fraction of items is likewise released late; late users favour them, and no
//! ID-based model has seen them during training.

use crate::data::RatingRecord;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::sigmoid;

pub const POSITIVE_WORDS: [&str; 4] = ["great", "brilliant", "superb", "charming"];
pub const NEGATIVE_WORDS: [&str; 4] = ["dull", "poor", "tedious", "bland"];
const NOUNS: [&str; 12] = [
    "river", "garden", "machine", "voyage", "letter", "island", "winter", "empire", "mirror",
    "harbor", "signal", "forest",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Fraction of users whose activity starts near the end of the timeline.
    pub late_user_fraction: f64,
    /// Fraction of items released near the end of the timeline.
    pub new_item_fraction: f64,
    /// Probability that a late user's pick is drawn from released new items.
    pub late_new_item_prob: f64,
    /// Chance that a regular user keeps a pick that landed on a new item;
    /// otherwise it is redrawn, so new releases mostly reach late users.
    pub regular_new_item_prob: f64,
    /// Probability that an interaction stays inside the user's group.
    pub in_group_prob: f64,
    /// Probability that an in-group step follows the successor chain.
    pub sequential_prob: f64,
    pub text_signal: f64,
    pub collab_signal: f64,
    pub quality_signal: f64,
    /// Sharpness of the like probability; 0 gives coin-flip labels.
    pub label_temperature: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 300,
            items: 120,
            groups: 4,
            min_interactions: 20,
            max_interactions: 40,
            late_user_fraction: 0.15,
            new_item_fraction: 0.2,
            late_new_item_prob: 0.9,
            regular_new_item_prob: 0.1,
            in_group_prob: 0.6,
            sequential_prob: 0.5,
            text_signal: 2.0,
            collab_signal: 1.5,
            quality_signal: 1.0,
            label_temperature: 2.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Established users only, no late releases, and a strong group effect:
    /// every evaluated item has collaborative history behind it.
    pub fn collaborative() -> Self {
        Self {
            late_user_fraction: 0.0,
            new_item_fraction: 0.0,
            collab_signal: 3.0,
            ..Self::default()
        }
    }

    /// No learnable structure in the labels at all.
    pub fn random_labels(seed: u64) -> Self {
        Self {
            text_signal: 0.0,
            collab_signal: 0.0,
            quality_signal: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items < self.groups || self.groups == 0 {
            return Err(Error::Config("synthetic corpus needs users, and items ≥ groups ≥ 1".into()));
        }
        if self.min_interactions == 0 || self.min_interactions > self.max_interactions {
            return Err(Error::Config("synthetic interaction range is empty".into()));
        }
        for (name, p) in [
            ("late_user_fraction", self.late_user_fraction),
            ("new_item_fraction", self.new_item_fraction),
            ("late_new_item_prob", self.late_new_item_prob),
            ("regular_new_item_prob", self.regular_new_item_prob),
            ("in_group_prob", self.in_group_prob),
            ("sequential_prob", self.sequential_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Ground truth behind a generated corpus, for diagnostics.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub item_group: Vec<usize>,
    pub item_text: Vec<f64>,
    pub item_quality: Vec<f64>,
    pub item_release: Vec<u64>,
    pub user_group: Vec<usize>,
    pub records: Vec<RatingRecord>,
}

const TIMELINE: u64 = 1_000_000;
const NEW_ITEM_RELEASE: u64 = TIMELINE * 92 / 100;

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let mut rng = root.derive(1);
    let n_items = config.items;
    // index 0 is unused so that item ids are 1-based
    let mut item_group = vec![0; n_items + 1];
    let mut item_text = vec![0.0; n_items + 1];
    let mut item_quality = vec![0.0; n_items + 1];
    let mut item_release = vec![0; n_items + 1];
    let mut titles = vec![String::new(); n_items + 1];
    for i in 1..=n_items {
        item_group[i] = (i - 1) % config.groups;
        let positive = rng.bernoulli(0.5);
        item_text[i] = if positive { 1.0 } else { -1.0 };
        item_quality[i] = rng.gaussian();
        let adj = if positive {
            POSITIVE_WORDS[rng.below(POSITIVE_WORDS.len())]
        } else {
            NEGATIVE_WORDS[rng.below(NEGATIVE_WORDS.len())]
        };
        let noun = NOUNS[rng.below(NOUNS.len())];
        titles[i] = format!("The {adj} {noun}");
        if rng.bernoulli(config.new_item_fraction) {
            item_release[i] = NEW_ITEM_RELEASE;
        }
    }
    let new_items: Vec<usize> = (1..=n_items).filter(|&i| item_release[i] > 0).collect();
    let members: Vec<Vec<usize>> = (0..config.groups)
        .map(|g| (1..=n_items).filter(|&i| item_group[i] == g).collect())
        .collect();
    // heavy-tailed exposure inside a group: weight ∝ 1/(rank+1)
    let pick_in_group = |g: usize, rng: &mut RngStream| {
        let m = &members[g];
        let total: f64 = (0..m.len()).map(|r| 1.0 / (r as f64 + 1.0)).sum();
        let mut u = rng.uniform() * total;
        for (r, &item) in m.iter().enumerate() {
            u -= 1.0 / (r as f64 + 1.0);
            if u <= 0.0 {
                return item;
            }
        }
        *m.last().expect("nonempty group")
    };
    // centre the group-match term so classes stay roughly balanced
    let p_match = config.in_group_prob + (1.0 - config.in_group_prob) / config.groups as f64;
    let match_offset = 2.0 * p_match - 1.0;

    let mut user_group = vec![0; config.users + 1];
    let mut records = Vec::new();
    let mut urng = root.derive(2);
    for u in 1..=config.users {
        let g = urng.below(config.groups);
        user_group[u] = g;
        let late = urng.bernoulli(config.late_user_fraction);
        let count = config.min_interactions
            + urng.below(config.max_interactions - config.min_interactions + 1);
        let (start, end) = if late {
            let s = TIMELINE * 90 / 100 + urng.below((TIMELINE / 20) as usize) as u64;
            (s, TIMELINE)
        } else {
            let s = urng.below((TIMELINE * 3 / 10) as usize) as u64;
            (s, TIMELINE * 97 / 100)
        };
        let mut prev: Option<usize> = None;
        let mut seen = std::collections::HashSet::new();
        let mut times: Vec<u64> = (0..count)
            .map(|_| start + urng.below((end - start).max(1) as usize) as u64)
            .collect();
        times.sort_unstable();
        for t in times {
            let mut item = 0;
            let mut found = false;
            for _attempt in 0..16 {
                item = if late && !new_items.is_empty() && urng.bernoulli(config.late_new_item_prob) {
                    new_items[urng.below(new_items.len())]
                } else if urng.bernoulli(config.in_group_prob) {
                    match prev {
                        Some(p) if item_group[p] == g && urng.bernoulli(config.sequential_prob) => {
                            let m = &members[g];
                            let k = m.iter().position(|&x| x == p).unwrap_or(0);
                            m[(k + 1) % m.len()]
                        }
                        _ => pick_in_group(g, &mut urng),
                    }
                } else {
                    1 + urng.below(n_items)
                };
                if item_release[item] > 0 && !late && !urng.bernoulli(config.regular_new_item_prob) {
                    continue;
                }
                if !seen.contains(&item) && item_release[item] <= t {
                    found = true;
                    break;
                }
            }
            if !found {
                continue;
            }
            seen.insert(item);
            let matched = if item_group[item] == g { 1.0 } else { -1.0 };
            let logit = config.text_signal * item_text[item]
                + config.collab_signal * (matched - match_offset)
                + config.quality_signal * item_quality[item];
            let like = urng.bernoulli(sigmoid(config.label_temperature * logit));
            let rating = if like {
                4 + urng.below(2) as u8
            } else {
                1 + urng.below(3) as u8
            };
            records.push(RatingRecord {
                user: u,
                item,
                rating,
                timestamp: t,
                title: titles[item].clone(),
            });
            prev = Some(item);
        }
    }
    Ok(SyntheticWorld {
        item_group,
        item_text,
        item_quality,
        item_release,
        user_group,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_roughly_balanced() {
        let c = SyntheticConfig::default();
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.records, b.records);
        let likes = a.records.iter().filter(|r| r.rating >= 4).count() as f64;
        let frac = likes / a.records.len() as f64;
        assert!((0.35..0.65).contains(&frac), "like fraction {frac}");
    }

    #[test]
    fn nothing_is_consumed_before_release() {
        let w = generate(&SyntheticConfig::default()).unwrap();
        assert!(w.records.iter().all(|r| r.timestamp >= w.item_release[r.item]));
        assert!(w.records.iter().any(|r| w.item_release[r.item] > 0));
    }

    #[test]
    fn titles_expose_only_the_text_signal() {
        let w = generate(&SyntheticConfig::default()).unwrap();
        for r in &w.records {
            let positive = POSITIVE_WORDS.iter().any(|p| r.title.contains(p));
            assert_eq!(positive, w.item_text[r.item] > 0.0);
        }
    }
}
