//! Rating ingestion, cleaning, binarization and the chronological split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sasrec::{standardize_sequence, InteractionSequence};

/// Parsers abort when more than this fraction of lines is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;
pub const LIKE_THRESHOLD: u8 = 4;
pub const WARM_THRESHOLD: usize = 3;
pub const REDUCE_MAX_ID: usize = 4000;
/// Most recent liked items kept in an example's history.
pub const DEFAULT_HISTORY_CAP: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingRecord {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub timestamp: u64,
    pub title: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub records: Vec<RatingRecord>,
    pub lines: usize,
    pub rejected: usize,
    /// Ratings whose item has no catalogue entry.
    pub missing_title: usize,
}

fn check_quality(what: &str, lines: usize, rejected: usize) -> Result<()> {
    if lines > 0 && rejected as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(Error::Data(format!(
            "{what}: {rejected} of {lines} lines malformed (limit {:.0}%)",
            MAX_MALFORMED_FRACTION * 100.0
        )));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .filter(|l| !l.is_empty())
}

fn parse_rating_line(line: &[u8]) -> Option<(usize, usize, u8, u64)> {
    let s = std::str::from_utf8(line).ok().filter(|s| s.is_ascii())?;
    let mut f = s.split("::");
    let user = f.next()?.parse().ok()?;
    let item = f.next()?.parse().ok()?;
    let rating: u8 = f.next()?.parse().ok()?;
    let ts = f.next()?.parse().ok()?;
    if f.next().is_some() || !(1..=5).contains(&rating) {
        return None;
    }
    Some((user, item, rating, ts))
}

/// `UserID::MovieID::Rating::Timestamp` ratings joined with
/// `MovieID::Title::Genres` movies (Latin-1).
pub fn parse_movielens(ratings: &Path, movies: &Path) -> Result<ParseOutcome> {
    let movie_bytes = read_bytes(movies)?;
    let rating_bytes = read_bytes(ratings)?;
    let mut titles: HashMap<usize, String> = HashMap::new();
    let (mut movie_lines, mut movie_bad) = (0, 0);
    for line in lines(&movie_bytes) {
        movie_lines += 1;
        // Latin-1 maps each byte to the code point of the same value
        let text: String = line.iter().map(|&b| b as char).collect();
        let mut f = text.splitn(3, "::");
        match (f.next().and_then(|id| id.parse().ok()), f.next(), f.next()) {
            (Some(id), Some(title), Some(_)) if !title.trim().is_empty() => {
                titles.insert(id, title.trim().to_string());
            }
            _ => movie_bad += 1,
        }
    }
    check_quality(&movies.display().to_string(), movie_lines, movie_bad)?;

    let mut out = ParseOutcome::default();
    for line in lines(&rating_bytes) {
        out.lines += 1;
        let Some((user, item, rating, timestamp)) = parse_rating_line(line) else {
            out.rejected += 1;
            continue;
        };
        let Some(title) = titles.get(&item) else {
            out.missing_title += 1;
            continue;
        };
        out.records.push(RatingRecord {
            user,
            item,
            rating,
            timestamp,
            title: title.clone(),
        });
    }
    check_quality(&ratings.display().to_string(), out.lines, out.rejected)?;
    Ok(out)
}

const USER_COLUMNS: [&str; 3] = ["user_id", "userid", "user"];
const ITEM_COLUMNS: [&str; 5] = ["id", "book_id", "item_id", "asin", "item"];
const RATING_COLUMNS: [&str; 3] = ["review/score", "rating", "score"];
const TIME_COLUMNS: [&str; 4] = ["review/time", "timestamp", "unix_time", "time"];
const TITLE_COLUMNS: [&str; 1] = ["title"];

fn find_column(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim().to_lowercase().as_str()))
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: no column named any of {names:?}",
                path.display()
            ))
        })
}

/// Amazon book-review CSV with a header row. String IDs become dense
/// 1-based integers in first-seen order.
pub fn parse_amazon_books(path: &Path) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .clone();
    let cu = find_column(&headers, &USER_COLUMNS, path)?;
    let ci = find_column(&headers, &ITEM_COLUMNS, path)?;
    let cr = find_column(&headers, &RATING_COLUMNS, path)?;
    let ct = find_column(&headers, &TIME_COLUMNS, path)?;
    let ctitle = find_column(&headers, &TITLE_COLUMNS, path)?;
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut out = ParseOutcome::default();
    for row in reader.records() {
        out.lines += 1;
        let Ok(row) = row else {
            out.rejected += 1;
            continue;
        };
        let field = |i: usize| row.get(i).map(str::trim).filter(|s| !s.is_empty());
        let parsed = (|| {
            let user = field(cu)?;
            let item = field(ci)?;
            let r: f64 = field(cr)?.parse().ok()?;
            if r.fract() != 0.0 || !(1.0..=5.0).contains(&r) {
                return None;
            }
            let ts: u64 = field(ct)?.parse().ok()?;
            let title = field(ctitle)?;
            Some((user, item, r as u8, ts, title))
        })();
        let Some((user, item, rating, timestamp, title)) = parsed else {
            out.rejected += 1;
            continue;
        };
        let next = users.len() + 1;
        let user = *users.entry(user.to_string()).or_insert(next);
        let next = items.len() + 1;
        let item = *items.entry(item.to_string()).or_insert(next);
        out.records.push(RatingRecord {
            user,
            item,
            rating,
            timestamp,
            title: title.to_string(),
        });
    }
    check_quality(&path.display().to_string(), out.lines, out.rejected)?;
    Ok(out)
}

/// Keeps records whose dense user and item IDs are both ≤ 4000.
pub fn reduce_amazon(records: Vec<RatingRecord>) -> Vec<RatingRecord> {
    let before = records.len();
    let kept: Vec<RatingRecord> = records
        .into_iter()
        .filter(|r| r.user <= REDUCE_MAX_ID && r.item <= REDUCE_MAX_ID)
        .collect();
    if kept.is_empty() {
        log::warn!("ID reduction removed all {before} records");
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    pub timestamp: u64,
    /// Liked items with a strictly earlier timestamp, oldest first.
    pub history: Vec<usize>,
}

pub fn is_like(rating: u8) -> bool {
    rating >= LIKE_THRESHOLD
}

pub fn binarize(records: &[RatingRecord]) -> Vec<LabeledExample> {
    binarize_with_cap(records, DEFAULT_HISTORY_CAP)
}

/// `y = [rating ≥ 4]`. Histories hold the user's most recent liked items
/// strictly before each example.
pub fn binarize_with_cap(records: &[RatingRecord], cap: usize) -> Vec<LabeledExample> {
    let mut by_user: BTreeMap<usize, Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user).or_default().push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (user, mut rs) in by_user {
        rs.sort_by_key(|r| (r.timestamp, r.item));
        let mut liked: Vec<(u64, usize)> = Vec::new();
        for r in rs {
            let cut = liked.partition_point(|&(t, _)| t < r.timestamp);
            let start = cut.saturating_sub(cap);
            out.push(LabeledExample {
                user,
                item: r.item,
                label: is_like(r.rating) as u8,
                timestamp: r.timestamp,
                history: liked[start..cut].iter().map(|&(_, i)| i).collect(),
            });
            if is_like(r.rating) {
                liked.push((r.timestamp, r.item));
            }
        }
    }
    out
}

pub fn item_titles(records: &[RatingRecord]) -> BTreeMap<usize, String> {
    records.iter().map(|r| (r.item, r.title.clone())).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitBundle {
    pub titles: BTreeMap<usize, String>,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub warm_test: Vec<LabeledExample>,
    pub cold_test: Vec<LabeledExample>,
}

/// Global chronological 80/10/10 split (floors for train and validation).
pub fn split_8_1_1(mut examples: Vec<LabeledExample>) -> Result<SplitBundle> {
    let n = examples.len();
    if n < 10 {
        return Err(Error::Split(format!("need at least 10 examples, got {n}")));
    }
    examples.sort_by_key(|e| (e.timestamp, e.user, e.item));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = examples.split_off(n_train + n_val);
    let validation = examples.split_off(n_train);
    Ok(SplitBundle {
        train: examples,
        validation,
        test,
        ..Default::default()
    })
}

/// Per-user interaction counts in the training split.
pub fn train_counts(train: &[LabeledExample]) -> HashMap<usize, usize> {
    let mut c = HashMap::new();
    for e in train {
        *c.entry(e.user).or_insert(0) += 1;
    }
    c
}

/// Test examples of users with more than three training interactions are warm.
pub fn build_warm_cold(mut bundle: SplitBundle) -> SplitBundle {
    let counts = train_counts(&bundle.train);
    let (warm, cold): (Vec<_>, Vec<_>) = bundle
        .test
        .iter()
        .cloned()
        .partition(|e| counts.get(&e.user).copied().unwrap_or(0) > WARM_THRESHOLD);
    bundle.warm_test = warm;
    bundle.cold_test = cold;
    bundle
}

/// Chronological liked-item sequences of the training split, one per user
/// with at least two likes.
pub fn build_sequences(train: &[LabeledExample], n: usize) -> Vec<InteractionSequence> {
    let mut by_user: BTreeMap<usize, Vec<(u64, usize)>> = BTreeMap::new();
    for e in train.iter().filter(|e| e.label == 1) {
        by_user.entry(e.user).or_default().push((e.timestamp, e.item));
    }
    by_user
        .into_iter()
        .filter_map(|(user, mut evs)| {
            evs.sort_unstable();
            let items: Vec<usize> = evs.into_iter().map(|(_, i)| i).collect();
            standardize_sequence(user, &items, n).ok()
        })
        .collect()
}

/// Full preprocessing from cleaned records.
pub fn prepare_bundle(records: &[RatingRecord]) -> Result<SplitBundle> {
    let mut bundle = split_8_1_1(binarize(records))?;
    bundle.titles = item_titles(records);
    Ok(build_warm_cold(bundle))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub records: usize,
    pub users: usize,
    pub items: usize,
    pub positives: usize,
    pub negatives: usize,
}

pub fn record_stats(records: &[RatingRecord]) -> DatasetStats {
    let users: std::collections::BTreeSet<usize> = records.iter().map(|r| r.user).collect();
    let items: std::collections::BTreeSet<usize> = records.iter().map(|r| r.item).collect();
    let positives = records.iter().filter(|r| is_like(r.rating)).count();
    DatasetStats {
        records: records.len(),
        users: users.len(),
        items: items.len(),
        positives,
        negatives: records.len() - positives,
    }
}

const SECTIONS: [&str; 5] = ["train", "validation", "test", "warm_test", "cold_test"];

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl SplitBundle {
    pub fn num_items(&self) -> usize {
        let from_examples = self
            .sections()
            .flat_map(|(_, xs)| xs.iter().flat_map(|e| e.history.iter().copied().chain([e.item])))
            .max()
            .unwrap_or(0);
        from_examples.max(self.titles.keys().copied().max().unwrap_or(0))
    }

    pub fn num_users(&self) -> usize {
        self.sections()
            .flat_map(|(_, xs)| xs.iter().map(|e| e.user))
            .max()
            .unwrap_or(0)
    }

    pub fn title(&self, item: usize) -> &str {
        self.titles.get(&item).map_or("unknown", String::as_str)
    }

    fn sections(&self) -> impl Iterator<Item = (&'static str, &Vec<LabeledExample>)> {
        SECTIONS.into_iter().zip([
            &self.train,
            &self.validation,
            &self.test,
            &self.warm_test,
            &self.cold_test,
        ])
    }

    /// Tab-separated, newline-delimited text with `#section` headers.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("#titles\n");
        for (item, title) in &self.titles {
            let _ = writeln!(s, "{item}\t{}", clean_field(title));
        }
        for (name, xs) in self.sections() {
            let _ = writeln!(s, "#{name}");
            for e in xs {
                let hist: Vec<String> = e.history.iter().map(usize::to_string).collect();
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}",
                    e.user,
                    e.item,
                    e.label,
                    e.timestamp,
                    hist.join(",")
                );
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut b = SplitBundle::default();
        let mut section = "";
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Data(format!("bundle line {}: {what}", lineno + 1));
            if let Some(name) = line.strip_prefix('#') {
                if name != "titles" && !SECTIONS.contains(&name) {
                    return Err(bad(&format!("unknown section `{name}`")));
                }
                section = SECTIONS.into_iter().find(|s| *s == name).unwrap_or("titles");
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if section == "titles" {
                let [item, title] = f[..] else {
                    return Err(bad("expected item and title"));
                };
                let item = item.parse().map_err(|_| bad("bad item id"))?;
                b.titles.insert(item, title.to_string());
                continue;
            }
            let [user, item, label, ts, hist] = f[..] else {
                return Err(bad("expected 5 fields"));
            };
            let history = if hist.is_empty() {
                Vec::new()
            } else {
                hist.split(',')
                    .map(|h| h.parse().map_err(|_| bad("bad history id")))
                    .collect::<Result<_>>()?
            };
            let e = LabeledExample {
                user: user.parse().map_err(|_| bad("bad user id"))?,
                item: item.parse().map_err(|_| bad("bad item id"))?,
                label: label.parse().ok().filter(|l| *l <= 1).ok_or_else(|| bad("bad label"))?,
                timestamp: ts.parse().map_err(|_| bad("bad timestamp"))?,
                history,
            };
            match section {
                "train" => b.train.push(e),
                "validation" => b.validation.push(e),
                "test" => b.test.push(e),
                "warm_test" => b.warm_test.push(e),
                "cold_test" => b.cold_test.push(e),
                _ => return Err(bad("record before any section header")),
            }
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// FNV-1a of the serialized bundle, pinning the exact data a run used.
    pub fn content_hash(&self) -> u64 {
        fnv1a(self.to_tsv().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
