//! AUC, per-user AUC, log loss and thresholded confusion metrics.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{bce_loss, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample {
    pub user: usize,
    pub label: Real,
    pub score: Real,
}

impl ScoredExample {
    pub fn new(user: usize, label: Real, score: Real) -> Self {
        Self { user, label, score }
    }

    fn positive(&self) -> bool {
        self.label >= 0.5
    }
}

/// Pairwise ranking statistic with ties worth one half; `None` when either
/// class is missing.
///
/// Computed from doubled mid-ranks in integer arithmetic, so the result is the
/// exact pair count divided by `|P|·|N|`.
pub fn compute_auc(examples: &[ScoredExample]) -> Option<Real> {
    let p = examples.iter().filter(|e| e.positive()).count() as u64;
    let n = examples.len() as u64 - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[a].score.total_cmp(&examples[b].score));
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && examples[order[j]].score == examples[order[i]].score {
            j += 1;
        }
        // ranks i+1 ..= j share the doubled mid-rank i+1+j
        let pos_in_group = order[i..j].iter().filter(|&&k| examples[k].positive()).count() as u64;
        doubled_rank_sum += pos_in_group * (i as u64 + 1 + j as u64);
        i = j;
    }
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Some(doubled_u as Real / (2 * p * n) as Real)
}

/// Direct `O(|P|·|N|)` pair enumeration, the reference for [`compute_auc`].
pub fn auc_pairwise(examples: &[ScoredExample]) -> Option<Real> {
    let (pos, neg): (Vec<&ScoredExample>, Vec<&ScoredExample>) = examples.iter().partition(|e| e.positive());
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut doubled: u64 = 0;
    for sp in &pos {
        for sn in &neg {
            if sp.score > sn.score {
                doubled += 2;
            } else if sp.score == sn.score {
                doubled += 1;
            }
        }
    }
    Some(doubled as Real / (2 * pos.len() * neg.len()) as Real)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uauc {
    pub value: Option<Real>,
    pub users: usize,
    pub skipped_users: usize,
}

/// Mean per-user AUC over users that have both classes.
pub fn compute_uauc(examples: &[ScoredExample]) -> Uauc {
    let mut by_user: BTreeMap<usize, Vec<ScoredExample>> = BTreeMap::new();
    for e in examples {
        by_user.entry(e.user).or_default().push(*e);
    }
    let mut sum = 0.0;
    let mut users = 0;
    let mut skipped = 0;
    for group in by_user.values() {
        match compute_auc(group) {
            Some(a) => {
                sum += a;
                users += 1;
            }
            None => skipped += 1,
        }
    }
    Uauc {
        value: (users > 0).then(|| sum / users as Real),
        users,
        skipped_users: skipped,
    }
}

/// Mean clamped binary cross-entropy.
pub fn compute_log_loss(examples: &[ScoredExample]) -> Result<Real> {
    if examples.is_empty() {
        return Ok(Real::NAN);
    }
    let mut total = 0.0;
    for e in examples {
        total += bce_loss(e.score, e.label)?;
    }
    Ok(total / examples.len() as Real)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionReport {
    pub counts: ConfusionCounts,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub accuracy: Real,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

pub const DEFAULT_THRESHOLD: Real = 0.5;

/// Predicts positive iff `score ≥ threshold`.
pub fn confusion_report(examples: &[ScoredExample], threshold: Real) -> ConfusionReport {
    let mut c = ConfusionCounts::default();
    for e in examples {
        match (e.score >= threshold, e.positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as Real / den as Real
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let accuracy = ratio(c.tp + c.tn, c.total());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero_division = true;
        0.0
    };
    ConfusionReport {
        counts: c,
        precision,
        recall,
        f1,
        accuracy,
        zero_division,
    }
}

/// Every metric of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub auc: Option<Real>,
    pub uauc: Option<Real>,
    pub logloss: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub accuracy: Real,
    pub auc_undefined: bool,
    pub uauc_skipped_users: usize,
    pub zero_division: bool,
    /// Across-run standard deviations, present on aggregated reports.
    pub stddev: Option<Box<MetricStd>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricStd {
    pub runs: usize,
    pub auc: Real,
    pub uauc: Real,
    pub logloss: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub accuracy: Real,
}

pub const METRIC_COLUMNS: [&str; 7] = ["auc", "uauc", "logloss", "precision", "recall", "f1", "accuracy"];

fn fmt_opt(v: Option<Real>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn evaluate(examples: &[ScoredExample]) -> Result<Self> {
        let auc = compute_auc(examples);
        let uauc = compute_uauc(examples);
        let conf = confusion_report(examples, DEFAULT_THRESHOLD);
        Ok(Self {
            n: examples.len(),
            auc,
            uauc: uauc.value,
            logloss: compute_log_loss(examples)?,
            precision: conf.precision,
            recall: conf.recall,
            f1: conf.f1,
            accuracy: conf.accuracy,
            auc_undefined: auc.is_none(),
            uauc_skipped_users: uauc.skipped_users,
            zero_division: conf.zero_division,
            stddev: None,
        })
    }

    /// Values in [`METRIC_COLUMNS`] order; undefined entries are NaN.
    pub fn values(&self) -> [Real; 7] {
        [
            self.auc.unwrap_or(Real::NAN),
            self.uauc.unwrap_or(Real::NAN),
            self.logloss,
            self.precision,
            self.recall,
            self.f1,
            self.accuracy,
        ]
    }

    /// One CSV fragment in [`METRIC_COLUMNS`] order.
    pub fn csv_fields(&self) -> String {
        [
            fmt_opt(self.auc),
            fmt_opt(self.uauc),
            format!("{:.6}", self.logloss),
            format!("{:.6}", self.precision),
            format!("{:.6}", self.recall),
            format!("{:.6}", self.f1),
            format!("{:.6}", self.accuracy),
        ]
        .join(",")
    }

    /// Mean of each metric over runs, with sample standard deviations.
    pub fn aggregate(runs: &[MetricReport]) -> Option<MetricReport> {
        let first = runs.first()?;
        let k = runs.len() as Real;
        let cols: Vec<[Real; 7]> = runs.iter().map(MetricReport::values).collect();
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for j in 0..7 {
            mean[j] = cols.iter().map(|c| c[j]).sum::<Real>() / k;
            if runs.len() > 1 {
                let ss: Real = cols.iter().map(|c| (c[j] - mean[j]).powi(2)).sum();
                std[j] = (ss / (k - 1.0)).sqrt();
            }
        }
        let opt = |v: Real| (!v.is_nan()).then_some(v);
        Some(MetricReport {
            n: first.n,
            auc: opt(mean[0]),
            uauc: opt(mean[1]),
            logloss: mean[2],
            precision: mean[3],
            recall: mean[4],
            f1: mean[5],
            accuracy: mean[6],
            auc_undefined: runs.iter().any(|r| r.auc_undefined),
            uauc_skipped_users: first.uauc_skipped_users,
            zero_division: runs.iter().any(|r| r.zero_division),
            stddev: Some(Box::new(MetricStd {
                runs: runs.len(),
                auc: std[0],
                uauc: std[1],
                logloss: std[2],
                precision: std[3],
                recall: std[4],
                f1: std[5],
                accuracy: std[6],
            })),
        })
    }
}

/// Mean over AUC and UAUC of `(ours − theirs) / theirs`.
pub fn relative_improvement(ours_auc: Real, ours_uauc: Real, base_auc: Real, base_uauc: Real) -> Real {
    0.5 * ((ours_auc - base_auc) / base_auc + (ours_uauc - base_uauc) / base_uauc)
}
