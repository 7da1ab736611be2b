//! Epoch loops, freezing, early stopping and the per-epoch log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredExample, METRIC_COLUMNS};
use crate::optim::{self, AdamWConfig, OptimizerState};
use crate::param::{Component, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{bce_loss, Real};

/// Which components receive updates (`true` = trainable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FreezeMask {
    pub sasrec: bool,
    pub mapping: bool,
    pub lora: bool,
    pub llm_base: bool,
}

impl FreezeMask {
    pub const SASREC_ONLY: Self = Self {
        sasrec: true,
        mapping: false,
        lora: false,
        llm_base: false,
    };
    pub const LORA_ONLY: Self = Self {
        sasrec: false,
        mapping: false,
        lora: true,
        llm_base: false,
    };
    /// The fusion path: encoder and mapping layer, LoRA held fixed.
    pub const FUSION: Self = Self {
        sasrec: true,
        mapping: true,
        lora: false,
        llm_base: false,
    };

    pub fn trainable(&self, c: Component) -> bool {
        match c {
            Component::Sasrec => self.sasrec,
            Component::Mapping => self.mapping,
            Component::Lora => self.lora,
            Component::LlmBase => self.llm_base,
            Component::Baseline => false,
        }
    }

    /// Reads the current flags back from a store (a component counts as
    /// trainable if any of its tensors is).
    pub fn of(store: &ParamStore) -> Self {
        let any = |c| store.ids_of(c).into_iter().any(|id| store.is_trainable(id));
        Self {
            sasrec: any(Component::Sasrec),
            mapping: any(Component::Mapping),
            lora: any(Component::Lora),
            llm_base: any(Component::LlmBase),
        }
    }
}

/// Applies `mask` to every hybrid component present in `store`.
pub fn set_freeze(store: &mut ParamStore, mask: FreezeMask) -> Result<()> {
    if mask.llm_base {
        return Err(Error::Config("the base language model stays frozen after initialization".into()));
    }
    let present = store.components();
    let hybrid = [Component::Sasrec, Component::Mapping, Component::Lora, Component::LlmBase];
    if !hybrid.iter().any(|c| present.contains(c) && mask.trainable(*c)) {
        return Err(Error::Config(format!("freeze mask {mask:?} leaves nothing trainable")));
    }
    for c in hybrid {
        store.set_component_trainable(c, mask.trainable(c));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Monitor {
    Auc,
    Uauc,
    LogLoss,
}

impl Monitor {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auc" => Ok(Self::Auc),
            "uauc" => Ok(Self::Uauc),
            "logloss" | "log_loss" => Ok(Self::LogLoss),
            other => Err(Error::Config(format!("unknown monitor metric `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Auc => "auc",
            Self::Uauc => "uauc",
            Self::LogLoss => "logloss",
        }
    }

    pub fn value(self, r: &MetricReport) -> Option<Real> {
        match self {
            Self::Auc => r.auc,
            Self::Uauc => r.uauc,
            Self::LogLoss => Some(r.logloss).filter(|v| v.is_finite()),
        }
    }

    /// Strict improvement of `candidate` over `incumbent`.
    pub fn improves(self, candidate: Real, incumbent: Real) -> bool {
        match self {
            Self::LogLoss => candidate < incumbent,
            _ => candidate > incumbent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub checkpoint_every: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub peak_lr: Real,
    pub warmup_frac: Real,
    pub weight_decay: Real,
    pub clip: Real,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 300,
            checkpoint_every: 8,
            patience: 10,
            monitor: Monitor::Auc,
            peak_lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            clip: optim::DEFAULT_CLIP,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be ≥ 1");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be ≥ 1");
        }
        if self.patience == 0 {
            return fail("patience must be ≥ 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail("peak learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup fraction must lie in [0, 1)");
        }
        if !(self.clip > 0.0) {
            return fail("clip norm must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn schedule(&self, examples: usize) -> Schedule {
        let per_epoch = examples.div_ceil(self.batch_size).max(1);
        let total = per_epoch * self.max_epochs;
        Schedule {
            warmup: (self.warmup_frac * total as Real).round() as usize,
            total,
            peak: self.peak_lr,
            step: 0,
        }
    }
}

/// Warmup-cosine learning rate over a fixed number of optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
    pub peak: Real,
    pub step: usize,
}

impl Schedule {
    pub fn next_lr(&mut self) -> Real {
        self.step += 1;
        optim::cosine_lr(self.step, self.warmup, self.total, self.peak)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOutcome {
    /// Mean per-sample BCE.
    pub loss: Real,
    /// Train-mode `(ŷ, y)` pairs in visiting order.
    pub predictions: Vec<ScoredExample>,
    /// Mean pre-clip gradient norm per component over the epoch's batches.
    pub grad_norms: BTreeMap<Component, Real>,
    pub last_lr: Real,
    pub batches: usize,
}

/// One shuffled pass over `examples`. `forward` maps an example to `ŷ` on a
/// fresh tape; `batch_offset` only numbers batches in diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<F>(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
    schedule: &mut Schedule,
    rng: &mut RngStream,
    batch_offset: usize,
    mut forward: F,
) -> Result<EpochOutcome>
where
    F: FnMut(&mut Tape<'_>, &LabeledExample, &mut RngStream) -> Result<Var>,
{
    if examples.is_empty() {
        return Err(Error::Data("cannot train on an empty split".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let components = store.components();
    let mut norm_sums: BTreeMap<Component, Real> = components.iter().map(|&c| (c, 0.0)).collect();
    let mut predictions = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    let mut last_lr = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        store.zero_grads();
        let scale = 1.0 / chunk.len() as Real;
        let lr = optim::cosine_lr(schedule.step + 1, schedule.warmup, schedule.total, schedule.peak);
        for &k in chunk {
            let ex = &examples[k];
            let label = Real::from(ex.label);
            let grads = {
                let mut tape = Tape::new(store);
                let y = forward(&mut tape, ex, rng)?;
                let yhat = tape.scalar(y);
                let l = tape.bce(y, label)?;
                let lv = tape.scalar(l);
                if !lv.is_finite() || !yhat.is_finite() {
                    return Err(Error::TrainingAbort {
                        batch: batch_offset + b,
                        lr,
                        message: format!("non-finite loss {lv} (ŷ = {yhat}) for user {} item {}", ex.user, ex.item),
                    });
                }
                loss_sum += lv;
                predictions.push(ScoredExample::new(ex.user, label, yhat));
                tape.backward(l)?.into_params()
            };
            store.accumulate(&grads, scale);
        }
        for (c, s) in norm_sums.iter_mut() {
            *s += store.grad_norm(*c);
        }
        let norm = optim::clip_grad_norm(store, cfg.clip);
        if !norm.is_finite() {
            return Err(Error::TrainingAbort {
                batch: batch_offset + b,
                lr,
                message: format!("non-finite gradient norm {norm}"),
            });
        }
        last_lr = schedule.next_lr();
        opt.step(store, last_lr);
        batches += 1;
    }
    let grad_norms = norm_sums
        .into_iter()
        .map(|(c, s)| (c, s / batches as Real))
        .collect();
    Ok(EpochOutcome {
        loss: loss_sum / examples.len() as Real,
        predictions,
        grad_norms,
        last_lr,
        batches,
    })
}

/// Eval-mode metrics over a split, plus the scored pairs they came from.
pub fn evaluate_epoch<F>(examples: &[LabeledExample], mut predict: F) -> Result<(MetricReport, Vec<ScoredExample>)>
where
    F: FnMut(&LabeledExample) -> Result<Real>,
{
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let scored = examples
        .iter()
        .map(|ex| predict(ex).map(|p| ScoredExample::new(ex.user, Real::from(ex.label), p)))
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricReport::evaluate(&scored)?, scored))
}

/// Mean clamped BCE recomputed from logged pairs.
pub fn mean_bce(pairs: &[ScoredExample]) -> Result<Real> {
    let mut s = 0.0;
    for p in pairs {
        s += bce_loss(p.score, p.label)?;
    }
    Ok(s / pairs.len().max(1) as Real)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Best-so-far tracking for one monitored quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct RunnerState {
    pub monitor: Monitor,
    pub epoch: usize,
    pub best: Option<(Real, usize)>,
    pub since_improvement: usize,
    pub evaluations: usize,
}

impl RunnerState {
    pub fn new(monitor: Monitor) -> Self {
        Self {
            monitor,
            epoch: 0,
            best: None,
            since_improvement: 0,
            evaluations: 0,
        }
    }

    /// Records the monitor value of `epoch`; returns whether it is a new best.
    /// Undefined values never improve.
    pub fn observe(&mut self, epoch: usize, value: Option<Real>) -> bool {
        self.epoch = epoch;
        self.evaluations += 1;
        let improved = match (value, self.best) {
            (Some(v), None) => !v.is_nan(),
            (Some(v), Some((b, _))) => self.monitor.improves(v, b),
            (None, _) => false,
        };
        if improved {
            self.best = value.map(|v| (v, epoch));
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        improved
    }
}

pub fn early_stop_check(state: &RunnerState, patience: usize) -> StopDecision {
    if state.evaluations > 0 && state.since_improvement >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

pub const PAIRS_HEADER: &str = "user,label,score";

/// Scored examples at full precision, one per line.
pub fn pairs_csv(scored: &[ScoredExample]) -> String {
    let mut s = format!("{PAIRS_HEADER}\n");
    for p in scored {
        let _ = writeln!(s, "{},{},{:?}", p.user, p.label, p.score);
    }
    s
}

pub fn parse_pairs(text: &str) -> Result<Vec<ScoredExample>> {
    let mut lines = text.lines();
    if lines.next() != Some(PAIRS_HEADER) {
        return Err(Error::Data(format!("pairs file must start with `{PAIRS_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Data(format!("bad pairs line `{l}`"));
            let [u, y, p] = l.split(',').collect::<Vec<_>>()[..] else {
                return Err(bad());
            };
            Ok(ScoredExample::new(
                u.parse().map_err(|_| bad())?,
                y.parse().map_err(|_| bad())?,
                p.parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub const EPOCH_LOG_HEADER: &str = "epoch,stage,split,loss,auc,uauc,logloss,precision,recall,f1,accuracy,lr,seconds";
pub const GRAD_LOG_HEADER: &str = "epoch,stage,component,grad_norm";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: String,
    pub split: String,
    pub loss: Real,
    pub report: Option<MetricReport>,
    pub lr: Real,
    pub seconds: Real,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let metrics = self.report.as_ref().map_or_else(
            || vec!["nan"; METRIC_COLUMNS.len()].join(","),
            MetricReport::csv_fields,
        );
        format!(
            "{},{},{},{:.6},{metrics},{:e},{:.3}",
            self.epoch, self.stage, self.split, self.loss, self.lr, self.seconds
        )
    }
}

impl EpochRow {
    /// Inverse of [`EpochRow::csv_line`] up to the printed precision. Only the
    /// seven metric columns of the report survive.
    pub fn parse_csv(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad epoch-log line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<Real>().map_err(|_| bad());
        let metrics: Vec<Real> = f[4..11].iter().map(|s| num(s)).collect::<Result<_>>()?;
        let report = if metrics.iter().all(|v| v.is_nan()) {
            None
        } else {
            let opt = |v: Real| (!v.is_nan()).then_some(v);
            Some(MetricReport {
                n: 0,
                auc: opt(metrics[0]),
                uauc: opt(metrics[1]),
                logloss: metrics[2],
                precision: metrics[3],
                recall: metrics[4],
                f1: metrics[5],
                accuracy: metrics[6],
                auc_undefined: metrics[0].is_nan(),
                uauc_skipped_users: 0,
                zero_division: false,
                stddev: None,
            })
        };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            stage: f[1].to_string(),
            split: f[2].to_string(),
            loss: num(f[3])?,
            report,
            lr: num(f[11])?,
            seconds: num(f[12])?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub rows: Vec<EpochRow>,
    pub grad_rows: Vec<(usize, String, Component, Real)>,
}

impl EpochLog {
    pub fn csv(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn grad_csv(&self) -> String {
        let mut s = format!("{GRAD_LOG_HEADER}\n");
        for (e, st, c, n) in &self.grad_rows {
            let _ = writeln!(s, "{e},{st},{},{n:e}", c.name());
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("epochs.csv", self.csv()), ("grad_norms.csv", self.grad_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Validation rows of one stage, in epoch order.
    pub fn validation(&self, stage: &str) -> impl Iterator<Item = &EpochRow> {
        let stage = stage.to_string();
        self.rows
            .iter()
            .filter(move |r| r.stage == stage && r.split == "validation")
    }
}

/// Wall-clock seconds since `t`.
pub fn seconds(t: Instant) -> Real {
    t.elapsed().as_secs_f64()
}
