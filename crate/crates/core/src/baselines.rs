//! Comparison models: matrix factorization, an MLP over ID embeddings, a
//! first-order Markov chain and a GRU session model, plus the two language-model
//! variants (untrained prompting and text-only LoRA tuning).

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use crate::data::{LabeledExample, SplitBundle};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredExample};
use crate::nn;
use crate::optim::OptimizerState;
use crate::orchestrate::{Runner, Stage, StageSummary};
use crate::param::{Component, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::system::{Predictor, System, SystemConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Real, Tensor};
use crate::training::{self, EpochLog, EpochRow, RunnerState, StopDecision, TrainConfig};
use crate::vocab::Vocab;

/// A network that maps one labelled example to `ŷ`, with weights in a
/// separate store.
pub trait ScoreNet {
    fn score(&self, tape: &mut Tape<'_>, ex: &LabeledExample, mode: Mode, rng: &mut RngStream) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Baseline<N> {
    pub store: ParamStore,
    pub net: N,
}

impl<N: ScoreNet> Baseline<N> {
    pub fn predict(&self, ex: &LabeledExample) -> Result<Real> {
        let mut tape = Tape::new(&self.store);
        let mut rng = RngStream::new(0);
        let y = self.net.score(&mut tape, ex, Mode::Eval, &mut rng)?;
        Ok(tape.scalar(y))
    }

    pub fn evaluate(&self, split: &[LabeledExample]) -> Result<(MetricReport, Vec<ScoredExample>)> {
        training::evaluate_epoch(split, |ex| self.predict(ex))
    }

    /// BCE training with validation-AUC early stopping; the best weights are
    /// restored at the end.
    pub fn fit(&mut self, bundle: &SplitBundle, cfg: &TrainConfig, name: &str) -> Result<FitOutcome> {
        cfg.validate()?;
        let mut opt = OptimizerState::new(&self.store, cfg.adamw());
        let mut schedule = cfg.schedule(bundle.train.len());
        let mut rng = RngStream::new(cfg.seed).derive(0xBA5E);
        let mut state = RunnerState::new(cfg.monitor);
        let mut log = EpochLog::default();
        let mut best = self.store.snapshot();
        let mut offset = 0;
        for epoch in 1..=cfg.max_epochs {
            let t = Instant::now();
            let net = &self.net;
            let out = training::train_epoch(
                &mut self.store,
                &mut opt,
                &bundle.train,
                cfg,
                &mut schedule,
                &mut rng,
                offset,
                |tape, ex, rng| net.score(tape, ex, Mode::Train, rng),
            )?;
            offset += out.batches;
            let t_train = training::seconds(t);
            let t = Instant::now();
            let (val, _) = self.evaluate(&bundle.validation)?;
            let t_val = training::seconds(t);
            log.rows.push(EpochRow {
                epoch,
                stage: name.to_string(),
                split: "train".into(),
                loss: out.loss,
                report: Some(MetricReport::evaluate(&out.predictions)?),
                lr: out.last_lr,
                seconds: t_train,
            });
            let value = cfg.monitor.value(&val);
            log.rows.push(EpochRow {
                epoch,
                stage: name.to_string(),
                split: "validation".into(),
                loss: val.logloss,
                report: Some(val),
                lr: out.last_lr,
                seconds: t_val,
            });
            if state.observe(epoch, value) {
                best = self.store.snapshot();
            }
            if training::early_stop_check(&state, cfg.patience) == StopDecision::Stop {
                break;
            }
        }
        for (id, v) in self.store.ids().collect::<Vec<_>>().into_iter().zip(best) {
            *self.store.value_mut(id) = v;
        }
        Ok(FitOutcome {
            log,
            epochs: state.epoch,
            best: state.best,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub log: EpochLog,
    pub epochs: usize,
    pub best: Option<(Real, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub factors: usize,
    pub ncf_hidden: Vec<usize>,
    pub rnn_hidden: usize,
    /// Most recent history items fed to the recurrent model.
    pub rnn_window: usize,
    /// Standard deviation of the embedding init; 0 gives an all-zero model.
    pub init_std: Real,
    pub train: TrainConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            factors: 32,
            ncf_hidden: vec![64, 32],
            rnn_hidden: 64,
            rnn_window: 25,
            init_std: 0.1,
            train: TrainConfig {
                batch_size: 64,
                max_epochs: 40,
                patience: 5,
                peak_lr: 5e-3,
                ..TrainConfig::default()
            },
        }
    }
}

fn table(store: &mut ParamStore, name: &str, rows: usize, cols: usize, std: Real, rng: &mut RngStream) -> ParamId {
    let t = if std == 0.0 {
        Tensor::zeros(&[rows, cols])
    } else {
        Tensor::randn(&[rows, cols], std, rng)
    };
    store.add(name, Component::Baseline, t)
}

fn seen_ids(train: &[LabeledExample]) -> (HashSet<usize>, HashSet<usize>) {
    (
        train.iter().map(|e| e.user).collect(),
        train.iter().map(|e| e.item).collect(),
    )
}

/// `ŷ = σ(u·v + b_u + b_i + b₀)`.
#[derive(Clone, Debug)]
pub struct MfNet {
    pub user_f: ParamId,
    pub item_f: ParamId,
    pub user_b: ParamId,
    pub item_b: ParamId,
    pub global_b: ParamId,
    pub seen_users: HashSet<usize>,
    pub seen_items: HashSet<usize>,
}

pub type MfModel = Baseline<MfNet>;

impl MfModel {
    pub fn new(num_users: usize, num_items: usize, factors: usize, init_std: Real, seed: u64) -> Result<Self> {
        if factors == 0 {
            return Err(Error::Config("MF needs at least one factor".into()));
        }
        let mut rng = RngStream::new(seed).derive(0x3F);
        let mut store = ParamStore::new();
        let net = MfNet {
            user_f: table(&mut store, "mf.user_f", num_users + 1, factors, init_std, &mut rng),
            item_f: table(&mut store, "mf.item_f", num_items + 1, factors, init_std, &mut rng),
            user_b: table(&mut store, "mf.user_b", num_users + 1, 1, 0.0, &mut rng),
            item_b: table(&mut store, "mf.item_b", num_items + 1, 1, 0.0, &mut rng),
            global_b: table(&mut store, "mf.global_b", 1, 1, 0.0, &mut rng),
            seen_users: HashSet::new(),
            seen_items: HashSet::new(),
        };
        Ok(Self { store, net })
    }

    /// Records which IDs have training data; everything else falls back to
    /// biases.
    pub fn observe(&mut self, train: &[LabeledExample]) {
        (self.net.seen_users, self.net.seen_items) = seen_ids(train);
    }
}

impl ScoreNet for MfNet {
    fn score(&self, tape: &mut Tape<'_>, ex: &LabeledExample, _: Mode, _: &mut RngStream) -> Result<Var> {
        let known_u = self.seen_users.contains(&ex.user);
        let known_i = self.seen_items.contains(&ex.item);
        let mut s = tape.param(self.global_b);
        if known_u {
            let t = tape.param(self.user_b);
            let b = tape.gather_rows(t, &[ex.user], None)?;
            s = tape.add(s, b)?;
        }
        if known_i {
            let t = tape.param(self.item_b);
            let b = tape.gather_rows(t, &[ex.item], None)?;
            s = tape.add(s, b)?;
        }
        if known_u && known_i {
            let ut = tape.param(self.user_f);
            let u = tape.gather_rows(ut, &[ex.user], None)?;
            let it = tape.param(self.item_f);
            let v = tape.gather_rows(it, &[ex.item], None)?;
            let dot = tape.matmul_t(u, false, v, true)?;
            s = tape.add(s, dot)?;
        }
        Ok(tape.sigmoid(s))
    }
}

/// User and item embeddings, concatenated, through a ReLU MLP.
#[derive(Clone, Debug)]
pub struct NcfNet {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    pub layers: Vec<(ParamId, ParamId)>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub type NcfModel = Baseline<NcfNet>;

impl NcfModel {
    pub fn new(num_users: usize, num_items: usize, factors: usize, hidden: &[usize], init_std: Real, seed: u64) -> Result<Self> {
        if factors == 0 || hidden.contains(&0) {
            return Err(Error::Config("NCF dimensions must be ≥ 1".into()));
        }
        let mut rng = RngStream::new(seed).derive(0x2CF);
        let mut store = ParamStore::new();
        let user_emb = table(&mut store, "ncf.user_emb", num_users + 1, factors, init_std, &mut rng);
        let item_emb = table(&mut store, "ncf.item_emb", num_items + 1, factors, init_std, &mut rng);
        let zero = init_std == 0.0;
        let mut d = 2 * factors;
        let mut layers = Vec::new();
        for (l, &h) in hidden.iter().enumerate() {
            let w = if zero { Tensor::zeros(&[d, h]) } else { nn::init_weight(d, h, &mut rng) };
            layers.push((
                store.add(format!("ncf.mlp{l}.w"), Component::Baseline, w),
                store.add(format!("ncf.mlp{l}.b"), Component::Baseline, Tensor::zeros(&[h])),
            ));
            d = h;
        }
        let w = if zero { Tensor::zeros(&[d, 1]) } else { nn::init_weight(d, 1, &mut rng) };
        let out_w = store.add("ncf.out.w", Component::Baseline, w);
        let out_b = store.add("ncf.out.b", Component::Baseline, Tensor::zeros(&[1]));
        Ok(Self {
            store,
            net: NcfNet {
                user_emb,
                item_emb,
                layers,
                out_w,
                out_b,
            },
        })
    }
}

impl ScoreNet for NcfNet {
    fn score(&self, tape: &mut Tape<'_>, ex: &LabeledExample, _: Mode, _: &mut RngStream) -> Result<Var> {
        let ut = tape.param(self.user_emb);
        let u = tape.gather_rows(ut, &[ex.user], None)?;
        let it = tape.param(self.item_emb);
        let v = tape.gather_rows(it, &[ex.item], None)?;
        let mut x = tape.concat_cols(&[u, v])?;
        for &(w, b) in &self.layers {
            let h = nn::linear(tape, x, w, Some(b))?;
            x = tape.relu(h);
        }
        let logit = nn::linear(tape, x, self.out_w, Some(self.out_b))?;
        Ok(tape.sigmoid(logit))
    }
}

/// Gated recurrent encoder over the recent history, scored against the
/// candidate embedding: `ŷ = σ(⟨h_T W_o, e_cand⟩ + b)`.
#[derive(Clone, Debug)]
pub struct RnnNet {
    pub item_emb: ParamId,
    /// Input-to-gate weights for update, reset and candidate.
    pub wx: [ParamId; 3],
    pub wh: [ParamId; 3],
    pub bias: [ParamId; 3],
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub hidden: usize,
    pub window: usize,
}

pub type RnnModel = Baseline<RnnNet>;

impl RnnModel {
    pub fn new(num_items: usize, hidden: usize, window: usize, init_std: Real, seed: u64) -> Result<Self> {
        if hidden == 0 || window == 0 {
            return Err(Error::Config("RNN hidden size and window must be ≥ 1".into()));
        }
        let mut rng = RngStream::new(seed).derive(0x6E0);
        let mut store = ParamStore::new();
        let item_emb = table(&mut store, "rnn.item_emb", num_items + 1, hidden, init_std, &mut rng);
        let gates = ["z", "r", "n"];
        let wx = gates.map(|g| store.add(format!("rnn.wx_{g}"), Component::Baseline, nn::init_weight(hidden, hidden, &mut rng)));
        let wh = gates.map(|g| store.add(format!("rnn.wh_{g}"), Component::Baseline, nn::init_weight(hidden, hidden, &mut rng)));
        let bias = gates.map(|g| store.add(format!("rnn.b_{g}"), Component::Baseline, Tensor::zeros(&[hidden])));
        let out_w = store.add("rnn.out.w", Component::Baseline, nn::init_weight(hidden, hidden, &mut rng));
        let out_b = store.add("rnn.out.b", Component::Baseline, Tensor::zeros(&[1, 1]));
        Ok(Self {
            store,
            net: RnnNet {
                item_emb,
                wx,
                wh,
                bias,
                out_w,
                out_b,
                hidden,
                window,
            },
        })
    }
}

impl RnnNet {
    /// One GRU step: `h' = (1 − z) ⊙ n + z ⊙ h`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape<'_>, g: usize, hin: Var| -> Result<Var> {
            let a = nn::linear(tape, x, self.wx[g], Some(self.bias[g]))?;
            let whv = tape.param(self.wh[g]);
            let b = tape.matmul(hin, whv)?;
            tape.add(a, b)
        };
        let z = gate(tape, 0, h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, 1, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = gate(tape, 2, rh)?;
        let n = tape.tanh(n);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }

    /// Final hidden state over the most recent `window` items; zero when the
    /// history is empty.
    pub fn encode(&self, tape: &mut Tape<'_>, history: &[usize]) -> Result<Var> {
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let recent = &history[history.len().saturating_sub(self.window)..];
        if recent.is_empty() {
            return Ok(h);
        }
        let table = tape.param(self.item_emb);
        let xs = tape.gather_rows(table, recent, None)?;
        for t in 0..recent.len() {
            let x = tape.slice_rows(xs, t, 1)?;
            h = self.step(tape, x, h)?;
        }
        Ok(h)
    }
}

impl ScoreNet for RnnNet {
    fn score(&self, tape: &mut Tape<'_>, ex: &LabeledExample, _: Mode, _: &mut RngStream) -> Result<Var> {
        let h = self.encode(tape, &ex.history)?;
        let q = nn::linear(tape, h, self.out_w, None)?;
        let table = tape.param(self.item_emb);
        let e = tape.gather_rows(table, &[ex.item], None)?;
        let s = tape.matmul_t(q, false, e, true)?;
        let b = tape.param(self.out_b);
        let s = tape.add(s, b)?;
        Ok(tape.sigmoid(s))
    }
}

/// First-order transition counts over consecutive liked training items.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct McModel {
    pub num_items: usize,
    pub counts: BTreeMap<usize, BTreeMap<usize, u64>>,
    /// Each user's most recent liked training item.
    pub last_item: BTreeMap<usize, usize>,
}

impl McModel {
    pub fn fit(train: &[LabeledExample], num_items: usize) -> Self {
        let mut by_user: BTreeMap<usize, Vec<&LabeledExample>> = BTreeMap::new();
        for e in train.iter().filter(|e| e.label == 1) {
            by_user.entry(e.user).or_default().push(e);
        }
        let mut m = Self {
            num_items,
            ..Self::default()
        };
        for (user, mut xs) in by_user {
            xs.sort_by_key(|e| (e.timestamp, e.item));
            let items: Vec<usize> = xs.iter().map(|e| e.item).collect();
            m.add_sequence(&items);
            if let Some(&last) = items.last() {
                m.last_item.insert(user, last);
            }
        }
        m
    }

    /// Counts the transitions of one ordered sequence.
    pub fn add_sequence(&mut self, items: &[usize]) {
        for w in items.windows(2) {
            *self.counts.entry(w[0]).or_default().entry(w[1]).or_insert(0) += 1;
        }
    }

    /// `P(j | i)`; unseen rows are uniform.
    pub fn prob(&self, i: usize, j: usize) -> Real {
        match self.counts.get(&i) {
            Some(row) => {
                let total: u64 = row.values().sum();
                row.get(&j).copied().unwrap_or(0) as Real / total as Real
            }
            None => 1.0 / self.num_items.max(1) as Real,
        }
    }

    /// Normalized observed row of `i`.
    pub fn row(&self, i: usize) -> Option<BTreeMap<usize, Real>> {
        let row = self.counts.get(&i)?;
        let total: u64 = row.values().sum();
        Some(row.iter().map(|(&j, &c)| (j, c as Real / total as Real)).collect())
    }

    pub fn predict(&self, user: usize, candidate: usize) -> Real {
        match self.last_item.get(&user) {
            Some(&last) => self.prob(last, candidate),
            None => 1.0 / self.num_items.max(1) as Real,
        }
    }

    pub fn evaluate(&self, split: &[LabeledExample]) -> Result<(MetricReport, Vec<ScoredExample>)> {
        training::evaluate_epoch(split, |ex| Ok(self.predict(ex.user, ex.item)))
    }
}

/// Per-seed and aggregated results of a stochastic variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantReport {
    pub per_seed: Vec<(u64, MetricReport)>,
    pub aggregate: MetricReport,
}

/// Prompting an untrained language model with text-only prompts, once per
/// seed (each seed is a different initialisation).
pub fn icl_variant(
    config: &SystemConfig,
    vocab: &Vocab,
    split: &[LabeledExample],
    bundle: &SplitBundle,
    seeds: &[u64],
) -> Result<VariantReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let sys = System::new(config.clone(), vocab.clone(), seed)?;
        let (rep, _) = training::evaluate_epoch(split, |ex| sys.predict(ex, &bundle.titles, Predictor::Textual))?;
        per_seed.push((seed, rep));
    }
    let reports: Vec<MetricReport> = per_seed.iter().map(|(_, r)| r.clone()).collect();
    let aggregate = MetricReport::aggregate(&reports).expect("nonempty");
    Ok(VariantReport { per_seed, aggregate })
}

/// LoRA tuning on text-only prompts (Stage B alone). Fails if the encoder or
/// mapping layer was read at any point.
pub fn tallrec_variant(runner: &mut Runner<'_>, sys: &mut System, cfg: &TrainConfig) -> Result<StageSummary> {
    sys.store.reset_read_counts();
    let summary = runner.run_llm_stage(sys, Stage::B, cfg)?;
    check_text_only(&sys.store)?;
    Ok(summary)
}

/// The exclusion contract of text-only models.
pub fn check_text_only(store: &ParamStore) -> Result<()> {
    for c in [Component::Sasrec, Component::Mapping] {
        let reads = store.component_reads(c);
        if reads > 0 {
            return Err(Error::Verification(format!(
                "text-only variant read {} parameters {reads} times",
                c.name()
            )));
        }
    }
    Ok(())
}

/// Text-only evaluation of a trained system, with the read check applied.
pub fn evaluate_text_only(sys: &System, split: &[LabeledExample], bundle: &SplitBundle) -> Result<(MetricReport, Vec<ScoredExample>)> {
    sys.store.reset_read_counts();
    let out = training::evaluate_epoch(split, |ex| sys.predict(ex, &bundle.titles, Predictor::Textual))?;
    check_text_only(&sys.store)?;
    Ok(out)
}
