//! The command layer: prepare → train → evaluate → ablate → report → verify
//! over one run directory.
//!
//! Layout under `run_dir`:
//! `bundle.tsv`, `stats.txt`, `ablation.csv`, and per model
//! `<model>/report.csv`, `<model>/report.meta`, `<model>/figures/`,
//! `<model>/seed_<s>/{checkpoints,pairs,epochs.csv,grad_norms.csv,predictions_<split>.csv}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::baselines::{check_text_only, McModel, MfModel, NcfModel, RnnModel};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Dataset, ExperimentConfig, ModelKind};
use crate::data::{self, LabeledExample, RatingRecord, SplitBundle};
use crate::error::{Error, Result};
use crate::metrics::{relative_improvement, MetricReport, ScoredExample, METRIC_COLUMNS};
use crate::orchestrate::{Runner, Stage, StageSummary};
use crate::param::{Component, ParamStore};
use crate::synthetic;
use crate::system::{build_vocab, Predictor, System};
use crate::tensor::Real;
use crate::training::{self, EpochRow, EPOCH_LOG_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNEXPECTED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Split(_) | Error::Io { .. } | Error::Prompt(_) | Error::Context { .. } => EXIT_DATA,
        Error::TrainingAbort { .. } | Error::Orchestration(_) | Error::Checkpoint { .. } => EXIT_TRAINING,
        Error::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_UNEXPECTED,
    }
}

/// Tolerance of `verify` when recomputing logged metrics.
pub const VERIFY_TOLERANCE: Real = 1e-6;

/// The set of models compared by `ablate`.
pub const ABLATION_MEMBERS: [ModelKind; 4] = [
    ModelKind::SasrecLlm,
    ModelKind::Sasrec,
    ModelKind::TallrecVariant,
    ModelKind::IclVariant,
];

const REPORT_HEADER: &str = "model,seed,split,n,auc,uauc,logloss,precision,recall,f1,accuracy";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareSummary {
    pub bundle_path: PathBuf,
    pub stats: data::DatasetStats,
    pub lines: usize,
    pub rejected: usize,
    pub split_sizes: [usize; 5],
    pub data_hash: u64,
}

/// One row of a `report.csv`: a seed's result on a split, or the across-seed
/// mean / sample std.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub seed: String,
    pub split: String,
    pub n: usize,
    pub values: [Real; 7],
}

impl ReportRow {
    fn new(model: ModelKind, seed: String, split: &str, n: usize, values: [Real; 7]) -> Self {
        Self {
            model: model.name().into(),
            seed,
            split: split.into(),
            n,
            values,
        }
    }

    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self
            .values
            .iter()
            .map(|v| if v.is_nan() { "nan".into() } else { format!("{v:.6}") })
            .collect();
        format!("{},{},{},{},{}", self.model, self.seed, self.split, self.n, vals.join(","))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad report line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 + METRIC_COLUMNS.len() {
            return Err(bad());
        }
        let mut values = [0.0; 7];
        for (v, s) in values.iter_mut().zip(&f[4..]) {
            *v = s.parse().map_err(|_| bad())?;
        }
        Ok(Self {
            model: f[0].into(),
            seed: f[1].into(),
            split: f[2].into(),
            n: f[3].parse().map_err(|_| bad())?,
            values,
        })
    }

    pub fn auc(&self) -> Real {
        self.values[0]
    }

    pub fn uauc(&self) -> Real {
        self.values[1]
    }
}

/// A model's evaluation over all seeds and splits, plus what it was computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub model: ModelKind,
    pub config_hash: String,
    pub data_hash: u64,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn meta(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "model = {}\nconfig_hash = {}\ndata_hash = {:016x}\nseeds = {}\n",
            self.model.name(),
            self.config_hash,
            self.data_hash,
            seeds.join(",")
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write(&dir.join("report.csv"), &self.csv())?;
        write(&dir.join("report.meta"), &self.meta())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read(&dir.join("report.meta"))?;
        let kv: BTreeMap<&str, &str> = meta
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let bad = |k: &str| Error::Data(format!("{}: bad or missing `{k}`", dir.join("report.meta").display()));
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(k));
        let csv = read(&dir.join("report.csv"))?;
        let mut lines = csv.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Data(format!("{}: unexpected header", dir.join("report.csv").display())));
        }
        Ok(Self {
            model: get("model")?.parse()?,
            config_hash: get("config_hash")?.to_string(),
            data_hash: u64::from_str_radix(get("data_hash")?, 16).map_err(|_| bad("data_hash"))?,
            seeds: get("seeds")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad("seeds")))
                .collect::<Result<_>>()?,
            rows: lines.filter(|l| !l.is_empty()).map(ReportRow::parse).collect::<Result<_>>()?,
        })
    }

    pub fn row(&self, seed: &str, split: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.seed == seed && r.split == split)
    }

    /// The across-seed mean row of a split.
    pub fn mean(&self, split: &str) -> Option<&ReportRow> {
        self.row("mean", split)
    }
}

/// Relative improvement of `ours` over `base` on a split; only meaningful when
/// both were computed on the same bundle.
pub fn rel_imp(ours: &RunReport, base: &RunReport, split: &str) -> Result<Real> {
    if ours.data_hash != base.data_hash {
        return Err(Error::Verification(format!(
            "{} and {} were evaluated on different data ({:016x} vs {:016x})",
            ours.model.name(),
            base.model.name(),
            ours.data_hash,
            base.data_hash
        )));
    }
    let missing = |m: ModelKind| Error::Data(format!("{} has no mean row for `{split}`", m.name()));
    let o = ours.mean(split).ok_or_else(|| missing(ours.model))?;
    let b = base.mean(split).ok_or_else(|| missing(base.model))?;
    Ok(relative_improvement(o.auc(), o.uauc(), b.auc(), b.uauc()))
}

/// A model restored for scoring.
pub enum Trained {
    Hybrid(Box<System>, Predictor),
    Mf(MfModel),
    Ncf(NcfModel),
    Rnn(RnnModel),
    Mc(McModel),
}

impl Trained {
    pub fn predict(&self, ex: &LabeledExample, bundle: &SplitBundle) -> Result<Real> {
        match self {
            Trained::Hybrid(sys, p) => sys.predict(ex, &bundle.titles, *p),
            Trained::Mf(m) => m.predict(ex),
            Trained::Ncf(m) => m.predict(ex),
            Trained::Rnn(m) => m.predict(ex),
            Trained::Mc(m) => Ok(m.predict(ex.user, ex.item)),
        }
    }

    /// Scores a split; text-only predictors are checked never to touch the
    /// encoder or mapping weights.
    pub fn evaluate(&self, split: &[LabeledExample], bundle: &SplitBundle) -> Result<(MetricReport, Vec<ScoredExample>)> {
        let text_only = matches!(self, Trained::Hybrid(_, Predictor::Textual));
        if let Trained::Hybrid(sys, _) = self {
            sys.store.reset_read_counts();
        }
        let out = training::evaluate_epoch(split, |ex| self.predict(ex, bundle))?;
        if let (true, Trained::Hybrid(sys, _)) = (text_only, self) {
            check_text_only(&sys.store)?;
        }
        Ok(out)
    }
}

fn split<'b>(bundle: &'b SplitBundle, name: &str) -> Result<&'b [LabeledExample]> {
    Ok(match name {
        "train" => &bundle.train,
        "validation" => &bundle.validation,
        "test" => &bundle.test,
        "warm_test" => &bundle.warm_test,
        "cold_test" => &bundle.cold_test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    })
}

fn baseline_hashes(kind: ModelKind, cfg: &ExperimentConfig, store: &ParamStore) -> BTreeMap<Component, String> {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update(format!("{:?}", cfg.model.baseline).as_bytes());
    for (_, p) in store.iter() {
        h.update(p.name.as_bytes());
        h.update(format!("{:?}", p.value.shape()).as_bytes());
    }
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    BTreeMap::from([(Component::Baseline, digest)])
}

/// Result of training one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
    /// Epochs run by a single-network baseline.
    pub epochs: usize,
    pub seconds: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: ModelKind,
    /// `(auc, uauc, auc std, uauc std)` per split.
    pub splits: BTreeMap<String, [Real; 4]>,
    pub missing: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySummary {
    pub checked: usize,
    pub max_deviation: Real,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub resume: bool,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Self {
        Self { cfg, resume }
    }

    fn run_dir(&self) -> &Path {
        &self.cfg.data.run_dir
    }

    pub fn model_dir(&self, model: ModelKind) -> PathBuf {
        self.run_dir().join(model.name())
    }

    pub fn seed_dir(&self, model: ModelKind, seed: u64) -> PathBuf {
        self.model_dir(model).join(format!("seed_{seed}"))
    }

    fn records(&self) -> Result<(Vec<RatingRecord>, usize, usize)> {
        let d = &self.cfg.data;
        self.cfg.check_inputs()?;
        let (mut records, lines, rejected) = match d.dataset {
            Dataset::Synthetic => {
                let w = synthetic::generate(&d.synthetic)?;
                let n = w.records.len();
                (w.records, n, 0)
            }
            Dataset::MovieLens => {
                let (r, m) = (d.ratings.as_deref(), d.movies.as_deref());
                let o = data::parse_movielens(r.expect("checked"), m.expect("checked"))?;
                (o.records, o.lines, o.rejected)
            }
            Dataset::Amazon => {
                let o = data::parse_amazon_books(d.ratings.as_deref().expect("checked"))?;
                (data::reduce_amazon(o.records), o.lines, o.rejected)
            }
        };
        if d.max_users > 0 && d.dataset != Dataset::Synthetic {
            let users: BTreeSet<usize> = records.iter().map(|r| r.user).collect();
            let keep: BTreeSet<usize> = users.into_iter().take(d.max_users).collect();
            records.retain(|r| keep.contains(&r.user));
        }
        Ok((records, lines, rejected))
    }

    /// Parses, binarizes and splits the configured dataset into a bundle.
    pub fn prepare(&self) -> Result<PrepareSummary> {
        let (records, lines, rejected) = self.records().map_err(|e| e.in_stage("parse"))?;
        let stats = data::record_stats(&records);
        let bundle = data::prepare_bundle(&records).map_err(|e| e.in_stage("split"))?;
        let path = self.cfg.data.bundle_path();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        bundle.save(&path).map_err(|e| e.in_stage("write"))?;
        let split_sizes = [
            bundle.train.len(),
            bundle.validation.len(),
            bundle.test.len(),
            bundle.warm_test.len(),
            bundle.cold_test.len(),
        ];
        let summary = PrepareSummary {
            bundle_path: path.clone(),
            stats,
            lines,
            rejected,
            split_sizes,
            data_hash: bundle.content_hash(),
        };
        let s = &summary.stats;
        let text = format!(
            "records = {}\nusers = {}\nitems = {}\npositives = {}\nnegatives = {}\nlines = {lines}\nrejected = {rejected}\n\
             train = {}\nvalidation = {}\ntest = {}\nwarm_test = {}\ncold_test = {}\ndata_hash = {:016x}\n",
            s.records,
            s.users,
            s.items,
            s.positives,
            s.negatives,
            split_sizes[0],
            split_sizes[1],
            split_sizes[2],
            split_sizes[3],
            split_sizes[4],
            summary.data_hash
        );
        write(&path.with_file_name("stats.txt"), &text)?;
        Ok(summary)
    }

    pub fn load_bundle(&self) -> Result<SplitBundle> {
        let path = self.cfg.data.bundle_path();
        if !path.is_file() {
            return Err(Error::Data(format!("{} not found; run `prepare` first", path.display())));
        }
        SplitBundle::load(&path)
    }

    fn fresh_system(&self, bundle: &SplitBundle, seed: u64) -> Result<System> {
        let vocab = build_vocab(&bundle.titles)?;
        let cfg = self.cfg.model.system(bundle.num_items(), vocab.len());
        System::new(cfg, vocab, seed)
    }

    /// Builds an untrained model of `kind` for a seed.
    fn fresh(&self, kind: ModelKind, bundle: &SplitBundle, seed: u64) -> Result<Trained> {
        let b = &self.cfg.model.baseline;
        let (users, items) = (bundle.num_users(), bundle.num_items());
        Ok(match kind {
            ModelKind::SasrecLlm => Trained::Hybrid(Box::new(self.fresh_system(bundle, seed)?), Predictor::Hybrid),
            ModelKind::Sasrec => Trained::Hybrid(Box::new(self.fresh_system(bundle, seed)?), Predictor::Sasrec),
            ModelKind::TallrecVariant | ModelKind::IclVariant => {
                Trained::Hybrid(Box::new(self.fresh_system(bundle, seed)?), Predictor::Textual)
            }
            ModelKind::Mf => {
                let mut m = MfModel::new(users, items, b.factors, b.init_std, seed)?;
                m.observe(&bundle.train);
                Trained::Mf(m)
            }
            ModelKind::Ncf => Trained::Ncf(NcfModel::new(users, items, b.factors, &b.ncf_hidden, b.init_std, seed)?),
            ModelKind::Rnn => Trained::Rnn(RnnModel::new(items, b.rnn_hidden, b.rnn_window, b.init_std, seed)?),
            ModelKind::Mc => Trained::Mc(McModel::fit(&bundle.train, items)),
        })
    }

    pub fn train(&self) -> Result<Vec<TrainSummary>> {
        let bundle = self.load_bundle()?;
        let kind = self.cfg.model.kind;
        self.cfg
            .train
            .seeds
            .iter()
            .map(|&seed| self.train_seed(kind, &bundle, seed))
            .collect()
    }

    pub fn train_seed(&self, kind: ModelKind, bundle: &SplitBundle, seed: u64) -> Result<TrainSummary> {
        let t = Instant::now();
        let dir = self.seed_dir(kind, seed);
        let stages_cfg = self.cfg.stages_for_seed(seed);
        let mut summary = TrainSummary {
            model: kind,
            seed,
            stages: Vec::new(),
            epochs: 0,
            seconds: 0.0,
        };
        let mut model = self.fresh(kind, bundle, seed)?;
        let mut runner = Runner::new(bundle, &dir, self.resume);
        runner.log_pairs = self.cfg.train.log_pairs;
        match (&mut model, kind) {
            (Trained::Hybrid(sys, _), ModelKind::SasrecLlm) => {
                summary.stages = runner.dual_stage(sys, &stages_cfg)?;
            }
            (Trained::Hybrid(sys, _), ModelKind::Sasrec) => {
                summary.stages = vec![runner.run_stage_a(sys, &stages_cfg.a).map_err(|e| e.in_stage("stage A"))?];
            }
            (Trained::Hybrid(sys, _), ModelKind::TallrecVariant) => {
                let s = crate::baselines::tallrec_variant(&mut runner, sys, &stages_cfg.b)
                    .map_err(|e| e.in_stage("stage B"))?;
                summary.stages = vec![s];
            }
            (_, ModelKind::IclVariant | ModelKind::Mc) => {
                log::info!("{} has no trainable parameters; nothing to do", kind.name());
            }
            (net, _) => summary.epochs = self.fit_baseline(kind, net, bundle, seed, &dir)?,
        }
        summary.seconds = training::seconds(t);
        write(&dir.join("train_summary.txt"), &train_summary_text(&summary))?;
        Ok(summary)
    }

    fn fit_baseline(&self, kind: ModelKind, net: &mut Trained, bundle: &SplitBundle, seed: u64, dir: &Path) -> Result<usize> {
        let ckpt = dir.join("checkpoints").join("best");
        if self.resume && ckpt.join(checkpoint::MANIFEST).is_file() {
            log::info!("{} seed {seed}: reusing {}", kind.name(), ckpt.display());
            return Ok(0);
        }
        let cfg = training::TrainConfig {
            seed,
            ..self.cfg.train.baseline.clone()
        };
        let (out, store) = match net {
            Trained::Mf(m) => (m.fit(bundle, &cfg, kind.name())?, &m.store),
            Trained::Ncf(m) => (m.fit(bundle, &cfg, kind.name())?, &m.store),
            Trained::Rnn(m) => (m.fit(bundle, &cfg, kind.name())?, &m.store),
            Trained::Hybrid(..) | Trained::Mc(_) => unreachable!("not a fitted baseline"),
        };
        out.log.write(dir)?;
        let mut c = Checkpoint::capture(store, &baseline_hashes(kind, &self.cfg, store), &[])?;
        c.epoch = out.best.map_or(out.epochs, |b| b.1);
        c.stage = kind.name().into();
        c.monitor = cfg.monitor.name().into();
        c.monitor_value = out.best.map(|b| b.0);
        c.save(&ckpt)?;
        Ok(out.epochs)
    }

    /// Restores a trained model of `kind` from its seed directory.
    pub fn load_trained(&self, kind: ModelKind, bundle: &SplitBundle, seed: u64) -> Result<Trained> {
        let mut model = self.fresh(kind, bundle, seed)?;
        let ck = self.seed_dir(kind, seed).join("checkpoints");
        let open = |name: &str| -> Result<Checkpoint> {
            let dir = ck.join(name);
            if !dir.join(checkpoint::MANIFEST).is_file() {
                return Err(Error::Orchestration(format!(
                    "{} is missing; run `train` for {} seed {seed} first",
                    dir.display(),
                    kind.name()
                )));
            }
            Checkpoint::load(&dir)
        };
        match (&mut model, kind) {
            (Trained::Hybrid(sys, _), ModelKind::SasrecLlm) => {
                let h = sys.component_hashes();
                open(Stage::C.best_dir())?.restore(&mut sys.store, &h, &[])?;
            }
            (Trained::Hybrid(sys, _), ModelKind::Sasrec) => {
                let h = sys.component_hashes();
                open(Stage::A.best_dir())?.restore(&mut sys.store, &h, Stage::A.saved_components())?;
            }
            (Trained::Hybrid(sys, _), ModelKind::TallrecVariant) => {
                let h = sys.component_hashes();
                open(Stage::B.best_dir())?.restore(&mut sys.store, &h, Stage::B.saved_components())?;
            }
            (Trained::Mf(m), _) => {
                let h = baseline_hashes(kind, &self.cfg, &m.store);
                open("best")?.restore(&mut m.store, &h, &[])?;
            }
            (Trained::Ncf(m), _) => {
                let h = baseline_hashes(kind, &self.cfg, &m.store);
                open("best")?.restore(&mut m.store, &h, &[])?;
            }
            (Trained::Rnn(m), _) => {
                let h = baseline_hashes(kind, &self.cfg, &m.store);
                open("best")?.restore(&mut m.store, &h, &[])?;
            }
            _ => {}
        }
        Ok(model)
    }

    /// Evaluates `kind` on the configured splits for every seed, writing
    /// predictions and the report.
    pub fn evaluate_model(&self, kind: ModelKind, bundle: &SplitBundle) -> Result<RunReport> {
        let data_hash = bundle.content_hash();
        let mut rows = Vec::new();
        let mut per_split: BTreeMap<&str, Vec<MetricReport>> = BTreeMap::new();
        for &seed in &self.cfg.train.seeds {
            let model = self.load_trained(kind, bundle, seed)?;
            for name in &self.cfg.eval.splits {
                let (rep, scored) = model.evaluate(split(bundle, name)?, bundle)?;
                let path = self.seed_dir(kind, seed).join(format!("predictions_{name}.csv"));
                write(&path, &training::pairs_csv(&scored))?;
                rows.push(ReportRow::new(kind, seed.to_string(), name, rep.n, rep.values()));
                per_split.entry(name.as_str()).or_default().push(rep);
            }
        }
        for (name, reps) in &per_split {
            let agg = MetricReport::aggregate(reps).expect("one report per seed");
            rows.push(ReportRow::new(kind, "mean".into(), name, agg.n, agg.values()));
            let s = agg.stddev.as_deref().expect("aggregate has stddev");
            let std = [s.auc, s.uauc, s.logloss, s.precision, s.recall, s.f1, s.accuracy];
            rows.push(ReportRow::new(kind, "std".into(), name, agg.n, std));
        }
        let report = RunReport {
            model: kind,
            config_hash: self.cfg.hash(data_hash),
            data_hash,
            seeds: self.cfg.train.seeds.clone(),
            rows,
        };
        let dir = self.model_dir(kind);
        report.save(&dir)?;
        self.write_rel_imp(&report, &dir)?;
        Ok(report)
    }

    pub fn evaluate(&self) -> Result<RunReport> {
        let bundle = self.load_bundle()?;
        self.evaluate_model(self.cfg.model.kind, &bundle)
    }

    fn write_rel_imp(&self, ours: &RunReport, dir: &Path) -> Result<()> {
        if self.cfg.eval.baselines.is_empty() {
            return Ok(());
        }
        let mut s = String::from("baseline,split,rel_imp\n");
        for b in &self.cfg.eval.baselines {
            let base = RunReport::load(b)?;
            for name in &self.cfg.eval.splits {
                let v = rel_imp(ours, &base, name)?;
                let _ = writeln!(s, "{},{name},{v:.6}", base.model.name());
            }
        }
        write(&dir.join("rel_imp.csv"), &s)
    }

    /// Collects the ablation members' reports. Members that were never
    /// evaluated are flagged; the untrained prompting variant is evaluated on
    /// the spot since it needs no training.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        let bundle = self.load_bundle()?;
        let data_hash = bundle.content_hash();
        let mut rows = Vec::new();
        for kind in ABLATION_MEMBERS {
            let dir = self.model_dir(kind);
            let report = match RunReport::load(&dir) {
                Ok(r) if r.data_hash == data_hash => Some(r),
                Ok(_) => {
                    log::warn!("{}: report is for different data; ignoring it", kind.name());
                    None
                }
                Err(_) => None,
            };
            let report = match (report, kind) {
                (Some(r), _) => Some(r),
                (None, ModelKind::IclVariant) => Some(self.evaluate_model(kind, &bundle)?),
                (None, _) => {
                    log::warn!("{}: no report under {}", kind.name(), dir.display());
                    None
                }
            };
            let mut splits = BTreeMap::new();
            if let Some(r) = &report {
                for name in &self.cfg.eval.splits {
                    if let (Some(m), Some(s)) = (r.mean(name), r.row("std", name)) {
                        splits.insert(name.clone(), [m.auc(), m.uauc(), s.auc(), s.uauc()]);
                    }
                }
            }
            rows.push(AblationRow {
                model: kind,
                splits,
                missing: report.is_none(),
            });
        }
        let mut s = String::from("model,split,auc,uauc,auc_std,uauc_std,status\n");
        for r in &rows {
            if r.missing {
                let _ = writeln!(s, "{},,,,,,missing", r.model.name());
            }
            for (name, v) in &r.splits {
                let _ = writeln!(
                    s,
                    "{},{name},{:.6},{:.6},{:.6},{:.6},ok",
                    r.model.name(),
                    v[0],
                    v[1],
                    v[2],
                    v[3]
                );
            }
        }
        write(&self.run_dir().join("ablation.csv"), &s)?;
        Ok(rows)
    }

    /// Plot-ready tables: training curves per seed, a score histogram of the
    /// test predictions, and warm/cold AUC bars for every evaluated model.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let kind = self.cfg.model.kind;
        let fig = self.model_dir(kind).join("figures");
        let mut written = Vec::new();
        for &seed in &self.cfg.train.seeds {
            let epochs = self.seed_dir(kind, seed).join("epochs.csv");
            if !epochs.is_file() {
                continue;
            }
            let path = fig.join(format!("curves_seed_{seed}.csv"));
            write(&path, &curves_csv(&read(&epochs)?)?)?;
            written.push(path);
        }
        let mut scored = Vec::new();
        for &seed in &self.cfg.train.seeds {
            let p = self.seed_dir(kind, seed).join("predictions_test.csv");
            if p.is_file() {
                scored.extend(training::parse_pairs(&read(&p)?)?);
            }
        }
        if scored.is_empty() {
            return Err(Error::Data(format!(
                "no test predictions for {}; run `evaluate` first",
                kind.name()
            )));
        }
        let path = fig.join("histogram.csv");
        write(&path, &histogram_csv(&scored, self.cfg.eval.histogram_bins))?;
        written.push(path);
        let mut bars = String::from("model,warm_auc,cold_auc\n");
        for m in ModelKind::ALL {
            if let Ok(r) = RunReport::load(&self.model_dir(m)) {
                let get = |s: &str| r.mean(s).map_or(Real::NAN, ReportRow::auc);
                let _ = writeln!(bars, "{},{:.6},{:.6}", m.name(), get("warm_test"), get("cold_test"));
            }
        }
        let path = fig.join("warm_cold.csv");
        write(&path, &bars)?;
        written.push(path);
        Ok(written)
    }

    /// Recomputes every logged metric from the stored predictions and
    /// per-epoch pairs.
    pub fn verify(&self) -> Result<VerifySummary> {
        let kind = self.cfg.model.kind;
        let report = RunReport::load(&self.model_dir(kind))?;
        let bundle = self.load_bundle()?;
        if report.data_hash != bundle.content_hash() {
            return Err(Error::Verification("report was computed on a different bundle".into()));
        }
        let mut sum = VerifySummary {
            checked: 0,
            max_deviation: 0.0,
        };
        let mut check = |what: &str, logged: &[Real], recomputed: &[Real]| -> Result<()> {
            for (j, (a, b)) in logged.iter().zip(recomputed).enumerate() {
                if a.is_nan() && b.is_nan() {
                    continue;
                }
                let d = (a - b).abs();
                if d.is_nan() || d > VERIFY_TOLERANCE {
                    return Err(Error::Verification(format!(
                        "{what}: {} logged {a} but recomputes to {b}",
                        METRIC_COLUMNS[j]
                    )));
                }
                sum.max_deviation = sum.max_deviation.max(d);
                sum.checked += 1;
            }
            Ok(())
        };
        for &seed in &report.seeds {
            let dir = self.seed_dir(kind, seed);
            for name in &self.cfg.eval.splits {
                let row = report
                    .row(&seed.to_string(), name)
                    .ok_or_else(|| Error::Verification(format!("report lacks seed {seed} on {name}")))?;
                let preds = training::parse_pairs(&read(&dir.join(format!("predictions_{name}.csv")))?)?;
                if preds.len() != split(&bundle, name)?.len() {
                    return Err(Error::Verification(format!(
                        "seed {seed} {name}: {} predictions for {} examples",
                        preds.len(),
                        split(&bundle, name)?.len()
                    )));
                }
                let rep = MetricRecompute::rounded(&preds)?;
                check(&format!("seed {seed} {name}"), &row.values, &rep)?;
            }
            let epochs = dir.join("epochs.csv");
            let pairs = dir.join("pairs");
            if !epochs.is_file() || !pairs.is_dir() {
                continue;
            }
            let text = read(&epochs)?;
            for line in text.lines().skip(1) {
                let row = EpochRow::parse_csv(line)?;
                let p = pairs.join(crate::orchestrate::pairs_file_name(row.epoch, &row.split));
                let Some(logged) = row.report.as_ref() else { continue };
                if !p.is_file() {
                    continue;
                }
                let preds = training::parse_pairs(&read(&p)?)?;
                let rep = MetricRecompute::rounded(&preds)?;
                check(&format!("seed {seed} epoch {} {}", row.epoch, row.split), &logged.values(), &rep)?;
            }
            if text.lines().next() != Some(EPOCH_LOG_HEADER) {
                return Err(Error::Verification(format!("{}: unexpected header", epochs.display())));
            }
        }
        Ok(sum)
    }
}

/// Metrics as they would appear after printing with six decimals.
struct MetricRecompute;

impl MetricRecompute {
    fn rounded(preds: &[ScoredExample]) -> Result<[Real; 7]> {
        let mut v = MetricReport::evaluate(preds)?.values();
        for x in &mut v {
            *x = (*x * 1e6).round() / 1e6;
        }
        Ok(v)
    }
}

fn train_summary_text(s: &TrainSummary) -> String {
    let mut t = format!("model = {}\nseed = {}\nseconds = {:.1}\n", s.model.name(), s.seed, s.seconds);
    if s.epochs > 0 {
        let _ = writeln!(t, "epochs = {}", s.epochs);
    }
    for st in &s.stages {
        let _ = writeln!(
            t,
            "stage {}: epochs {}..={} best {:?} at {:?} early_stopped {} resumed {}",
            st.stage.name(),
            st.first_epoch,
            st.last_epoch,
            st.best_value,
            st.best_epoch,
            st.early_stopped,
            st.resumed
        );
    }
    t
}

/// One row per epoch: train loss, validation loss/AUC/UAUC, and a flag on the
/// first epoch of each stage.
pub fn curves_csv(epochs_csv: &str) -> Result<String> {
    let mut by_epoch: BTreeMap<usize, (String, Option<EpochRow>, Option<EpochRow>)> = BTreeMap::new();
    for line in epochs_csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let row = EpochRow::parse_csv(line)?;
        let e = by_epoch.entry(row.epoch).or_insert_with(|| (row.stage.clone(), None, None));
        match row.split.as_str() {
            "train" => e.1 = Some(row),
            _ => e.2 = Some(row),
        }
    }
    let mut s = String::from("epoch,stage,stage_start,train_loss,val_loss,val_auc,val_uauc\n");
    let mut prev = String::new();
    let f = |v: Option<Real>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    for (epoch, (stage, train, val)) in by_epoch {
        let start = stage != prev;
        let vr = val.as_ref().and_then(|v| v.report.as_ref());
        let _ = writeln!(
            s,
            "{epoch},{stage},{},{},{},{},{}",
            start as u8,
            f(train.as_ref().map(|t| t.loss)),
            f(val.as_ref().map(|v| v.loss)),
            f(vr.and_then(|r| r.auc)),
            f(vr.and_then(|r| r.uauc)),
        );
        prev = stage;
    }
    Ok(s)
}

/// Counts of positive and negative examples per equal-width score bin.
pub fn histogram_csv(scored: &[ScoredExample], bins: usize) -> String {
    let mut pos = vec![0usize; bins];
    let mut neg = vec![0usize; bins];
    for p in scored {
        let b = ((p.score * bins as Real) as usize).min(bins - 1);
        if p.label >= 0.5 {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let mut s = String::from("bin_lo,bin_hi,positives,negatives\n");
    for b in 0..bins {
        let _ = writeln!(
            s,
            "{:.4},{:.4},{},{}",
            b as Real / bins as Real,
            (b + 1) as Real / bins as Real,
            pos[b],
            neg[b]
        );
    }
    s
}
