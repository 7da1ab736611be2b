//! The three-stage schedule: sequence-encoder pretraining (A), LoRA tuning on
//! text-only prompts (B), and fusion tuning of encoder + mapping on hybrid
//! prompts with LoRA held fixed (C). Epochs are numbered globally across
//! stages so the log reads as one curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{build_sequences, SplitBundle};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredExample};
use crate::optim::OptimizerState;
use crate::param::Component;
use crate::rng::RngStream;
use crate::system::{Predictor, System};
use crate::tensor::{Mode, Real};
use crate::training::{
    self, early_stop_check, set_freeze, EpochLog, EpochRow, FreezeMask, RunnerState, StopDecision,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    A,
    B,
    C,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        }
    }

    /// Name of the directory holding this stage's best weights.
    pub fn best_dir(self) -> &'static str {
        match self {
            Stage::A => "stage_a_best",
            Stage::B => "stage_b_best",
            Stage::C => "best",
        }
    }

    pub fn mask(self) -> FreezeMask {
        match self {
            Stage::A => FreezeMask::SASREC_ONLY,
            Stage::B => FreezeMask::LORA_ONLY,
            Stage::C => FreezeMask::FUSION,
        }
    }

    pub fn predictor(self) -> Predictor {
        match self {
            Stage::A => Predictor::Sasrec,
            Stage::B => Predictor::Textual,
            Stage::C => Predictor::Hybrid,
        }
    }

    /// Components written to the stage's best checkpoint.
    pub fn saved_components(self) -> &'static [Component] {
        match self {
            Stage::A => &[Component::Sasrec],
            Stage::B => &[Component::Lora],
            Stage::C => &[],
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::A => 0xA,
            Stage::B => 0xB,
            Stage::C => 0xC,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfigs {
    pub a: TrainConfig,
    pub b: TrainConfig,
    pub c: TrainConfig,
}

impl StageConfigs {
    /// Desk-scale schedule: short stages with tight patience.
    pub fn desk(seed: u64) -> Self {
        Self {
            a: TrainConfig {
                batch_size: 32,
                max_epochs: 40,
                patience: 8,
                peak_lr: 3e-3,
                seed,
                ..TrainConfig::default()
            },
            b: TrainConfig {
                batch_size: 16,
                max_epochs: 20,
                patience: 4,
                peak_lr: 2e-3,
                seed: seed.wrapping_add(1),
                ..TrainConfig::default()
            },
            c: TrainConfig {
                batch_size: 16,
                max_epochs: 20,
                patience: 4,
                peak_lr: 2e-3,
                seed: seed.wrapping_add(2),
                ..TrainConfig::default()
            },
        }
    }

    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::A => &self.a,
            Stage::B => &self.b,
            Stage::C => &self.c,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_value: Option<Real>,
    pub early_stopped: bool,
    pub resumed: bool,
}

impl StageSummary {
    fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let _ = writeln!(s, "stage = {}", self.stage.name());
        let _ = writeln!(s, "first_epoch = {}", self.first_epoch);
        let _ = writeln!(s, "last_epoch = {}", self.last_epoch);
        let _ = writeln!(s, "best_epoch = {}", opt(self.best_epoch.map(|e| e.to_string())));
        let _ = writeln!(s, "best_value = {}", opt(self.best_value.map(|v| format!("{v:?}"))));
        let _ = writeln!(s, "early_stopped = {}", self.early_stopped);
        s
    }

    fn parse(stage: Stage, text: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let bad = |k: &str| Error::Orchestration(format!("stage {} record: bad or missing `{k}`", stage.name()));
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(k));
        let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let opt_num = |k: &str| -> Result<Option<usize>> {
            match get(k)? {
                "none" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(k)),
            }
        };
        Ok(Self {
            stage,
            first_epoch: num("first_epoch")?,
            last_epoch: num("last_epoch")?,
            best_epoch: opt_num("best_epoch")?,
            best_value: match get("best_value")? {
                "none" => None,
                v => Some(v.parse().map_err(|_| bad("best_value"))?),
            },
            early_stopped: get("early_stopped")? == "true",
            resumed: true,
        })
    }
}

/// Drives stages over one run directory.
pub struct Runner<'a> {
    pub bundle: &'a SplitBundle,
    pub run_dir: PathBuf,
    pub resume: bool,
    /// Last completed global epoch.
    pub epoch: usize,
    pub log: EpochLog,
    /// Also write every epoch's `(user, y, ŷ)` triples under `pairs/`.
    pub log_pairs: bool,
}

impl<'a> Runner<'a> {
    pub fn new(bundle: &'a SplitBundle, run_dir: impl Into<PathBuf>, resume: bool) -> Self {
        Self {
            bundle,
            run_dir: run_dir.into(),
            resume,
            epoch: 0,
            log: EpochLog::default(),
            log_pairs: false,
        }
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.run_dir.join("checkpoints").join(name)
    }

    fn write_pairs(&self, split: &str, scored: &[ScoredExample]) -> Result<()> {
        if !self.log_pairs {
            return Ok(());
        }
        let dir = self.run_dir.join("pairs");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(pairs_file_name(self.epoch, split));
        fs::write(&path, training::pairs_csv(scored)).map_err(|e| Error::io(&path, e))
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(format!("stage_{}.done", stage.name().to_ascii_lowercase()))
    }

    fn save(
        &self,
        sys: &System,
        name: &str,
        stage: Stage,
        components: &[Component],
        monitor: &str,
        value: Option<Real>,
    ) -> Result<()> {
        let mut c = Checkpoint::capture(&sys.store, &sys.component_hashes(), components)?;
        c.epoch = self.epoch;
        c.stage = stage.name().into();
        c.monitor = monitor.into();
        c.monitor_value = value;
        c.save(&self.checkpoint_dir(name))
    }

    /// Restores `components` of a named checkpoint; a missing directory is an
    /// orchestration error since a previous stage should have produced it.
    pub fn load(&self, sys: &mut System, name: &str, components: &[Component]) -> Result<Checkpoint> {
        let dir = self.checkpoint_dir(name);
        if !dir.join(crate::checkpoint::MANIFEST).is_file() {
            return Err(Error::Orchestration(format!(
                "required checkpoint {} is missing",
                dir.display()
            )));
        }
        let c = Checkpoint::load(&dir)?;
        let hashes = sys.component_hashes();
        c.restore(&mut sys.store, &hashes, components)?;
        Ok(c)
    }

    fn try_resume(&mut self, sys: &mut System, stage: Stage) -> Result<Option<StageSummary>> {
        let path = self.record_path(stage);
        if !self.resume || !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary = StageSummary::parse(stage, &text)?;
        self.load(sys, stage.best_dir(), stage.saved_components())?;
        self.epoch = self.epoch.max(summary.last_epoch);
        self.restore_log_rows(stage)?;
        log::info!("stage {} resumed from {}", stage.name(), stage.best_dir());
        Ok(Some(summary))
    }

    /// Brings back the earlier run's log rows of a stage being skipped.
    fn restore_log_rows(&mut self, stage: Stage) -> Result<()> {
        let name = stage.name();
        let epochs = self.run_dir.join("epochs.csv");
        if let Ok(text) = fs::read_to_string(&epochs) {
            for line in text.lines().skip(1) {
                let row = EpochRow::parse_csv(line)?;
                if row.stage == name {
                    self.log.rows.push(row);
                }
            }
        }
        let grads = self.run_dir.join("grad_norms.csv");
        if let Ok(text) = fs::read_to_string(&grads) {
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if let [e, st, c, n] = f[..] {
                    if st == name {
                        let parse_err = || Error::Data(format!("bad gradient-log line `{line}`"));
                        self.log.grad_rows.push((
                            e.parse().map_err(|_| parse_err())?,
                            st.to_string(),
                            Component::parse(c)?,
                            n.parse().map_err(|_| parse_err())?,
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, sys: &mut System, summary: &StageSummary) -> Result<()> {
        if summary.best_epoch.is_some() {
            self.load(sys, summary.stage.best_dir(), summary.stage.saved_components())?;
        } else {
            // nothing ever beat "undefined"; keep the final weights as best
            self.save(
                sys,
                summary.stage.best_dir(),
                summary.stage,
                summary.stage.saved_components(),
                "none",
                None,
            )?;
        }
        let path = self.record_path(summary.stage);
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        fs::write(&path, summary.to_text()).map_err(|e| Error::io(&path, e))?;
        self.log.write(&self.run_dir)
    }

    fn end_of_epoch(
        &mut self,
        sys: &System,
        stage: Stage,
        cfg: &TrainConfig,
        state: &mut RunnerState,
        report: &MetricReport,
    ) -> Result<bool> {
        let value = cfg.monitor.value(report);
        if state.observe(self.epoch, value) {
            self.save(
                sys,
                stage.best_dir(),
                stage,
                stage.saved_components(),
                cfg.monitor.name(),
                value,
            )?;
        }
        if self.epoch % cfg.checkpoint_every == 0 {
            let name = format!("epoch_{:04}", self.epoch);
            self.save(sys, &name, stage, &[], cfg.monitor.name(), value)?;
        }
        Ok(early_stop_check(state, cfg.patience) == StopDecision::Stop)
    }

    fn push_rows(&mut self, stage: Stage, train_loss: Real, train: Option<MetricReport>, val: MetricReport, lr: Real, t_train: Real, t_val: Real) {
        self.log.rows.push(EpochRow {
            epoch: self.epoch,
            stage: stage.name().into(),
            split: "train".into(),
            loss: train_loss,
            report: train,
            lr,
            seconds: t_train,
        });
        log::info!(
            "epoch {} stage {} loss {train_loss:.4} val auc {:?}",
            self.epoch,
            stage.name(),
            val.auc
        );
        self.log.rows.push(EpochRow {
            epoch: self.epoch,
            stage: stage.name().into(),
            split: "validation".into(),
            loss: val.logloss,
            report: Some(val),
            lr,
            seconds: t_val,
        });
    }

    /// Stage A: next-item pretraining of the encoder, monitored on the
    /// validation split through `σ(u′·E_I[i])`.
    pub fn run_stage_a(&mut self, sys: &mut System, cfg: &TrainConfig) -> Result<StageSummary> {
        cfg.validate()?;
        if let Some(s) = self.try_resume(sys, Stage::A)? {
            return Ok(s);
        }
        set_freeze(&mut sys.store, Stage::A.mask())?;
        let mut seqs = build_sequences(&self.bundle.train, sys.model.config.sasrec.n);
        if seqs.is_empty() {
            return Err(Error::Data("no user has two liked training items to pretrain on".into()));
        }
        let mut opt = OptimizerState::new(&sys.store, cfg.adamw());
        let mut schedule = cfg.schedule(seqs.len());
        let mut rng = RngStream::new(cfg.seed).derive(Stage::A.tag());
        let mut state = RunnerState::new(cfg.monitor);
        let first_epoch = self.epoch + 1;
        let mut early = false;
        let mut batch_index = 0;
        for _ in 0..cfg.max_epochs {
            self.epoch += 1;
            let t = Instant::now();
            rng.shuffle(&mut seqs);
            let mut weighted = 0.0;
            let mut positions = 0;
            let mut lr = 0.0;
            let mut norms: BTreeMap<Component, Real> = BTreeMap::new();
            let mut batches = 0;
            for batch in seqs.chunks(cfg.batch_size) {
                lr = schedule.next_lr();
                let n: usize = batch.iter().map(|s| s.non_pad_positions().count()).sum();
                let loss = sys
                    .model
                    .sasrec
                    .pretrain_step(&mut sys.store, &mut opt, batch, lr, &mut rng)
                    .map_err(|e| match e {
                        Error::TrainingAbort { lr, message, .. } => Error::TrainingAbort {
                            batch: batch_index,
                            lr,
                            message,
                        },
                        other => other,
                    })?;
                weighted += loss * n as Real;
                positions += n;
                for c in sys.store.components() {
                    *norms.entry(c).or_insert(0.0) += sys.store.grad_norm(c);
                }
                batches += 1;
                batch_index += 1;
            }
            for (c, s) in norms {
                self.log
                    .grad_rows
                    .push((self.epoch, Stage::A.name().into(), c, s / batches as Real));
            }
            let t_train = training::seconds(t);
            let t = Instant::now();
            let (val, scored) = training::evaluate_epoch(&self.bundle.validation, |ex| {
                sys.predict(ex, &self.bundle.titles, Predictor::Sasrec)
            })?;
            self.write_pairs("validation", &scored)?;
            let t_val = training::seconds(t);
            let loss = weighted / positions.max(1) as Real;
            self.push_rows(Stage::A, loss, None, val.clone(), lr, t_train, t_val);
            if self.end_of_epoch(sys, Stage::A, cfg, &mut state, &val)? {
                early = true;
                break;
            }
        }
        let summary = StageSummary {
            stage: Stage::A,
            first_epoch,
            last_epoch: self.epoch,
            best_epoch: state.best.map(|b| b.1),
            best_value: state.best.map(|b| b.0),
            early_stopped: early,
            resumed: false,
        };
        self.finish(sys, &summary)?;
        Ok(summary)
    }

    /// Stages B and C: BCE on the yes/no answer with the stage's mask and
    /// prompt encoding.
    pub fn run_llm_stage(&mut self, sys: &mut System, stage: Stage, cfg: &TrainConfig) -> Result<StageSummary> {
        if stage == Stage::A {
            return self.run_stage_a(sys, cfg);
        }
        cfg.validate()?;
        if let Some(s) = self.try_resume(sys, stage)? {
            return Ok(s);
        }
        set_freeze(&mut sys.store, stage.mask())?;
        let predictor = stage.predictor();
        let bundle = self.bundle;
        let (train, titles) = (&bundle.train, &bundle.titles);
        let mut opt = OptimizerState::new(&sys.store, cfg.adamw());
        let mut schedule = cfg.schedule(train.len());
        let mut rng = RngStream::new(cfg.seed).derive(stage.tag());
        let mut state = RunnerState::new(cfg.monitor);
        let first_epoch = self.epoch + 1;
        let mut early = false;
        let mut batch_offset = 0;
        for _ in 0..cfg.max_epochs {
            self.epoch += 1;
            let t = Instant::now();
            let System { store, model } = &mut *sys;
            let model = &*model;
            let out = training::train_epoch(
                store,
                &mut opt,
                train,
                cfg,
                &mut schedule,
                &mut rng,
                batch_offset,
                |tape, ex, rng| model.forward(tape, ex, titles, predictor, Mode::Train, rng),
            )?;
            batch_offset += out.batches;
            for (c, n) in &out.grad_norms {
                self.log.grad_rows.push((self.epoch, stage.name().into(), *c, *n));
            }
            let train_report = MetricReport::evaluate(&out.predictions)?;
            let t_train = training::seconds(t);
            let t = Instant::now();
            let (val, scored) = training::evaluate_epoch(&self.bundle.validation, |ex| sys.predict(ex, titles, predictor))?;
            self.write_pairs("train", &out.predictions)?;
            self.write_pairs("validation", &scored)?;
            let t_val = training::seconds(t);
            self.push_rows(stage, out.loss, Some(train_report), val.clone(), out.last_lr, t_train, t_val);
            if self.end_of_epoch(sys, stage, cfg, &mut state, &val)? {
                early = true;
                break;
            }
        }
        let summary = StageSummary {
            stage,
            first_epoch,
            last_epoch: self.epoch,
            best_epoch: state.best.map(|b| b.1),
            best_value: state.best.map(|b| b.0),
            early_stopped: early,
            resumed: false,
        };
        self.finish(sys, &summary)?;
        Ok(summary)
    }

    /// Stage C needs both earlier stages' checkpoints on disk.
    pub fn run_stage_c(&mut self, sys: &mut System, cfg: &TrainConfig) -> Result<StageSummary> {
        self.load(sys, Stage::A.best_dir(), Stage::A.saved_components())?;
        self.load(sys, Stage::B.best_dir(), Stage::B.saved_components())?;
        self.run_llm_stage(sys, Stage::C, cfg)
    }

    /// A → B → C. The system ends up holding the best Stage-C weights.
    pub fn dual_stage(&mut self, sys: &mut System, cfgs: &StageConfigs) -> Result<Vec<StageSummary>> {
        let a = self.run_stage_a(sys, &cfgs.a).map_err(|e| e.in_stage("stage A"))?;
        let b = self
            .run_llm_stage(sys, Stage::B, &cfgs.b)
            .map_err(|e| e.in_stage("stage B"))?;
        let c = self.run_stage_c(sys, &cfgs.c).map_err(|e| e.in_stage("stage C"))?;
        Ok(vec![a, b, c])
    }
}

pub fn pairs_file_name(epoch: usize, split: &str) -> String {
    format!("epoch_{epoch:04}_{split}.csv")
}

/// Swaps one component of `sys` for the one stored at `dir`.
pub fn pnp_load(dir: &Path, component: Component, sys: &mut System) -> Result<()> {
    let c = Checkpoint::load(dir)?;
    let hashes = sys.component_hashes();
    c.restore(&mut sys.store, &hashes, &[component])
}
