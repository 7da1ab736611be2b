//! Experiment configuration: an INI file with `[data]`, `[model]`, `[train]`
//! and `[eval]` sections layered over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::llm::LlmConfig;
use crate::orchestrate::StageConfigs;
use crate::sasrec::{self, SasrecConfig};
use crate::synthetic::SyntheticConfig;
use crate::system::SystemConfig;
use crate::training::{Monitor, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    MovieLens,
    Amazon,
    Synthetic,
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens" => Ok(Self::MovieLens),
            "amazon" => Ok(Self::Amazon),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    SasrecLlm,
    Sasrec,
    TallrecVariant,
    IclVariant,
    Mf,
    Ncf,
    Mc,
    Rnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        Self::SasrecLlm,
        Self::Sasrec,
        Self::TallrecVariant,
        Self::IclVariant,
        Self::Mf,
        Self::Ncf,
        Self::Mc,
        Self::Rnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SasrecLlm => "sasrecllm",
            Self::Sasrec => "sasrec",
            Self::TallrecVariant => "tallrec_variant",
            Self::IclVariant => "icl_variant",
            Self::Mf => "mf",
            Self::Ncf => "ncf",
            Self::Mc => "mc",
            Self::Rnn => "rnn",
        }
    }

    /// Models whose result depends on a random initialisation of the language
    /// model and is therefore reported as mean ± std over seeds.
    pub fn is_llm(self) -> bool {
        matches!(self, Self::SasrecLlm | Self::TallrecVariant | Self::IclVariant)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: Dataset,
    pub ratings: Option<PathBuf>,
    pub movies: Option<PathBuf>,
    /// Prepared bundle location; defaults to `<run_dir>/bundle.tsv`.
    pub bundle: Option<PathBuf>,
    pub run_dir: PathBuf,
    /// Keep only the lowest-numbered users of a real dataset; 0 keeps all.
    pub max_users: usize,
    pub synthetic: SyntheticConfig,
}

impl DataConfig {
    pub fn bundle_path(&self) -> PathBuf {
        self.bundle.clone().unwrap_or_else(|| self.run_dir.join("bundle.tsv"))
    }
}

/// Architecture knobs; item count and vocabulary come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub sasrec: SasrecConfig,
    pub llm: LlmConfig,
    pub proj_token_num: usize,
    pub max_titles: usize,
    pub baseline: BaselineConfig,
}

impl ModelConfig {
    pub fn system(&self, num_items: usize, vocab_size: usize) -> SystemConfig {
        SystemConfig {
            sasrec: SasrecConfig {
                num_items,
                ..self.sasrec.clone()
            },
            llm: LlmConfig {
                vocab_size,
                ..self.llm.clone()
            },
            proj_token_num: self.proj_token_num,
            max_titles: self.max_titles,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub seeds: Vec<u64>,
    pub stages: StageConfigs,
    /// Schedule used for MF, NCF and the recurrent model.
    pub baseline: TrainConfig,
    /// Write every epoch's per-sample `(ŷ, y)` pairs for offline verification.
    pub log_pairs: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub splits: Vec<String>,
    /// Reports to compute relative improvement against.
    pub baselines: Vec<PathBuf>,
    pub histogram_bins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub desk_scale: bool,
}

pub const SECTIONS: [&str; 4] = ["data", "model", "train", "eval"];

impl ExperimentConfig {
    /// Defaults: the desk profile is small enough for a laptop CPU; the other
    /// uses the full-size encoder sizes and schedule.
    pub fn defaults(desk_scale: bool) -> Self {
        let (sas, llm, stages) = if desk_scale {
            (SasrecConfig::desk(1), LlmConfig::desk(6), StageConfigs::desk(1))
        } else {
            let mut st = StageConfigs::desk(1);
            for c in [&mut st.a, &mut st.b, &mut st.c] {
                c.max_epochs = 300;
                c.patience = 10;
            }
            st.a.batch_size = sasrec::FULL_BATCH_SIZE;
            (
                SasrecConfig::full(1),
                LlmConfig {
                    d2: 128,
                    layers: 4,
                    ffn_dim: 512,
                    ..LlmConfig::desk(6)
                },
                st,
            )
        };
        Self {
            data: DataConfig {
                dataset: Dataset::Synthetic,
                ratings: None,
                movies: None,
                bundle: None,
                run_dir: PathBuf::from("runs/default"),
                max_users: if desk_scale { 300 } else { 0 },
                synthetic: SyntheticConfig::default(),
            },
            model: ModelConfig {
                kind: ModelKind::SasrecLlm,
                sasrec: sas,
                llm,
                proj_token_num: 1,
                max_titles: crate::fusion::MAX_HISTORY_TITLES,
                baseline: BaselineConfig::default(),
            },
            train: TrainSection {
                seeds: vec![1],
                stages,
                baseline: BaselineConfig::default().train,
                log_pairs: true,
            },
            eval: EvalConfig {
                splits: vec!["test".into(), "warm_test".into(), "cold_test".into()],
                baselines: Vec::new(),
                histogram_bins: 10,
            },
            desk_scale,
        }
    }

    pub fn load(path: &Path, desk_scale: bool) -> Result<Self> {
        // an unreadable config is a configuration problem, not a data one
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, desk_scale)
    }

    /// Relative paths are resolved against `base` (the config's directory).
    pub fn parse(text: &str, base: &Path, desk_scale: bool) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        let mut kv: BTreeMap<(String, String), String> = BTreeMap::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside a section".into()));
                }
                continue;
            };
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!("unknown section [{section}]")));
            }
            for (k, v) in props.iter() {
                kv.insert((section.to_string(), k.to_string()), v.trim().to_string());
            }
        }
        let desk = match kv.remove(&("data".into(), "desk_scale".into())) {
            Some(v) => desk_scale || parse_bool("data.desk_scale", &v)?,
            None => desk_scale,
        };
        let mut cfg = Self::defaults(desk);
        let mut r = Reader { kv, base };
        cfg.apply(&mut r)?;
        if let Some(((s, k), _)) = r.kv.iter().next() {
            return Err(Error::Config(format!("unknown key `{k}` in [{s}]")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, r: &mut Reader<'_>) -> Result<()> {
        let d = &mut self.data;
        r.get("data", "dataset", &mut d.dataset)?;
        r.path("data", "ratings", &mut d.ratings);
        r.path("data", "movies", &mut d.movies);
        r.path("data", "bundle", &mut d.bundle);
        if let Some(p) = r.take("data", "run_dir") {
            d.run_dir = r.resolve(&p);
        }
        r.get("data", "max_users", &mut d.max_users)?;
        let s = &mut d.synthetic;
        r.get("data", "synthetic_users", &mut s.users)?;
        r.get("data", "synthetic_items", &mut s.items)?;
        r.get("data", "synthetic_groups", &mut s.groups)?;
        r.get("data", "synthetic_min_interactions", &mut s.min_interactions)?;
        r.get("data", "synthetic_max_interactions", &mut s.max_interactions)?;
        r.get("data", "synthetic_text_signal", &mut s.text_signal)?;
        r.get("data", "synthetic_collab_signal", &mut s.collab_signal)?;
        r.get("data", "synthetic_quality_signal", &mut s.quality_signal)?;
        r.get("data", "synthetic_label_temperature", &mut s.label_temperature)?;
        r.get("data", "synthetic_late_user_fraction", &mut s.late_user_fraction)?;
        r.get("data", "synthetic_new_item_fraction", &mut s.new_item_fraction)?;
        r.get("data", "synthetic_late_new_item_prob", &mut s.late_new_item_prob)?;
        r.get("data", "synthetic_regular_new_item_prob", &mut s.regular_new_item_prob)?;
        r.get("data", "synthetic_in_group_prob", &mut s.in_group_prob)?;
        r.get("data", "synthetic_sequential_prob", &mut s.sequential_prob)?;
        r.get("data", "synthetic_seed", &mut s.seed)?;

        let m = &mut self.model;
        r.get("model", "model", &mut m.kind)?;
        r.get("model", "d1", &mut m.sasrec.d1)?;
        r.get("model", "max_len", &mut m.sasrec.n)?;
        r.get("model", "sasrec_blocks", &mut m.sasrec.blocks)?;
        r.get("model", "sasrec_heads", &mut m.sasrec.heads)?;
        r.get("model", "sasrec_dropout", &mut m.sasrec.dropout)?;
        r.get("model", "d2", &mut m.llm.d2)?;
        r.get("model", "llm_layers", &mut m.llm.layers)?;
        r.get("model", "llm_heads", &mut m.llm.heads)?;
        r.get("model", "ffn_dim", &mut m.llm.ffn_dim)?;
        r.get("model", "context_len", &mut m.llm.context_len)?;
        r.get("model", "llm_dropout", &mut m.llm.dropout)?;
        r.get("model", "lora_rank", &mut m.llm.lora_rank)?;
        r.get("model", "lora_alpha", &mut m.llm.lora_alpha)?;
        r.get("model", "proj_token_num", &mut m.proj_token_num)?;
        r.get("model", "max_titles", &mut m.max_titles)?;
        r.get("model", "factors", &mut m.baseline.factors)?;
        r.get("model", "rnn_hidden", &mut m.baseline.rnn_hidden)?;
        r.get("model", "rnn_window", &mut m.baseline.rnn_window)?;
        if let Some(v) = r.take("model", "ncf_hidden") {
            m.baseline.ncf_hidden = parse_list("model.ncf_hidden", &v)?;
        }

        let t = &mut self.train;
        if let Some(v) = r.take("train", "seeds") {
            t.seeds = parse_list("train.seeds", &v)?;
        }
        if let Some(v) = r.take("train", "log_pairs") {
            t.log_pairs = parse_bool("train.log_pairs", &v)?;
        }
        // shared keys first, then per-stage overrides
        let targets: [(&str, &mut TrainConfig); 4] = [
            ("stage_a.", &mut t.stages.a),
            ("stage_b.", &mut t.stages.b),
            ("stage_c.", &mut t.stages.c),
            ("baseline.", &mut t.baseline),
        ];
        let shared: Vec<(String, String)> = TRAIN_KEYS
            .iter()
            .filter_map(|k| r.take("train", k).map(|v| (k.to_string(), v)))
            .collect();
        for (prefix, tc) in targets {
            for (k, v) in &shared {
                set_train_key(tc, k, v)?;
            }
            for k in TRAIN_KEYS {
                if let Some(v) = r.take("train", &format!("{prefix}{k}")) {
                    set_train_key(tc, k, &v)?;
                }
            }
        }

        let e = &mut self.eval;
        if let Some(v) = r.take("eval", "splits") {
            e.splits = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        if let Some(v) = r.take("eval", "baselines") {
            e.baselines = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| r.resolve(s))
                .collect();
        }
        r.get("eval", "histogram_bins", &mut e.histogram_bins)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.seeds.is_empty() {
            return Err(Error::Config("train.seeds must list at least one seed".into()));
        }
        for c in [&self.train.stages.a, &self.train.stages.b, &self.train.stages.c, &self.train.baseline] {
            c.validate()?;
        }
        if self.eval.histogram_bins == 0 {
            return Err(Error::Config("eval.histogram_bins must be ≥ 1".into()));
        }
        for s in &self.eval.splits {
            if !["validation", "test", "warm_test", "cold_test"].contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown evaluation split `{s}`")));
            }
        }
        self.data.synthetic.validate()?;
        Ok(())
    }

    /// Existence of the raw inputs the chosen dataset needs.
    pub fn check_inputs(&self) -> Result<()> {
        let need = |p: &Option<PathBuf>, key: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("data.{key} is required for this dataset"))),
                Some(p) if !p.is_file() => Err(Error::Data(format!("{} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match self.data.dataset {
            Dataset::Synthetic => Ok(()),
            Dataset::MovieLens => {
                need(&self.data.ratings, "ratings")?;
                need(&self.data.movies, "movies")
            }
            Dataset::Amazon => need(&self.data.ratings, "ratings"),
        }
    }

    /// Applies a command-line seed, which replaces the configured list.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seeds = vec![s];
        }
        self
    }

    /// Digest of every setting plus the data content hash.
    pub fn hash(&self, data_hash: u64) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}").as_bytes());
        h.update(data_hash.to_le_bytes());
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// Stage schedules with seeds derived from a run seed.
    pub fn stages_for_seed(&self, seed: u64) -> StageConfigs {
        let mut s = self.train.stages.clone();
        s.a.seed = seed;
        s.b.seed = seed.wrapping_add(1);
        s.c.seed = seed.wrapping_add(2);
        s
    }
}

const TRAIN_KEYS: [&str; 9] = [
    "batch_size",
    "max_epochs",
    "checkpoint_every",
    "patience",
    "monitor",
    "lr",
    "warmup",
    "weight_decay",
    "clip",
];

fn set_train_key(c: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let field = format!("train.{key}");
    match key {
        "batch_size" => c.batch_size = parse(&field, v)?,
        "max_epochs" => c.max_epochs = parse(&field, v)?,
        "checkpoint_every" => c.checkpoint_every = parse(&field, v)?,
        "patience" => c.patience = parse(&field, v)?,
        "monitor" => c.monitor = Monitor::parse(v)?,
        "lr" => c.peak_lr = parse(&field, v)?,
        "warmup" => c.warmup_frac = parse(&field, v)?,
        "weight_decay" => c.weight_decay = parse(&field, v)?,
        "clip" => c.clip = parse(&field, v)?,
        _ => unreachable!("train key list"),
    }
    Ok(())
}

struct Reader<'a> {
    kv: BTreeMap<(String, String), String>,
    base: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.kv.remove(&(section.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(section, key) {
            *slot = parse(&format!("{section}.{key}"), &v)?;
        }
        Ok(())
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn path(&mut self, section: &str, key: &str, slot: &mut Option<PathBuf>) {
        if let Some(v) = self.take(section, key) {
            *slot = Some(self.resolve(&v));
        }
    }
}

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{field}: cannot parse `{v}`")))
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{field}: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(field: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(field, s))
        .collect()
}
