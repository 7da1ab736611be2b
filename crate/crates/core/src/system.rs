//! The assembled hybrid model: sequence encoder, mapping layer and language
//! model sharing one parameter store.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::data::LabeledExample;
use crate::error::Result;
use crate::fusion::{self, FilledPrompt, MappingConfig, MappingLayer, UserSlot};
use crate::llm::{LlmConfig, TinyLlm};
use crate::param::{Component, ParamStore};
use crate::rng::RngStream;
use crate::sasrec::{SasrecConfig, SasrecModel};
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Real};
use crate::vocab::Vocab;

pub type Titles = BTreeMap<usize, String>;

/// How a labelled example becomes a probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Full prompt with spliced collaborative tokens.
    Hybrid,
    /// Titles only; the encoder and mapping layer are never touched.
    Textual,
    /// `σ(u′·E_I[i])` from the sequence encoder alone.
    Sasrec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub sasrec: SasrecConfig,
    pub llm: LlmConfig,
    pub proj_token_num: usize,
    pub max_titles: usize,
}

impl SystemConfig {
    pub fn desk(num_items: usize, vocab_size: usize) -> Self {
        Self {
            sasrec: SasrecConfig::desk(num_items),
            llm: LlmConfig::desk(vocab_size),
            proj_token_num: 1,
            max_titles: fusion::MAX_HISTORY_TITLES,
        }
    }

    pub fn mapping(&self) -> MappingConfig {
        MappingConfig {
            proj_token_num: self.proj_token_num,
            ..MappingConfig::new(self.sasrec.d1, self.llm.d2)
        }
    }
}

/// Module structure and vocabulary; the weights live in [`System::store`].
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub config: SystemConfig,
    pub sasrec: SasrecModel,
    pub mapping: MappingLayer,
    pub llm: TinyLlm,
    pub vocab: Vocab,
}

#[derive(Clone, Debug)]
pub struct System {
    pub store: ParamStore,
    pub model: HybridModel,
}

/// Every word the prompts can contain: titles plus the template itself.
pub fn build_vocab(titles: &Titles) -> Result<Vocab> {
    let template = fusion::build_prompt(
        &[],
        "x",
        UserSlot {
            user: 0,
            history: Vec::new(),
        },
        0,
    )?
    .render();
    Ok(Vocab::build(
        std::iter::once(template.as_str()).chain(titles.values().map(String::as_str)),
    ))
}

impl System {
    /// Components are initialised from independent sub-streams of `seed`, so
    /// e.g. changing the language model's size leaves the encoder's init alone.
    pub fn new(config: SystemConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let root = RngStream::new(seed);
        let mut store = ParamStore::new();
        let mut llm_cfg = config.llm.clone();
        llm_cfg.vocab_size = vocab.len();
        let sasrec = SasrecModel::new(config.sasrec.clone(), &mut store, &mut root.derive(11))?;
        let mapping = MappingLayer::new(config.mapping(), &mut store, &mut root.derive(12))?;
        let llm = TinyLlm::new(llm_cfg.clone(), &mut store, &mut root.derive(13))?;
        let config = SystemConfig {
            llm: llm_cfg,
            ..config
        };
        Ok(Self {
            store,
            model: HybridModel {
                config,
                sasrec,
                mapping,
                llm,
                vocab,
            },
        })
    }

    /// Eval-mode probability.
    pub fn predict(&self, ex: &LabeledExample, titles: &Titles, predictor: Predictor) -> Result<Real> {
        let mut tape = Tape::new(&self.store);
        let mut rng = RngStream::new(0);
        let p = self
            .model
            .forward(&mut tape, ex, titles, predictor, Mode::Eval, &mut rng)?;
        Ok(tape.scalar(p))
    }

    /// Digest of a component's configuration and parameter layout.
    pub fn component_hash(&self, component: Component) -> String {
        let mut h = Sha256::new();
        let m = &self.model;
        let cfg = match component {
            Component::Sasrec => format!("{:?}", m.config.sasrec),
            Component::Mapping => format!("{:?}", m.mapping.config),
            Component::Lora | Component::LlmBase => format!("{:?}", m.llm.config),
            Component::Baseline => String::new(),
        };
        h.update(component.name().as_bytes());
        h.update(cfg.as_bytes());
        for (_, p) in self.store.iter().filter(|(_, p)| p.component == component) {
            h.update(p.name.as_bytes());
            h.update(format!("{:?}", p.value.shape()).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn component_hashes(&self) -> BTreeMap<Component, String> {
        self.store
            .components()
            .into_iter()
            .map(|c| (c, self.component_hash(c)))
            .collect()
    }
}

impl HybridModel {

    pub fn prompt(&self, ex: &LabeledExample, titles: &Titles) -> Result<FilledPrompt> {
        let title = |i: &usize| titles.get(i).map_or("unknown", String::as_str);
        let history: Vec<&str> = ex.history.iter().map(title).collect();
        fusion::build_prompt_limited(
            &history,
            title(&ex.item),
            UserSlot {
                user: ex.user,
                history: ex.history.clone(),
            },
            ex.item,
            self.config.max_titles,
        )
    }

    /// `ŷ` for one example as a 1×1 tape value.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ex: &LabeledExample,
        titles: &Titles,
        predictor: Predictor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        match predictor {
            Predictor::Sasrec => {
                let u = self.sasrec.encode_user(tape, &ex.history, mode, rng)?;
                let i = self.sasrec.encode_item(tape, ex.item)?;
                let s = tape.matmul_t(u, false, i, true)?;
                Ok(tape.sigmoid(s))
            }
            Predictor::Hybrid | Predictor::Textual => {
                let prompt = self.prompt(ex, titles)?;
                let seq = if predictor == Predictor::Hybrid {
                    fusion::hybrid_encode(
                        tape,
                        &prompt,
                        &self.sasrec,
                        &self.mapping,
                        &self.llm,
                        &self.vocab,
                        mode,
                        rng,
                    )?
                } else {
                    fusion::textual_encode(tape, &prompt, &self.llm, &self.vocab)?
                };
                self.llm.predict_yes_prob(tape, seq.embeddings, mode, rng)
            }
        }
    }
}
