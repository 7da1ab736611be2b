//! The bridge between the sequence encoder and the language model: the mapping
//! MLP, the prompt template, and the hybrid encoder that splices projected
//! collaborative vectors into the token-embedding sequence.

use crate::error::{Error, Result};
use crate::llm::TinyLlm;
use crate::nn;
use crate::param::{Component, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::sasrec::SasrecModel;
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Tensor};
use crate::vocab::Vocab;

pub const MAX_HISTORY_TITLES: usize = 10;
pub const EMPTY_HISTORY: &str = "none";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingConfig {
    pub d1: usize,
    pub d_exp: usize,
    pub d2: usize,
    pub proj_token_num: usize,
}

impl MappingConfig {
    /// Expansion width `2·d2` and a single projected token.
    pub fn new(d1: usize, d2: usize) -> Self {
        Self {
            d1,
            d_exp: 2 * d2,
            d2,
            proj_token_num: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 >= self.d2 {
            return Err(Error::Config(format!(
                "mapping needs d1 < d2, got d1 = {} and d2 = {}",
                self.d1, self.d2
            )));
        }
        if self.d_exp < self.d1 {
            return Err(Error::Config(format!(
                "expansion width {} is smaller than d1 = {}",
                self.d_exp, self.d1
            )));
        }
        if self.proj_token_num == 0 {
            return Err(Error::Config("proj_token_num must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MappingLayer {
    pub config: MappingConfig,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MappingLayer {
    pub fn new(config: MappingConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = Component::Mapping;
        let out = config.d2 * config.proj_token_num;
        Ok(Self {
            w1: store.add("mapping.w1", c, nn::init_weight(config.d1, config.d_exp, rng)),
            b1: store.add("mapping.b1", c, Tensor::zeros(&[config.d_exp])),
            w2: store.add("mapping.w2", c, nn::init_weight(config.d_exp, out, rng)),
            b2: store.add("mapping.b2", c, Tensor::zeros(&[out])),
            config,
        })
    }

    /// `ReLU(x′·W1 + b1)·W2 + b2`, reshaped to `proj_token_num × d2`.
    pub fn map_embedding(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let v = tape.value(x);
        if v.len() != self.config.d1 {
            return Err(Error::Dimension {
                op: "map_embedding",
                lhs: v.shape().to_vec(),
                rhs: vec![1, self.config.d1],
            });
        }
        let x = tape.reshape(x, &[1, self.config.d1])?;
        let h = nn::linear(tape, x, self.w1, Some(self.b1))?;
        let h = tape.relu(h);
        let y = nn::linear(tape, h, self.w2, Some(self.b2))?;
        tape.reshape(y, &[self.config.proj_token_num, self.config.d2])
    }
}

/// The user field: who they are and which items (oldest first) they liked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSlot {
    pub user: usize,
    pub history: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    User(UserSlot),
    Item(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilledPrompt {
    pub segments: Vec<Segment>,
}

const ANSWER_ANCHOR: &str = "#Answer:";

impl FilledPrompt {
    /// Full text with `<user>` / `<item>` markers in the slots.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::User(_) => "<user>",
                Segment::Item(_) => "<item>",
            })
            .collect()
    }

    /// Text with both ID clauses removed.
    pub fn render_textual(&self) -> String {
        let user_intro = format!("{USER_CLAUSE} ");
        let item_intro = format!(" {ITEM_CLAUSE} ");
        let mut out = String::new();
        for (i, s) in self.segments.iter().enumerate() {
            let Segment::Text(t) = s else { continue };
            let mut t = t.as_str();
            match self.segments.get(i + 1) {
                Some(Segment::User(_)) => t = t.strip_suffix(&user_intro).unwrap_or(t),
                Some(Segment::Item(_)) => t = t.strip_suffix(&item_intro).unwrap_or(t),
                _ => {}
            }
            // the user clause's closing period goes with it
            if i > 0 && matches!(self.segments[i - 1], Segment::User(_)) {
                t = t.strip_prefix(". ").unwrap_or(t);
            }
            out.push_str(t);
        }
        out
    }

    /// Byte offset of the answer anchor in [`render`](Self::render).
    pub fn answer_anchor(&self) -> usize {
        self.render().rfind(ANSWER_ANCHOR).unwrap_or(0)
    }

    pub fn user_slot(&self) -> Option<&UserSlot> {
        self.segments.iter().find_map(|s| match s {
            Segment::User(u) => Some(u),
            _ => None,
        })
    }

    pub fn item_slot(&self) -> Option<usize> {
        self.segments.iter().find_map(|s| match s {
            Segment::Item(i) => Some(*i),
            _ => None,
        })
    }
}

const USER_CLAUSE: &str = "Additionally, user preferences are encoded in the feature";
const ITEM_CLAUSE: &str = "with the feature";

/// Fills the template with the `MAX_HISTORY_TITLES` most recent titles.
pub fn build_prompt(
    history_titles: &[&str],
    target_title: &str,
    user: UserSlot,
    item: usize,
) -> Result<FilledPrompt> {
    build_prompt_limited(history_titles, target_title, user, item, MAX_HISTORY_TITLES)
}

pub fn build_prompt_limited(
    history_titles: &[&str],
    target_title: &str,
    user: UserSlot,
    item: usize,
    max_titles: usize,
) -> Result<FilledPrompt> {
    if target_title.trim().is_empty() {
        return Err(Error::Prompt(format!("item {item} has an empty title")));
    }
    let keep = history_titles.len().min(max_titles);
    let recent = &history_titles[history_titles.len() - keep..];
    let list = if recent.is_empty() {
        EMPTY_HISTORY.to_string()
    } else {
        recent.join(", ")
    };
    Ok(FilledPrompt {
        segments: vec![
            Segment::Text(format!(
                "#Question: A user has given high ratings to the following items: {list}. {USER_CLAUSE} "
            )),
            Segment::User(user),
            Segment::Text(format!(
                ". Using all available information, predict whether the user would enjoy the item titled {target_title} {ITEM_CLAUSE} "
            )),
            Segment::Item(item),
            Segment::Text(format!("? Answer with \"Yes\" or \"No\". {ANSWER_ANCHOR}")),
        ],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Text(usize),
    User,
    Item,
}

/// Embedded prompt ready for the decoder.
#[derive(Clone, Debug)]
pub struct HybridSequence {
    pub embeddings: Var,
    pub provenance: Vec<Provenance>,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Counts of (text, user, item) positions.
    pub fn counts(&self) -> (usize, usize, usize) {
        self.provenance.iter().fold((0, 0, 0), |(t, u, i), p| match p {
            Provenance::Text(_) => (t + 1, u, i),
            Provenance::User => (t, u + 1, i),
            Provenance::Item => (t, u, i + 1),
        })
    }
}

fn check_context(len: usize, llm: &TinyLlm) -> Result<()> {
    if len > llm.config.context_len {
        return Err(Error::Context {
            len,
            max: llm.config.context_len,
        });
    }
    Ok(())
}

/// Text spans are tokenized and embedded; the user and item slots become
/// `proj_token_num` mapped collaborative vectors each.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_encode(
    tape: &mut Tape<'_>,
    prompt: &FilledPrompt,
    sasrec: &SasrecModel,
    mapping: &MappingLayer,
    llm: &TinyLlm,
    vocab: &Vocab,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<HybridSequence> {
    let k = mapping.config.proj_token_num;
    let token_lists: Vec<Option<Vec<usize>>> = prompt
        .segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => Some(vocab.tokenize(t)),
            _ => None,
        })
        .collect();
    let total: usize = token_lists
        .iter()
        .map(|t| t.as_ref().map_or(k, Vec::len))
        .sum();
    check_context(total, llm)?;
    let mut parts = Vec::with_capacity(prompt.segments.len());
    let mut provenance = Vec::with_capacity(total);
    for (seg, toks) in prompt.segments.iter().zip(&token_lists) {
        match seg {
            Segment::Text(_) => {
                let ids = toks.as_ref().expect("text segment tokens");
                if ids.is_empty() {
                    continue;
                }
                parts.push(llm.embed_tokens(tape, ids)?);
                provenance.extend(ids.iter().map(|&i| Provenance::Text(i)));
            }
            Segment::User(u) => {
                let e = sasrec.encode_user(tape, &u.history, mode, rng)?;
                parts.push(mapping.map_embedding(tape, e)?);
                provenance.extend(std::iter::repeat_n(Provenance::User, k));
            }
            Segment::Item(i) => {
                let e = sasrec.encode_item(tape, *i)?;
                parts.push(mapping.map_embedding(tape, e)?);
                provenance.extend(std::iter::repeat_n(Provenance::Item, k));
            }
        }
    }
    Ok(HybridSequence {
        embeddings: tape.concat_rows(&parts)?,
        provenance,
    })
}

/// Pure-text encoding: ID clauses and slots are dropped, so the result
/// depends only on the titles.
pub fn textual_encode(
    tape: &mut Tape<'_>,
    prompt: &FilledPrompt,
    llm: &TinyLlm,
    vocab: &Vocab,
) -> Result<HybridSequence> {
    let ids = vocab.tokenize(&prompt.render_textual());
    check_context(ids.len(), llm)?;
    Ok(HybridSequence {
        embeddings: llm.embed_tokens(tape, &ids)?,
        provenance: ids.into_iter().map(Provenance::Text).collect(),
    })
}
