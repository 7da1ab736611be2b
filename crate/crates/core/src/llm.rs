//! Small pre-norm causal decoder with LoRA adapters on the query and value
//! projections and a two-token yes/no head.
//!
//! The decoder consumes an already embedded `L × d2` sequence, so text tokens
//! and spliced collaborative vectors travel through the same path. Positions
//! start at 0, so where the candidate title lands depends on how long the
//! history is; the adapters have to find it by content rather than by a fixed
//! offset, which is what lets them carry over to the longer hybrid prompt.

use crate::error::{Error, Result};
use crate::nn::{self, Norm};
use crate::param::{Component, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Mode, Real, Tensor};
use crate::vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct LlmConfig {
    pub vocab_size: usize,
    pub d2: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub context_len: usize,
    pub yes_token: usize,
    pub no_token: usize,
    pub dropout: Real,
    pub lora_rank: usize,
    pub lora_alpha: Real,
    /// Std of the token and position tables.
    pub embed_std: Real,
}

impl LlmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d2: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            context_len: 160,
            yes_token: vocab::YES,
            no_token: vocab::NO,
            dropout: 0.0,
            lora_rank: 8,
            lora_alpha: 16.0,
            embed_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d2 % self.heads != 0 {
            return Err(Error::Config(format!(
                "d2 = {} is not divisible by {} heads",
                self.d2, self.heads
            )));
        }
        if self.yes_token == self.no_token {
            return Err(Error::Config("yes and no tokens must differ".into()));
        }
        if self.yes_token >= self.vocab_size || self.no_token >= self.vocab_size {
            return Err(Error::Config("yes/no tokens outside the vocabulary".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Parameter("LoRA rank must be ≥ 1".into()));
        }
        if self.context_len == 0 || self.layers == 0 {
            return Err(Error::Config("context length and layer count must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Low-rank update `(α/r)·B·A` on a frozen `d_in × d_out` base weight.
///
/// Weights are applied to row vectors (`y = x·W`), so the update contributes
/// `x·Aᵀ·Bᵀ·(α/r)` with `A: r × d_in` and `B: d_out × r`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: Real,
    pub target: ParamId,
    merged: bool,
}

impl LoraAdapter {
    /// Registers A (small Gaussian) and B (zeros) and freezes the target.
    pub fn attach(
        store: &mut ParamStore,
        name: &str,
        target: ParamId,
        rank: usize,
        alpha: Real,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Parameter("LoRA rank must be ≥ 1".into()));
        }
        let shape = store.value(target).shape().to_vec();
        let (d_in, d_out) = (shape[0], shape[1]);
        let a = store.add(
            format!("{name}.lora_a"),
            Component::Lora,
            Tensor::randn(&[rank, d_in], 1.0 / (d_in as Real).sqrt(), rng),
        );
        let b = store.add(format!("{name}.lora_b"), Component::Lora, Tensor::zeros(&[d_out, rank]));
        store.set_trainable(target, false);
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            target,
            merged: false,
        })
    }

    pub fn scale(&self) -> Real {
        self.alpha / self.rank as Real
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `(BA)ᵀ` scaled, i.e. the additive change to the stored `d_in × d_out` weight.
    fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        let mut d = tensor::matmul_t(store.value(self.a), true, store.value(self.b), true)?;
        d.scale_assign(self.scale());
        if d.shape() != store.value(self.target).shape() {
            return Err(Error::Merge(format!(
                "adapter delta {:?} does not match base weight {:?}",
                d.shape(),
                store.value(self.target).shape()
            )));
        }
        Ok(d)
    }

    /// Folds the update into the base weight: `W′ = W + (α/r)·(BA)ᵀ`.
    pub fn merge(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.merged {
            return Err(Error::Merge("adapter is already merged".into()));
        }
        let d = self.delta(store)?;
        store.value_mut(self.target).add_assign(&d);
        self.merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self, store: &mut ParamStore) -> Result<()> {
        if !self.merged {
            return Err(Error::Merge("adapter is not merged".into()));
        }
        let mut d = self.delta(store)?;
        d.scale_assign(-1.0);
        store.value_mut(self.target).add_assign(&d);
        self.merged = false;
        Ok(())
    }
}

/// `x·W + (α/r)·x·Aᵀ·Bᵀ`, skipping the low-rank path once merged.
pub fn lora_apply(tape: &mut Tape<'_>, x: Var, adapter: &LoraAdapter) -> Result<Var> {
    let y = nn::linear(tape, x, adapter.target, None)?;
    if adapter.merged {
        return Ok(y);
    }
    let a = tape.param(adapter.a);
    let b = tape.param(adapter.b);
    let xa = tape.matmul_t(x, false, a, true)?;
    let xab = tape.matmul_t(xa, false, b, true)?;
    let xab = tape.scale(xab, adapter.scale());
    tape.add(y, xab)
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attn_norm: Norm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub lora_q: LoraAdapter,
    pub lora_v: LoraAdapter,
    pub ffn_norm: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TinyLlm {
    pub config: LlmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Norm,
    pub head: ParamId,
}

impl TinyLlm {
    pub fn new(config: LlmConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = Component::LlmBase;
        let d = config.d2;
        let mut tok = Tensor::randn(&[config.vocab_size, d], config.embed_std, rng);
        tok.row_mut(vocab::PAD).fill(0.0);
        let tok_emb = store.add("llm.tok_emb", c, tok);
        let pos_emb = store.add(
            "llm.pos_emb",
            c,
            Tensor::randn(&[config.context_len, d], config.embed_std, rng),
        );
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("llm.layer{l}");
            let w = |name: &str, din: usize, dout: usize, store: &mut ParamStore, rng: &mut RngStream| {
                store.add(format!("{p}.{name}"), c, nn::init_weight(din, dout, rng))
            };
            let attn_norm = Norm::new(store, &format!("{p}.attn_norm"), c, d);
            let wq = w("wq", d, d, store, rng);
            let wk = w("wk", d, d, store, rng);
            let wv = w("wv", d, d, store, rng);
            let wo = w("wo", d, d, store, rng);
            let ffn_norm = Norm::new(store, &format!("{p}.ffn_norm"), c, d);
            let w1 = w("w1", d, config.ffn_dim, store, rng);
            let b1 = store.add(format!("{p}.b1"), c, Tensor::zeros(&[config.ffn_dim]));
            let w2 = w("w2", config.ffn_dim, d, store, rng);
            let b2 = store.add(format!("{p}.b2"), c, Tensor::zeros(&[d]));
            let (r, alpha) = (config.lora_rank, config.lora_alpha);
            let lora_q = LoraAdapter::attach(store, &format!("{p}.wq"), wq, r, alpha, rng)?;
            let lora_v = LoraAdapter::attach(store, &format!("{p}.wv"), wv, r, alpha, rng)?;
            layers.push(DecoderLayer {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                lora_q,
                lora_v,
                ffn_norm,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = Norm::new(store, "llm.final_norm", c, d);
        let head = store.add("llm.head", c, nn::init_weight(d, config.vocab_size, rng));
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
        })
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().flat_map(|l| [&l.lora_q, &l.lora_v])
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.lora_q, &mut l.lora_v])
    }

    pub fn merge_adapters(&mut self, store: &mut ParamStore) -> Result<()> {
        self.adapters_mut().try_for_each(|a| a.merge(store))
    }

    pub fn unmerge_adapters(&mut self, store: &mut ParamStore) -> Result<()> {
        self.adapters_mut().try_for_each(|a| a.unmerge(store))
    }

    /// Token-embedding lookup for text ids.
    pub fn embed_tokens(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.tok_emb);
        tape.gather_rows(table, ids, Some(vocab::PAD))
    }

    /// Final hidden states. With `last_only`, the last layer computes just the
    /// final position (the only row the answer head needs).
    fn hidden(
        &self,
        tape: &mut Tape<'_>,
        e: Var,
        mode: Mode,
        rng: &mut RngStream,
        last_only: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let len = tape.value(e).rows();
        if len > cfg.context_len {
            return Err(Error::Context {
                len,
                max: cfg.context_len,
            });
        }
        if len == 0 {
            return Err(Error::Prompt("empty input sequence".into()));
        }
        if tape.value(e).cols() != cfg.d2 {
            return Err(Error::Dimension {
                op: "decoder input",
                lhs: tape.value(e).shape().to_vec(),
                rhs: vec![len, cfg.d2],
            });
        }
        let pos = tape.param(self.pos_emb);
        let pos = tape.slice_rows(pos, 0, len)?;
        let mut x = tape.add(e, pos)?;
        x = tape.dropout(x, cfg.dropout, mode, rng)?;
        let full_mask = nn::causal_mask(len, len, None);
        let last_mask = nn::causal_mask(1, len, None);
        for (li, layer) in self.layers.iter().enumerate() {
            let only_last = last_only && li + 1 == self.layers.len();
            let h = layer.attn_norm.apply(tape, x)?;
            let k = nn::linear(tape, h, layer.wk, None)?;
            let v = lora_apply(tape, h, &layer.lora_v)?;
            let (hq, mask, resid) = if only_last {
                let hq = tape.slice_rows(h, len - 1, 1)?;
                let xr = tape.slice_rows(x, len - 1, 1)?;
                (hq, &last_mask, xr)
            } else {
                (h, &full_mask, x)
            };
            let q = lora_apply(tape, hq, &layer.lora_q)?;
            let a = nn::multi_head_attention(tape, q, k, v, cfg.heads, mask)?;
            let a = nn::linear(tape, a, layer.wo, None)?;
            let a = tape.dropout(a, cfg.dropout, mode, rng)?;
            x = tape.add(resid, a)?;
            x = nn::residual_sublayer(tape, x, &layer.ffn_norm, cfg.dropout, mode, rng, |t, h| {
                let f = nn::linear(t, h, layer.w1, Some(layer.b1))?;
                let f = t.relu(f);
                nn::linear(t, f, layer.w2, Some(layer.b2))
            })?;
        }
        self.final_norm.apply(tape, x)
    }

    /// Next-token logits for every position of an embedded sequence.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape<'_>,
        e: Var,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let h = self.hidden(tape, e, mode, rng, false)?;
        nn::linear(tape, h, self.head, None)
    }

    /// `ŷ = softmax(l_yes, l_no)[yes] = σ(l_yes − l_no)` at the last position.
    pub fn predict_yes_prob(
        &self,
        tape: &mut Tape<'_>,
        e: Var,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let h = self.hidden(tape, e, mode, rng, true)?;
        let logits = nn::linear(tape, h, self.head, None)?;
        let yes = tape.select(logits, self.config.yes_token)?;
        let no = tape.select(logits, self.config.no_token)?;
        let diff = tape.sub(yes, no)?;
        Ok(tape.sigmoid(diff))
    }

    /// Mean next-token cross-entropy of a token sequence under the base model
    /// (the answer head is over the whole vocabulary here).
    pub fn lm_loss(
        &self,
        tape: &mut Tape<'_>,
        ids: &[usize],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        if ids.len() < 2 {
            return Err(Error::Sequence("language-model loss needs ≥ 2 tokens".into()));
        }
        let e = self.embed_tokens(tape, &ids[..ids.len() - 1])?;
        let logits = self.decoder_forward(tape, e, mode, rng)?;
        let p = tape.softmax_rows(logits);
        let v = self.config.vocab_size;
        let flat: Vec<usize> = ids[1..].iter().enumerate().map(|(t, &id)| t * v + id).collect();
        let p = tape.reshape(p, &[flat.len() * v, 1])?;
        let picked = tape.gather_rows(p, &flat, None)?;
        // −log p via the clamped BCE against label 1
        tape.bce_mean(picked, &vec![1.0; flat.len()])
    }
}

/// `e^{l_yes} / (e^{l_yes} + e^{l_no})`, computed stably.
pub fn two_way_softmax(l_yes: Real, l_no: Real) -> Real {
    tensor::sigmoid(l_yes - l_no)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_way_softmax_closed_forms() {
        assert_eq!(two_way_softmax(1.3, 1.3), 0.5);
        let e2 = 2f64.exp();
        assert!((two_way_softmax(3.0, 1.0) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((two_way_softmax(3.0, 1.0) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn attach_freezes_target_and_zeroes_b() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let w = store.add("w", Component::LlmBase, Tensor::randn(&[4, 3], 1.0, &mut rng));
        let a = LoraAdapter::attach(&mut store, "w", w, 2, 4.0, &mut rng).unwrap();
        assert!(!store.is_trainable(w));
        assert_eq!(store.value(a.a).shape(), &[2, 4]);
        assert_eq!(store.value(a.b).shape(), &[3, 2]);
        assert!(store.value(a.b).data().iter().all(|&v| v == 0.0));
        assert!(LoraAdapter::attach(&mut store, "w0", w, 0, 4.0, &mut rng).is_err());
    }

    #[test]
    fn double_merge_is_rejected() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let w = store.add("w", Component::LlmBase, Tensor::randn(&[4, 3], 1.0, &mut rng));
        let before = store.value(w).clone();
        let mut a = LoraAdapter::attach(&mut store, "w", w, 2, 4.0, &mut rng).unwrap();
        a.merge(&mut store).unwrap();
        assert!(store.value(w).bit_eq(&before), "B = 0 merge must be a no-op");
        assert!(matches!(a.merge(&mut store), Err(Error::Merge(_))));
        a.unmerge(&mut store).unwrap();
        assert!(a.unmerge(&mut store).is_err());
    }
}
