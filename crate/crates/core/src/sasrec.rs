//! Self-attentive sequential encoder.
//!
//! Item and position embeddings feed `blocks` pre-norm transformer blocks with
//! causal multi-head attention and a position-wise feed-forward network. The
//! hidden state at step `t` scores every item by dot product with its embedding.

use crate::error::{Error, Result};
use crate::nn::{self, Norm};
use crate::optim::{self, OptimizerState};
use crate::param::{Component, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Real, Tensor};

/// Full-scale pretraining batch size.
pub const FULL_BATCH_SIZE: usize = 1028;
pub const DESK_BATCH_SIZE: usize = 128;
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SasrecConfig {
    pub num_items: usize,
    pub d1: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: Real,
    /// Std of the embedding tables at initialisation.
    pub init_std: Real,
}

impl SasrecConfig {
    pub fn full(num_items: usize) -> Self {
        Self {
            num_items,
            d1: 64,
            n: 25,
            blocks: 2,
            heads: 4,
            dropout: 0.2,
            init_std: 0.1,
        }
    }

    pub fn desk(num_items: usize) -> Self {
        Self {
            d1: 32,
            ..Self::full(num_items)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d1 % self.heads != 0 {
            return Err(Error::Config(format!(
                "d1 = {} is not divisible by {} heads",
                self.d1, self.heads
            )));
        }
        if self.n == 0 || self.num_items == 0 {
            return Err(Error::Config("sequence length and item count must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A left-padded training sequence: `items[t]` is the input at step `t` and
/// `targets[t]` the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub targets: Vec<usize>,
}

impl InteractionSequence {
    pub fn non_pad_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().enumerate().filter(|(_, &i)| i != PAD).map(|(t, _)| t)
    }
}

/// Shifts `raw` into (input, next-item) pairs, keeps the most recent `n`, and
/// left-pads. The last observed item only ever appears as a target.
pub fn standardize_sequence(user: usize, raw: &[usize], n: usize) -> Result<InteractionSequence> {
    if raw.len() < 2 {
        return Err(Error::Sequence(format!(
            "user {user}: need at least two events for a training pair, got {}",
            raw.len()
        )));
    }
    if let Some(&bad) = raw.iter().find(|&&i| i == PAD) {
        return Err(Error::Sequence(format!("user {user}: item id {bad} is the pad id")));
    }
    let inputs = &raw[..raw.len() - 1];
    let targets = &raw[1..];
    let keep = inputs.len().min(n);
    let pad = n - keep;
    let mut items = vec![PAD; pad];
    items.extend_from_slice(&inputs[inputs.len() - keep..]);
    let mut tg = vec![PAD; pad];
    tg.extend_from_slice(&targets[targets.len() - keep..]);
    Ok(InteractionSequence {
        user,
        items,
        targets: tg,
    })
}

/// Inference window: the most recent `n` history items, all used as inputs.
pub fn inference_window(history: &[usize], n: usize) -> Vec<usize> {
    let keep = history.len().min(n);
    let mut items = vec![PAD; n - keep];
    items.extend_from_slice(&history[history.len() - keep..]);
    items
}

#[derive(Clone, Debug)]
pub struct SasrecBlock {
    pub attn_norm: Norm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn_norm: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct SasrecModel {
    pub config: SasrecConfig,
    /// `(num_items + 1) × d1`; row 0 is the pad token.
    pub item_emb: ParamId,
    /// `n × d1`.
    pub pos_emb: ParamId,
    pub blocks: Vec<SasrecBlock>,
}

impl SasrecModel {
    pub fn new(config: SasrecConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = Component::Sasrec;
        let d = config.d1;
        let mut items = Tensor::randn(&[config.num_items + 1, d], config.init_std, rng);
        items.row_mut(PAD).fill(0.0);
        let item_emb = store.add("sasrec.item_emb", c, items);
        let pos_emb = store.add(
            "sasrec.pos_emb",
            c,
            Tensor::randn(&[config.n, d], config.init_std, rng),
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = format!("sasrec.block{b}");
            let w = |name: &str, store: &mut ParamStore, rng: &mut RngStream| {
                store.add(format!("{p}.{name}"), c, nn::init_weight(d, d, rng))
            };
            let attn_norm = Norm::new(store, &format!("{p}.attn_norm"), c, d);
            let wq = w("wq", store, rng);
            let wk = w("wk", store, rng);
            let wv = w("wv", store, rng);
            let ffn_norm = Norm::new(store, &format!("{p}.ffn_norm"), c, d);
            let w1 = w("w1", store, rng);
            let b1 = store.add(format!("{p}.b1"), c, Tensor::zeros(&[d]));
            let w2 = w("w2", store, rng);
            let b2 = store.add(format!("{p}.b2"), c, Tensor::zeros(&[d]));
            blocks.push(SasrecBlock {
                attn_norm,
                wq,
                wk,
                wv,
                ffn_norm,
                w1,
                b1,
                w2,
                b2,
            });
        }
        Ok(Self {
            config,
            item_emb,
            pos_emb,
            blocks,
        })
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        if items.len() != self.config.n {
            return Err(Error::Sequence(format!(
                "expected a standardized sequence of length {}, got {}",
                self.config.n,
                items.len()
            )));
        }
        if let Some(&bad) = items.iter().find(|&&i| i > self.config.num_items) {
            return Err(Error::Index {
                what: "item id",
                index: bad,
                size: self.config.num_items + 1,
            });
        }
        Ok(())
    }

    /// `Ê[t] = E_I[items[t]] + E_P[t]`.
    pub fn embed_sequence(&self, tape: &mut Tape<'_>, items: &[usize]) -> Result<Var> {
        self.check_items(items)?;
        let table = tape.param(self.item_emb);
        let e = tape.gather_rows(table, items, Some(PAD))?;
        let p = tape.param(self.pos_emb);
        tape.add(e, p)
    }

    /// Causal multi-head self-attention of an (already normalised) `x`.
    pub fn attention_block(
        &self,
        tape: &mut Tape<'_>,
        block: &SasrecBlock,
        x: Var,
        key_valid: &[bool],
    ) -> Result<Var> {
        let q = nn::linear(tape, x, block.wq, None)?;
        let k = nn::linear(tape, x, block.wk, None)?;
        let v = nn::linear(tape, x, block.wv, None)?;
        let n = key_valid.len();
        let mask = nn::causal_mask(n, n, Some(key_valid));
        nn::multi_head_attention(tape, q, k, v, self.config.heads, &mask)
    }

    /// `ReLU(S·W1 + b1)·W2 + b2`, row by row.
    pub fn ffn_pointwise(&self, tape: &mut Tape<'_>, block: &SasrecBlock, s: Var) -> Result<Var> {
        let h = nn::linear(tape, s, block.w1, Some(block.b1))?;
        let h = tape.relu(h);
        nn::linear(tape, h, block.w2, Some(block.b2))
    }

    /// Hidden states `l^{(b)}` for every position of a standardized sequence.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape<'_>,
        items: &[usize],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let key_valid: Vec<bool> = items.iter().map(|&i| i != PAD).collect();
        let mut x = self.embed_sequence(tape, items)?;
        x = tape.dropout(x, self.config.dropout, mode, rng)?;
        let rate = self.config.dropout;
        for block in &self.blocks {
            x = nn::residual_sublayer(tape, x, &block.attn_norm, rate, mode, rng, |t, h| {
                self.attention_block(t, block, h, &key_valid)
            })?;
            x = nn::residual_sublayer(tape, x, &block.ffn_norm, rate, mode, rng, |t, h| {
                self.ffn_pointwise(t, block, h)
            })?;
        }
        Ok(x)
    }

    /// Scores of items `1..=num_items` for a `1 × d1` hidden state; entry `j`
    /// belongs to item `j + 1`.
    pub fn relevance_scores(&self, tape: &mut Tape<'_>, l_t: Var) -> Result<Var> {
        let table = tape.param(self.item_emb);
        let items = tape.slice_rows(table, 1, self.config.num_items)?;
        tape.matmul_t(l_t, false, items, true)
    }

    /// `u′`: the last hidden state over the user's most recent history. An empty
    /// history encodes an all-pad sequence.
    pub fn encode_user(
        &self,
        tape: &mut Tape<'_>,
        history: &[usize],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let items = inference_window(history, self.config.n);
        let h = self.forward_hidden(tape, &items, mode, rng)?;
        tape.slice_rows(h, self.config.n - 1, 1)
    }

    /// `i′ = E_I[i]` as a `1 × d1` row.
    pub fn encode_item(&self, tape: &mut Tape<'_>, item: usize) -> Result<Var> {
        let table = tape.param(self.item_emb);
        tape.gather_rows(table, &[item], Some(PAD))
    }

    /// Eval-mode `σ(u′·E_I[i])`, the stand-alone preference estimate.
    pub fn predict(&self, store: &ParamStore, history: &[usize], item: usize) -> Result<Real> {
        let mut tape = Tape::new(store);
        let mut rng = RngStream::new(0);
        let u = self.encode_user(&mut tape, history, Mode::Eval, &mut rng)?;
        let i = self.encode_item(&mut tape, item)?;
        let s = tape.matmul_t(u, false, i, true)?;
        Ok(crate::tensor::sigmoid(tape.scalar(s)))
    }

    /// Most relevant next item after `history` (eval mode).
    pub fn top_next_item(&self, store: &ParamStore, history: &[usize]) -> Result<usize> {
        let mut tape = Tape::new(store);
        let mut rng = RngStream::new(0);
        let u = self.encode_user(&mut tape, history, Mode::Eval, &mut rng)?;
        let s = self.relevance_scores(&mut tape, u)?;
        let best = tape
            .value(s)
            .data()
            .iter()
            .enumerate()
            .fold((0, Real::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        Ok(best.0 + 1)
    }

    fn sample_negative(&self, target: usize, rng: &mut RngStream) -> usize {
        if self.config.num_items == 1 {
            return target;
        }
        loop {
            let j = 1 + rng.below(self.config.num_items);
            if j != target {
                return j;
            }
        }
    }

    /// Loss of one sequence as `(sum over positions, position count)`, with the
    /// negatives drawn from `rng`. Exposed for gradient checking.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        seq: &InteractionSequence,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Option<(Var, usize)>> {
        let positions: Vec<usize> = seq.non_pad_positions().collect();
        if positions.is_empty() {
            return Ok(None);
        }
        let targets: Vec<usize> = positions.iter().map(|&t| seq.targets[t]).collect();
        let negatives: Vec<usize> = targets.iter().map(|&t| self.sample_negative(t, rng)).collect();
        let h = self.forward_hidden(tape, &seq.items, mode, rng)?;
        let h = tape.gather_rows(h, &positions, None)?;
        let table = tape.param(self.item_emb);
        let pos = tape.gather_rows(table, &targets, Some(PAD))?;
        let neg = tape.gather_rows(table, &negatives, Some(PAD))?;
        let sp = tape.mul(h, pos)?;
        let sp = nn::row_sums(tape, sp)?;
        let sn = tape.mul(h, neg)?;
        let sn = nn::row_sums(tape, sn)?;
        let logits = tape.concat_rows(&[sp, sn])?;
        let probs = tape.sigmoid(logits);
        let p = positions.len();
        let labels: Vec<Real> = (0..2 * p).map(|k| if k < p { 1.0 } else { 0.0 }).collect();
        let mean = tape.bce_mean(probs, &labels)?;
        // mean over 2p entries → sum over p (positive + negative) pairs
        Ok(Some((tape.scale(mean, 2.0 * p as Real), p)))
    }

    /// One optimizer step of next-item pretraining over `batch`. Returns the
    /// loss per position pair (positive BCE + negative BCE).
    pub fn pretrain_step(
        &self,
        store: &mut ParamStore,
        opt: &mut OptimizerState,
        batch: &[InteractionSequence],
        lr: Real,
        rng: &mut RngStream,
    ) -> Result<Real> {
        if batch.is_empty() {
            return Err(Error::Sequence("empty pretraining batch".into()));
        }
        store.zero_grads();
        let total: usize = batch.iter().map(|s| s.non_pad_positions().count()).sum();
        if total == 0 {
            return Err(Error::Sequence("pretraining batch has no target positions".into()));
        }
        let scale = 1.0 / total as Real;
        let mut loss = 0.0;
        for seq in batch {
            let grads = {
                let mut tape = Tape::new(store);
                let Some((l, _)) = self.sequence_loss(&mut tape, seq, Mode::Train, rng)? else {
                    continue;
                };
                loss += tape.scalar(l);
                tape.backward(l)?.into_params()
            };
            store.accumulate(&grads, scale);
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::TrainingAbort {
                batch: 0,
                lr,
                message: format!("non-finite pretraining loss {loss}"),
            });
        }
        optim::clip_grad_norm(store, optim::DEFAULT_CLIP);
        opt.step(store, lr);
        Ok(loss)
    }
}
