//! Building blocks shared by the sequence encoder and the language model.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Real, Tensor, LN_EPS};

/// Weight tensor `d_in × d_out` drawn from N(0, 1/d_in).
pub fn init_weight(d_in: usize, d_out: usize, rng: &mut RngStream) -> Tensor {
    Tensor::randn(&[d_in, d_out], 1.0 / (d_in as Real).sqrt(), rng)
}

/// Layer-norm gain and bias parameters.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, component: crate::Component, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), component, Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), component, Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// `x·W (+ b)`.
pub fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
    let wv = tape.param(w);
    let y = tape.matmul(x, wv)?;
    match b {
        Some(b) => {
            let bv = tape.param(b);
            tape.add_row(y, bv)
        }
        None => Ok(y),
    }
}

/// Pre-norm residual: `x + Dropout(sublayer(LayerNorm(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn residual_sublayer<F>(
    tape: &mut Tape<'_>,
    x: Var,
    norm: &Norm,
    rate: Real,
    mode: Mode,
    rng: &mut RngStream,
    sublayer: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape<'_>, Var) -> Result<Var>,
{
    let h = norm.apply(tape, x)?;
    let s = sublayer(tape, h)?;
    let s = tape.dropout(s, rate, mode, rng)?;
    tape.add(x, s)
}

/// Additive attention mask for `q_rows` queries that are the *last* `q_rows` of
/// `k_rows` positions. Future keys and invalid (padding) keys get `-inf`.
pub fn causal_mask(q_rows: usize, k_rows: usize, key_valid: Option<&[bool]>) -> Tensor {
    let offset = k_rows - q_rows;
    let mut m = Tensor::zeros(&[q_rows, k_rows]);
    for i in 0..q_rows {
        let pos = offset + i;
        for (j, v) in m.row_mut(i).iter_mut().enumerate() {
            let valid = key_valid.is_none_or(|kv| kv[j]);
            if j > pos || !valid {
                *v = Real::NEG_INFINITY;
            }
        }
    }
    m
}

/// Scaled dot-product attention over `heads` column groups of already projected
/// `q`, `k`, `v`, scaled by `1/√(d/heads)`; heads are concatenated back.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: &Tensor,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let m = tape.constant(mask.clone());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_t(qh, false, kh, true)?;
        let s = tape.scale(s, scale);
        let s = tape.add(s, m)?;
        let p = tape.softmax_rows(s);
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat_cols(&outs)
}

/// Sum over each row, as a column vector.
pub fn row_sums(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let c = tape.value(x).cols();
    let ones = tape.constant(Tensor::filled(&[c, 1], 1.0));
    tape.matmul(x, ones)
}
