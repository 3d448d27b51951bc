//! Attention and feed-forward blocks composed from tape primitives.

use crate::error::TensorError;
use crate::tape::{Tape, Var};

/// Projection weights for one multi-head attention block, already bound to a
/// tape. All four projections carry biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product multi-head attention.
///
/// Per head h: softmax(Q_h K_h^T / sqrt(d)) V_h with d = C / heads; heads are
/// concatenated and passed through the output projection. Queries come from
/// `q_in`, keys and values from `k_in` / `v_in` (equal for self-attention).
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var, TensorError> {
    let channels = tape.value(p.wq).cols();
    if heads == 0 || channels % heads != 0 {
        return Err(TensorError::HeadsMismatch { channels, heads });
    }
    let d = channels / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let q = tape.linear(q_in, p.wq, p.bq)?;
    let k = tape.linear(k_in, p.wk, p.bk)?;
    let v = tape.linear(v_in, p.wv, p.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        let scores = tape.matmul_transb(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scaled)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    tape.linear(concat, p.wo, p.bo)
}

/// Two-layer feed-forward block with SiLU between the linears.
pub fn feed_forward(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, TensorError> {
    let h = tape.linear(x, w1, b1)?;
    let a = tape.silu(h);
    tape.linear(a, w2, b2)
}

/// Post-norm residual connection: LN(sublayer_out + residual).
pub fn residual_norm(
    tape: &mut Tape,
    sublayer_out: Var,
    residual: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var, TensorError> {
    let sum = tape.add(sublayer_out, residual)?;
    tape.layer_norm(sum, gamma, beta, eps)
}
