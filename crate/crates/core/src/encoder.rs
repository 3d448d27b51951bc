//! Fusion encoder: stacked layers of intra-modality self-attention, an
//! optional point<-image cross-attention, and a feed-forward block, all with
//! post-norm residuals. Point tokens absorb image information; the image
//! stream is only ever updated by its own self-attention and chains from
//! layer to layer.

use roifusion_tensor::nn::{feed_forward, multi_head_attention, residual_norm, AttentionVars};
use roifusion_tensor::{Tape, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

/// Bound feed-forward weights: two linears with hidden width 4C.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Image-branch weights of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct ImageBranchVars {
    pub self_attn: AttentionVars,
    pub self_norm: (Var, Var),
    pub cross_attn: AttentionVars,
    pub cross_norm: (Var, Var),
}

/// All weights of one encoder layer, bound to a tape.
#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub point_attn: AttentionVars,
    pub point_norm: (Var, Var),
    /// Absent in LiDAR-only models.
    pub image: Option<ImageBranchVars>,
    pub ffn: FfnVars,
    pub ffn_norm: (Var, Var),
}

/// One encoding layer.
///
/// Point stream: self-attention, then cross-attention over the image
/// stream's self-attended tokens (skipped when there is no valid image or
/// cross-attention is disabled), then the FFN, each with LN(x + residual).
/// Returns the updated point tokens and the image tokens for the next layer.
pub fn encode_layer(
    tape: &mut Tape,
    f_p: Var,
    f_i: Option<Var>,
    layer: &EncoderLayerVars,
    heads: usize,
    cross_attention: bool,
) -> Result<(Var, Option<Var>), TensorError> {
    let p_sa = multi_head_attention(tape, f_p, f_p, f_p, &layer.point_attn, heads)?;
    let p_attn = residual_norm(
        tape,
        p_sa,
        f_p,
        layer.point_norm.0,
        layer.point_norm.1,
        LN_EPS,
    )?;

    let (fused, f_i_next) = match (f_i, &layer.image) {
        (Some(fi), Some(img)) => {
            let i_sa = multi_head_attention(tape, fi, fi, fi, &img.self_attn, heads)?;
            let i_attn = residual_norm(tape, i_sa, fi, img.self_norm.0, img.self_norm.1, LN_EPS)?;
            let fused = if cross_attention {
                let x = multi_head_attention(tape, p_attn, i_attn, i_attn, &img.cross_attn, heads)?;
                residual_norm(tape, x, p_attn, img.cross_norm.0, img.cross_norm.1, LN_EPS)?
            } else {
                p_attn
            };
            (fused, Some(i_attn))
        }
        _ => (p_attn, None),
    };

    let ff = feed_forward(
        tape,
        fused,
        layer.ffn.w1,
        layer.ffn.b1,
        layer.ffn.w2,
        layer.ffn.b2,
    )?;
    let out = residual_norm(tape, ff, fused, layer.ffn_norm.0, layer.ffn_norm.1, LN_EPS)?;
    Ok((out, f_i_next))
}

/// Sequentially apply every encoder layer; returns the fused point tokens.
pub fn encode(
    tape: &mut Tape,
    f_p: Var,
    f_i: Option<Var>,
    layers: &[EncoderLayerVars],
    heads: usize,
    cross_attention: bool,
) -> Result<Var, TensorError> {
    let mut p = f_p;
    let mut i = f_i;
    for layer in layers {
        let (np, ni) = encode_layer(tape, p, i, layer, heads, cross_attention)?;
        p = np;
        i = ni;
    }
    Ok(p)
}
