//! Decoder and prediction heads: a learnable query attends over the fused
//! point tokens and two linear heads emit box residuals and a confidence
//! logit. Residual encoding/decoding between proposal and target boxes also
//! lives here.

use thiserror::Error;

use roifusion_tensor::nn::{feed_forward, multi_head_attention, residual_norm, AttentionVars};
use roifusion_tensor::{Tape, TensorError, Var};

use crate::encoder::{FfnVars, LN_EPS};
use crate::geometry::{wrap_angle, Box3D, GeometryError};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("non-finite box residual")]
    NonFiniteResidual,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Decoder weights bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// Learnable query embedding, 1 x C; one shared query for all RoIs.
    pub query: Var,
    pub attn: AttentionVars,
    pub attn_norm: (Var, Var),
    pub ffn: FfnVars,
    pub ffn_norm: (Var, Var),
}

/// Prediction head weights bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub reg_w: Var,
    pub reg_b: Var,
    pub conf_w: Var,
    pub conf_b: Var,
}

/// Single decoding layer: the query attends over the fused tokens, then an
/// FFN, each with post-norm residual. Returns the refined query, 1 x C.
pub fn decode(
    tape: &mut Tape,
    fused_tokens: Var,
    d: &DecoderVars,
    heads: usize,
) -> Result<Var, TensorError> {
    let attn = multi_head_attention(tape, d.query, fused_tokens, fused_tokens, &d.attn, heads)?;
    let e1 = residual_norm(tape, attn, d.query, d.attn_norm.0, d.attn_norm.1, LN_EPS)?;
    let ff = feed_forward(tape, e1, d.ffn.w1, d.ffn.b1, d.ffn.w2, d.ffn.b2)?;
    residual_norm(tape, ff, e1, d.ffn_norm.0, d.ffn_norm.1, LN_EPS)
}

/// Two linear heads: box residual (1 x 7) and confidence logit (1 x 1).
/// The sigmoid is applied by consumers, not here.
pub fn predict(tape: &mut Tape, decoded: Var, heads: &HeadVars) -> Result<(Var, Var), TensorError> {
    let residual = tape.linear(decoded, heads.reg_w, heads.reg_b)?;
    let logit = tape.linear(decoded, heads.conf_w, heads.conf_b)?;
    Ok((residual, logit))
}

/// Box refinement target/output: normalized center offsets, log size ratios
/// and a wrapped angle difference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxResidual {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dl: f64,
    pub dh: f64,
    pub dw: f64,
    pub dtheta: f64,
}

impl BoxResidual {
    pub fn from_slice(v: &[f64]) -> Self {
        BoxResidual {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dl: v[3],
            dh: v[4],
            dw: v[5],
            dtheta: v[6],
        }
    }

    pub fn to_array(self) -> [f64; 7] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.dl,
            self.dh,
            self.dw,
            self.dtheta,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Decode a residual against its proposal. dx/dy live in the proposal's
/// yaw-aligned frame and are scaled by its BEV diagonal (dz by its height);
/// sizes decode through exp so the result always has positive extents.
///
/// The proposal-frame parameterization matches the canonical frame of the
/// point embedding: the same (features -> residual) mapping then holds for
/// every proposal pose, which is what makes desk-scale training generalize.
pub fn apply_residuals(proposal: &Box3D, r: &BoxResidual) -> Result<Box3D, DecoderError> {
    if !r.is_finite() {
        return Err(DecoderError::NonFiniteResidual);
    }
    let diag = (proposal.l * proposal.l + proposal.w * proposal.w).sqrt();
    let (sin, cos) = proposal.theta.sin_cos();
    let dx_world = (cos * r.dx - sin * r.dy) * diag;
    let dy_world = (sin * r.dx + cos * r.dy) * diag;
    Ok(Box3D::new(
        proposal.x + dx_world,
        proposal.y + dy_world,
        proposal.z + r.dz * proposal.h,
        proposal.l * r.dl.exp(),
        proposal.h * r.dh.exp(),
        proposal.w * r.dw.exp(),
        wrap_angle(proposal.theta + r.dtheta),
    )?)
}

/// Inverse of [`apply_residuals`].
pub fn encode_residuals(proposal: &Box3D, target: &Box3D) -> BoxResidual {
    let diag = (proposal.l * proposal.l + proposal.w * proposal.w).sqrt();
    let (sin, cos) = proposal.theta.sin_cos();
    let dx_world = target.x - proposal.x;
    let dy_world = target.y - proposal.y;
    BoxResidual {
        dx: (cos * dx_world + sin * dy_world) / diag,
        dy: (-sin * dx_world + cos * dy_world) / diag,
        dz: (target.z - proposal.z) / proposal.h,
        dl: (target.l / proposal.l).ln(),
        dh: (target.h / proposal.h).ln(),
        dw: (target.w / proposal.w).ln(),
        dtheta: wrap_angle(target.theta - proposal.theta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mk(x: f64, y: f64, z: f64, l: f64, h: f64, w: f64, theta: f64) -> Box3D {
        Box3D::new(x, y, z, l, h, w, theta).unwrap()
    }

    #[test]
    fn zero_residual_is_identity() {
        let b = mk(1.0, 2.0, 3.0, 4.0, 1.5, 2.0, 0.6);
        let out = apply_residuals(&b, &BoxResidual::default()).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn encode_apply_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let b = mk(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let r = BoxResidual {
                dx: rng.random_range(-0.5..0.5),
                dy: rng.random_range(-0.5..0.5),
                dz: rng.random_range(-0.5..0.5),
                dl: rng.random_range(-0.4..0.4),
                dh: rng.random_range(-0.4..0.4),
                dw: rng.random_range(-0.4..0.4),
                dtheta: rng.random_range(-1.0..1.0),
            };
            let applied = apply_residuals(&b, &r).unwrap();
            let back = encode_residuals(&b, &applied);
            for (a, e) in back.to_array().iter().zip(r.to_array()) {
                assert!((a - e).abs() < 1e-9, "{a} vs {e}");
            }
            // Exponential size decoding keeps extents positive.
            assert!(applied.l > 0.0 && applied.h > 0.0 && applied.w > 0.0);
        }
    }

    #[test]
    fn log_ratio_ln2_doubles_length() {
        let b = mk(0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 0.0);
        let r = BoxResidual {
            dl: std::f64::consts::LN_2,
            ..Default::default()
        };
        let out = apply_residuals(&b, &r).unwrap();
        assert!((out.l - 6.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_residual_rejected() {
        let b = mk(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let r = BoxResidual {
            dx: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(
            apply_residuals(&b, &r),
            Err(DecoderError::NonFiniteResidual)
        ));
    }
}
