//! The refinement network: per-RoI point/image token embedding, fusion
//! encoder, query decoder and prediction heads over one shared parameter
//! set. Parameters are created, bound and checkpointed in one fixed order,
//! which keeps training and checkpoint bytes fully deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use roifusion_tensor::nn::AttentionVars;
use roifusion_tensor::{xavier_uniform, ParamSet, Tape, Tensor, TensorError, Var};

use crate::config::ConfigMap;
use crate::decoder::{self, BoxResidual, DecoderVars, HeadVars};
use crate::encoder::{self, EncoderLayerVars, FfnVars, ImageBranchVars};
use crate::geometry::{Box3D, CameraModel};
use crate::roi::{
    assemble_point_features, gather_roi_points, pool_image_tokens, FeatureMap, RoiError,
    GEOM_FEATURES,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Roi(#[from] RoiError),
    #[error("checkpoint/config mismatch for `{name}`: expected {expected}, got {got}")]
    CheckpointMismatch {
        name: String,
        expected: String,
        got: String,
    },
    #[error("bad model config: {0}")]
    BadConfig(String),
}

fn bad_cfg(e: crate::config::ConfigError) -> ModelError {
    ModelError::BadConfig(e.to_string())
}

/// Network and extraction hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Token width C.
    pub channels: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Encoder layer count K.
    pub encoder_layers: usize,
    /// Points per RoI N.
    pub points_per_roi: usize,
    /// Image RoI grid size S (S*S tokens).
    pub roi_grid: usize,
    /// Box expansion ratio k.
    pub expand_ratio: f64,
    /// Backbone output channels.
    pub image_channels: usize,
    /// Extra LiDAR channels per point (reflectivity etc.).
    pub point_extras: usize,
    /// Drop the image branch and cross-attention entirely.
    pub lidar_only: bool,
    /// Keep the image branch but skip the cross-attention block.
    pub cross_attention: bool,
    /// Seed of the frozen synthetic backbone.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            heads: 4,
            encoder_layers: 3,
            points_per_roi: 256,
            roi_grid: 7,
            expand_ratio: 2.0,
            image_channels: 8,
            point_extras: 1,
            lidar_only: false,
            cross_attention: true,
            backbone_seed: 7,
        }
    }
}

impl ModelConfig {
    /// Read `model.*` keys, defaulting each missing one.
    pub fn from_config(cfg: &mut ConfigMap) -> Result<Self, ModelError> {
        let d = ModelConfig::default();
        let out = ModelConfig {
            channels: cfg
                .usize_or("model.channels", d.channels)
                .map_err(bad_cfg)?,
            heads: cfg.usize_or("model.heads", d.heads).map_err(bad_cfg)?,
            encoder_layers: cfg
                .usize_or("model.encoder_layers", d.encoder_layers)
                .map_err(bad_cfg)?,
            points_per_roi: cfg
                .usize_or("model.points_per_roi", d.points_per_roi)
                .map_err(bad_cfg)?,
            roi_grid: cfg
                .usize_or("model.roi_grid", d.roi_grid)
                .map_err(bad_cfg)?,
            expand_ratio: cfg
                .f64_or("model.expand_ratio", d.expand_ratio)
                .map_err(bad_cfg)?,
            image_channels: cfg
                .usize_or("model.image_channels", d.image_channels)
                .map_err(bad_cfg)?,
            point_extras: cfg
                .usize_or("model.point_extras", d.point_extras)
                .map_err(bad_cfg)?,
            lidar_only: cfg
                .bool_or("model.lidar_only", d.lidar_only)
                .map_err(bad_cfg)?,
            cross_attention: cfg
                .bool_or("model.cross_attention", d.cross_attention)
                .map_err(bad_cfg)?,
            backbone_seed: cfg
                .u64_or("model.backbone_seed", d.backbone_seed)
                .map_err(bad_cfg)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn point_feature_dim(&self) -> usize {
        GEOM_FEATURES + self.point_extras
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.encoder_layers == 0 {
            return Err(ModelError::BadConfig("encoder_layers must be >= 1".into()));
        }
        if self.points_per_roi == 0 || self.roi_grid == 0 {
            return Err(ModelError::BadConfig(
                "points_per_roi and roi_grid must be >= 1".into(),
            ));
        }
        if !(self.expand_ratio.is_finite() && self.expand_ratio >= 1.0) {
            return Err(ModelError::BadConfig(format!(
                "expand_ratio {} must be >= 1",
                self.expand_ratio
            )));
        }
        Ok(())
    }
}

/// Constant per-RoI network inputs, extracted once per proposal.
#[derive(Debug, Clone)]
pub struct RoiFeatures {
    /// [N, 27 + extras] embedding features before projection.
    pub point_features: Tensor,
    /// True for real (non-padded) points.
    pub pad_mask: Vec<bool>,
    /// [S*S, image_channels] pooled cells before projection; zeros when the
    /// box is invisible to every camera.
    pub image_tokens: Tensor,
    pub image_valid: bool,
}

/// Extract the constant inputs for one proposal box.
pub fn extract_roi_features(
    cloud: &[crate::geometry::Point3D],
    cameras: &[(CameraModel, FeatureMap)],
    box3d: &Box3D,
    cfg: &ModelConfig,
    gather_seed: u64,
    rect_jitter: Option<(f64, u64)>,
) -> Result<RoiFeatures, RoiError> {
    let gathered = gather_roi_points(
        cloud,
        box3d,
        cfg.expand_ratio,
        cfg.points_per_roi,
        gather_seed,
    )?;
    let point_features = assemble_point_features(&gathered, box3d);
    let (image_tokens, image_valid) = if cfg.lidar_only || cameras.is_empty() {
        (
            Tensor::zeros(&[cfg.roi_grid * cfg.roi_grid, cfg.image_channels]),
            false,
        )
    } else {
        let pooled =
            pool_image_tokens(cameras, box3d, cfg.expand_ratio, cfg.roi_grid, rect_jitter)?;
        (pooled.tokens, pooled.valid)
    };
    Ok(RoiFeatures {
        point_features,
        pad_mask: gathered.mask,
        image_tokens,
        image_valid,
    })
}

/// Network output for one RoI, still on the tape.
pub struct RoiOutput {
    /// 1 x 7 box residual.
    pub residual: Var,
    /// 1 x 1 confidence logit; sigmoid is applied by consumers.
    pub logit: Var,
}

/// All parameters bound onto one tape, plus the var list aligned with the
/// parameter set order (for gradient extraction).
pub struct BoundNet {
    pub vars: Vec<Var>,
    embed: (Var, Var),
    img_proj: Option<(Var, Var)>,
    layers: Vec<EncoderLayerVars>,
    decoder: DecoderVars,
    heads: HeadVars,
}

/// The refinement network: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct RefineNet {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl RefineNet {
    /// Seeded initialization: xavier-uniform weights, zero biases, unit
    /// layer-norm scales. LiDAR-only models own no image-branch or
    /// cross-attention parameters at all.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let c = config.channels;

        let add_linear = |p: &mut ParamSet,
                          name: &str,
                          d_in: usize,
                          d_out: usize,
                          rng: &mut ChaCha8Rng|
         -> Result<(), TensorError> {
            p.add(format!("{name}.weight"), xavier_uniform(d_in, d_out, rng))?;
            p.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))
        };
        let add_attn =
            |p: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| -> Result<(), TensorError> {
                for proj in ["wq", "wk", "wv", "wo"] {
                    p.add(format!("{name}.{proj}"), xavier_uniform(c, c, rng))?;
                    p.add(format!("{name}.b{}", &proj[1..]), Tensor::zeros(&[c]))?;
                }
                Ok(())
            };
        let add_norm = |p: &mut ParamSet, name: &str| -> Result<(), TensorError> {
            p.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0))?;
            p.add(format!("{name}.beta"), Tensor::zeros(&[c]))
        };
        let add_ffn =
            |p: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| -> Result<(), TensorError> {
                p.add(format!("{name}.w1"), xavier_uniform(c, 4 * c, rng))?;
                p.add(format!("{name}.b1"), Tensor::zeros(&[4 * c]))?;
                p.add(format!("{name}.w2"), xavier_uniform(4 * c, c, rng))?;
                p.add(format!("{name}.b2"), Tensor::zeros(&[c]))
            };

        add_linear(&mut p, "embed", config.point_feature_dim(), c, &mut rng)?;
        if !config.lidar_only {
            add_linear(&mut p, "img_proj", config.image_channels, c, &mut rng)?;
        }
        for i in 0..config.encoder_layers {
            add_attn(&mut p, &format!("encoder.{i}.point_attn"), &mut rng)?;
            add_norm(&mut p, &format!("encoder.{i}.point_norm"))?;
            if !config.lidar_only {
                add_attn(&mut p, &format!("encoder.{i}.image_attn"), &mut rng)?;
                add_norm(&mut p, &format!("encoder.{i}.image_norm"))?;
                add_attn(&mut p, &format!("encoder.{i}.cross_attn"), &mut rng)?;
                add_norm(&mut p, &format!("encoder.{i}.cross_norm"))?;
            }
            add_ffn(&mut p, &format!("encoder.{i}.ffn"), &mut rng)?;
            add_norm(&mut p, &format!("encoder.{i}.ffn_norm"))?;
        }
        p.add("decoder.query", xavier_uniform(1, c, &mut rng))?;
        add_attn(&mut p, "decoder.attn", &mut rng)?;
        add_norm(&mut p, "decoder.attn_norm")?;
        add_ffn(&mut p, "decoder.ffn", &mut rng)?;
        add_norm(&mut p, "decoder.ffn_norm")?;
        add_linear(&mut p, "head.reg", c, 7, &mut rng)?;
        add_linear(&mut p, "head.conf", c, 1, &mut rng)?;

        Ok(RefineNet { config, params: p })
    }

    /// Wrap an existing parameter set (e.g. a loaded checkpoint), verifying
    /// that every expected parameter is present with the expected shape and
    /// nothing extra remains.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let reference = RefineNet::init(config.clone(), 0)?;
        for rp in reference.params.iter() {
            let got = params
                .get(&rp.name)
                .map_err(|_| ModelError::CheckpointMismatch {
                    name: rp.name.clone(),
                    expected: format!("{:?}", rp.value.shape()),
                    got: "missing".into(),
                })?;
            if got.shape() != rp.value.shape() {
                return Err(ModelError::CheckpointMismatch {
                    name: rp.name.clone(),
                    expected: format!("{:?}", rp.value.shape()),
                    got: format!("{:?}", got.shape()),
                });
            }
        }
        if params.len() != reference.params.len() {
            let extra = params
                .iter()
                .find(|p| !reference.params.contains(&p.name))
                .map(|p| p.name.clone())
                .unwrap_or_default();
            return Err(ModelError::CheckpointMismatch {
                name: extra,
                expected: "no such parameter".into(),
                got: "present in checkpoint".into(),
            });
        }
        Ok(RefineNet { config, params })
    }

    /// Bind every parameter onto a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            let v = if trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            vars.push(v);
        }
        let var = |name: &str| vars[self.params.position(name).expect("bound param")];
        let attn = |name: &str| AttentionVars {
            wq: var(&format!("{name}.wq")),
            bq: var(&format!("{name}.bq")),
            wk: var(&format!("{name}.wk")),
            bk: var(&format!("{name}.bk")),
            wv: var(&format!("{name}.wv")),
            bv: var(&format!("{name}.bv")),
            wo: var(&format!("{name}.wo")),
            bo: var(&format!("{name}.bo")),
        };
        let norm = |name: &str| (var(&format!("{name}.gamma")), var(&format!("{name}.beta")));
        let ffn = |name: &str| FfnVars {
            w1: var(&format!("{name}.w1")),
            b1: var(&format!("{name}.b1")),
            w2: var(&format!("{name}.w2")),
            b2: var(&format!("{name}.b2")),
        };

        let layers = (0..self.config.encoder_layers)
            .map(|i| EncoderLayerVars {
                point_attn: attn(&format!("encoder.{i}.point_attn")),
                point_norm: norm(&format!("encoder.{i}.point_norm")),
                image: (!self.config.lidar_only).then(|| ImageBranchVars {
                    self_attn: attn(&format!("encoder.{i}.image_attn")),
                    self_norm: norm(&format!("encoder.{i}.image_norm")),
                    cross_attn: attn(&format!("encoder.{i}.cross_attn")),
                    cross_norm: norm(&format!("encoder.{i}.cross_norm")),
                }),
                ffn: ffn(&format!("encoder.{i}.ffn")),
                ffn_norm: norm(&format!("encoder.{i}.ffn_norm")),
            })
            .collect();

        BoundNet {
            embed: (var("embed.weight"), var("embed.bias")),
            img_proj: (!self.config.lidar_only)
                .then(|| (var("img_proj.weight"), var("img_proj.bias"))),
            layers,
            decoder: DecoderVars {
                query: var("decoder.query"),
                attn: attn("decoder.attn"),
                attn_norm: norm("decoder.attn_norm"),
                ffn: ffn("decoder.ffn"),
                ffn_norm: norm("decoder.ffn_norm"),
            },
            heads: HeadVars {
                reg_w: var("head.reg.weight"),
                reg_b: var("head.reg.bias"),
                conf_w: var("head.conf.weight"),
                conf_b: var("head.conf.bias"),
            },
            vars,
        }
    }

    /// Full forward pass for one RoI on an existing tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        feats: &RoiFeatures,
    ) -> Result<RoiOutput, ModelError> {
        let x = tape.constant(feats.point_features.clone());
        let f_p = tape.linear(x, bound.embed.0, bound.embed.1)?;
        let f_i = match (&bound.img_proj, feats.image_valid) {
            (Some((w, b)), true) => {
                let t = tape.constant(feats.image_tokens.clone());
                Some(tape.linear(t, *w, *b)?)
            }
            _ => None,
        };
        let fused = encoder::encode(
            tape,
            f_p,
            f_i,
            &bound.layers,
            self.config.heads,
            self.config.cross_attention,
        )?;
        let decoded = decoder::decode(tape, fused, &bound.decoder, self.config.heads)?;
        let (residual, logit) = decoder::predict(tape, decoded, &bound.heads)?;
        Ok(RoiOutput { residual, logit })
    }

    /// Inference for one RoI: box residual and confidence logit.
    pub fn refine_one(&self, feats: &RoiFeatures) -> Result<(BoxResidual, f64), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, feats)?;
        let residual = BoxResidual::from_slice(tape.value(out.residual).data());
        let logit = tape.value(out.logit).item();
        Ok((residual, logit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            heads: 2,
            encoder_layers: 2,
            points_per_roi: 4,
            roi_grid: 2,
            image_channels: 3,
            ..ModelConfig::default()
        }
    }

    fn dummy_features(cfg: &ModelConfig, image_valid: bool) -> RoiFeatures {
        let n = cfg.points_per_roi;
        let f = cfg.point_feature_dim();
        RoiFeatures {
            point_features: Tensor::from_vec(
                &[n, f],
                (0..n * f).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
            pad_mask: vec![true; n],
            image_tokens: Tensor::from_vec(
                &[cfg.roi_grid * cfg.roi_grid, cfg.image_channels],
                (0..cfg.roi_grid * cfg.roi_grid * cfg.image_channels)
                    .map(|i| (i as f64 * 0.11).cos())
                    .collect(),
            )
            .unwrap(),
            image_valid,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = RefineNet::init(tiny_config(), 3).unwrap();
        let b = RefineNet::init(tiny_config(), 3).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn lidar_only_has_no_image_parameters() {
        let cfg = ModelConfig {
            lidar_only: true,
            cross_attention: false,
            ..tiny_config()
        };
        let net = RefineNet::init(cfg, 1).unwrap();
        for p in net.params.iter() {
            assert!(
                !p.name.contains("image") && !p.name.contains("cross") && !p.name.contains("img"),
                "unexpected image parameter {}",
                p.name
            );
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = RefineNet::init(tiny_config(), 9).unwrap();
        let feats = dummy_features(&net.config, true);
        let (r1, l1) = net.refine_one(&feats).unwrap();
        let (r2, l2) = net.refine_one(&feats).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(l1, l2);
        assert!(r1.is_finite());
    }

    #[test]
    fn from_params_rejects_shape_mismatch() {
        let net = RefineNet::init(tiny_config(), 2).unwrap();
        let mut params = net.params.clone();
        *params.get_mut("head.reg.weight").unwrap() = Tensor::zeros(&[3, 3]);
        let err = RefineNet::from_params(tiny_config(), params).unwrap_err();
        match err {
            ModelError::CheckpointMismatch { name, .. } => {
                assert_eq!(name, "head.reg.weight")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn invalid_image_skips_image_stream() {
        let net = RefineNet::init(tiny_config(), 4).unwrap();
        let mut feats = dummy_features(&net.config, false);
        let (r1, _) = net.refine_one(&feats).unwrap();
        // With image_valid = false the image tokens must not matter.
        feats.image_tokens = Tensor::filled(
            &[
                net.config.roi_grid * net.config.roi_grid,
                net.config.image_channels,
            ],
            123.0,
        );
        let (r2, _) = net.refine_one(&feats).unwrap();
        assert_eq!(r1, r2);
    }
}
