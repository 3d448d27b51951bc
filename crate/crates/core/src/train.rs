//! Objectives, IoU-based target assignment and the seeded Adam training
//! loop. Per-RoI forward/backward passes run in parallel; gradients are
//! reduced in fixed index order, so the loop is bit-deterministic under a
//! fixed seed regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use roifusion_tensor::{ParamSet, Tape, Tensor, TensorError};

use crate::config::{ConfigError, ConfigMap};
use crate::decoder::{apply_residuals, encode_residuals, BoxResidual};
use crate::evalkit::IouKind;
use crate::geometry::{iou_3d, Box3D};
use crate::model::{ModelConfig, ModelError, RefineNet, RoiFeatures};
use crate::roi::{Proposal, SyntheticBackbone};
use crate::scene::{scene_seed, Scene};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset contains no proposals to train on")]
    EmptyDataset,
}

/// Assignment of one proposal for training.
#[derive(Debug, Clone)]
pub struct TrainTarget {
    /// Positive iff max IoU over ground truths >= threshold.
    pub positive: bool,
    /// The ground truth a positive proposal is matched to; negatives match
    /// nothing.
    pub matched_gt: Option<Box3D>,
    /// Residual target; present iff positive.
    pub regression_target: Option<BoxResidual>,
    /// Max IoU over ground truths (0 when none exist).
    pub iou: f64,
}

/// Match each proposal to its max-IoU ground truth; positives carry encoded
/// regression targets. No ground truth at all means all negatives.
pub fn assign_targets(
    proposals: &[Proposal],
    gt_boxes: &[Box3D],
    iou_threshold: f64,
    kind: IouKind,
) -> Vec<TrainTarget> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gt_boxes.iter().enumerate() {
                let iou = kind.compute(&p.box3d, gt);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                None => TrainTarget {
                    positive: false,
                    matched_gt: None,
                    regression_target: None,
                    iou: 0.0,
                },
                Some((g, iou)) => {
                    let positive = iou >= iou_threshold;
                    TrainTarget {
                        positive,
                        matched_gt: positive.then(|| gt_boxes[g]),
                        regression_target: positive
                            .then(|| encode_residuals(&p.box3d, &gt_boxes[g])),
                        iou,
                    }
                }
            }
        })
        .collect()
}

/// Numerically stable mean binary cross entropy over (logit, 0/1 label)
/// pairs (plain-math reference route).
pub fn confidence_loss(logits: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

/// Smooth-L1 summed over the 7 residual components, averaged over positives
/// (plain-math reference route).
pub fn regression_loss(preds: &[BoxResidual], targets: &[BoxResidual]) -> f64 {
    assert_eq!(preds.len(), targets.len());
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.to_array()
                .iter()
                .zip(t.to_array())
                .map(|(a, b)| {
                    let d = a - b;
                    if d.abs() < 1.0 {
                        0.5 * d * d
                    } else {
                        d.abs() - 0.5
                    }
                })
                .sum::<f64>()
        })
        .sum();
    total / preds.len() as f64
}

/// Weighted total: w_conf * L_conf + w_reg * L_reg.
pub fn total_loss(conf: f64, reg: f64, w_conf: f64, w_reg: f64) -> f64 {
    w_conf * conf + w_reg * reg
}

/// Training hyperparameters; every field maps to a `train.*` config key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub iou_threshold: f64,
    pub iou_kind: IouKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub w_conf: f64,
    pub w_reg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// Per-epoch flip/scale augmentation with point re-subsampling.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iou_threshold: 0.55,
            iou_kind: IouKind::ThreeD,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            w_conf: 1.0,
            w_reg: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &mut ConfigMap) -> Result<Self, TrainError> {
        let d = TrainConfig::default();
        let kind = match cfg.str_or("train.iou_kind", "3d").as_str() {
            "bev" => IouKind::Bev,
            "3d" => IouKind::ThreeD,
            other => {
                return Err(ConfigError::Invalid {
                    key: "train.iou_kind".to_string(),
                    reason: format!("expected `3d` or `bev`, got `{other}`"),
                }
                .into())
            }
        };
        let out = TrainConfig {
            iou_threshold: cfg.f64_or("train.iou_threshold", d.iou_threshold)?,
            iou_kind: kind,
            learning_rate: cfg.f64_or("train.learning_rate", d.learning_rate)?,
            epochs: cfg.usize_or("train.epochs", d.epochs)?,
            batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
            seed: cfg.u64_or("train.seed", d.seed)?,
            w_conf: cfg.f64_or("train.w_conf", d.w_conf)?,
            w_reg: cfg.f64_or("train.w_reg", d.w_reg)?,
            beta1: cfg.f64_or("train.beta1", d.beta1)?,
            beta2: cfg.f64_or("train.beta2", d.beta2)?,
            adam_eps: cfg.f64_or("train.adam_eps", d.adam_eps)?,
            warmup_frac: cfg.f64_or("train.warmup_frac", d.warmup_frac)?,
            augment: cfg.bool_or("train.augment", d.augment)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(ConfigError::Invalid {
                key: "train.iou_threshold".to_string(),
                reason: format!("must be in (0, 1), got {}", self.iou_threshold),
            }
            .into());
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid {
                key: "train.batch_size".to_string(),
                reason: "must be >= 1".to_string(),
            }
            .into());
        }
        if !(0.0..=0.9).contains(&self.warmup_frac) {
            return Err(ConfigError::Invalid {
                key: "train.warmup_frac".to_string(),
                reason: format!("must be in [0, 0.9], got {}", self.warmup_frac),
            }
            .into());
        }
        Ok(())
    }
}

/// Single-cycle cosine schedule with linear warmup.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = (total_steps as f64 * warmup_frac).floor() as usize;
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam optimizer state aligned with one parameter set.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update; `grads` must align with the parameter set order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..grads.len() {
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = params.at_mut(idx).value.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One RoI view for a single epoch: constant features plus its target.
struct TrainItem {
    proposal: Proposal,
    features: RoiFeatures,
    target: TrainTarget,
}

/// Per-scene training state computed once: backbone feature maps, fixed
/// target assignment (labels and matched indices are invariant under the
/// flip/scale augmentation applied later).
struct PreparedScene {
    points: Vec<crate::geometry::Point3D>,
    cams: Vec<(crate::geometry::CameraModel, crate::roi::FeatureMap)>,
    gts: Vec<Box3D>,
    proposals: Vec<Proposal>,
    /// (positive, matched gt index, proposal IoU) per proposal.
    base: Vec<(bool, Option<usize>, f64)>,
    scene_id: u64,
}

fn prepare_scenes(
    scenes: &[Scene],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<PreparedScene>, TrainError> {
    let backbone = (!model_cfg.lidar_only)
        .then(|| SyntheticBackbone::init(model_cfg.image_channels, model_cfg.backbone_seed));
    let mut prepared = Vec::with_capacity(scenes.len());
    let mut total = 0usize;
    for scene in scenes {
        let cams = match &backbone {
            Some(bb) => scene
                .cameras
                .iter()
                .map(|c| (c.model.clone(), bb.apply(&c.image)))
                .collect(),
            None => Vec::new(),
        };
        let gts: Vec<Box3D> = scene.gt_boxes.iter().map(|g| g.box3d).collect();
        let base = scene
            .proposals
            .iter()
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    let iou = train_cfg.iou_kind.compute(&p.box3d, gt);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                match best {
                    None => (false, None, 0.0),
                    Some((g, iou)) => (iou >= train_cfg.iou_threshold, Some(g), iou),
                }
            })
            .collect();
        total += scene.proposals.len();
        prepared.push(PreparedScene {
            points: scene.points.clone(),
            cams,
            gts,
            proposals: scene.proposals.clone(),
            base,
            scene_id: scene.id,
        });
    }
    if total == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(prepared)
}

/// Build the RoI views of one epoch. With augmentation on, every scene gets
/// an independent flip coin and a uniform scale in [0.9, 1.1], and point
/// subsets are re-gathered under an epoch-varied seed; pooled image tokens
/// come from the untransformed world, which the compensated-extrinsics
/// construction makes exactly consistent with the transformed geometry.
fn epoch_items(
    prepared: &[PreparedScene],
    model_cfg: &ModelConfig,
    epoch_seed: u64,
    augment_on: bool,
) -> Result<Vec<TrainItem>, TrainError> {
    use crate::scene::AugmentOp;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut items = Vec::new();
    for scene in prepared {
        let ops: Vec<AugmentOp> = if augment_on {
            use rand::Rng;
            let mut ops = Vec::new();
            if rng.random_range(0.0..1.0) < 0.5 {
                ops.push(AugmentOp::FlipX);
            }
            ops.push(AugmentOp::Scale(rng.random_range(0.9..1.1)));
            ops
        } else {
            Vec::new()
        };
        let point_of = |p: &crate::geometry::Point3D| {
            let mut out = p.clone();
            for op in &ops {
                out = op.apply_point(&out);
            }
            out
        };
        let box_of = |b: &Box3D| {
            let mut out = *b;
            for op in &ops {
                out = op.apply_box(&out);
            }
            out
        };
        let points: Vec<crate::geometry::Point3D> = scene.points.iter().map(point_of).collect();
        let gts: Vec<Box3D> = scene.gts.iter().map(box_of).collect();

        for (idx, (proposal, &(positive, matched, iou))) in
            scene.proposals.iter().zip(&scene.base).enumerate()
        {
            let t_prop = Proposal {
                box3d: box_of(&proposal.box3d),
                score: proposal.score,
            };
            // Point re-subsampling is part of the augmentation: without it
            // the gathered subset is fixed across epochs.
            let gather_seed = if augment_on {
                scene_seed(epoch_seed ^ scene.scene_id, idx as u64)
            } else {
                scene_seed(scene.scene_id, idx as u64)
            };
            let gathered = crate::roi::gather_roi_points(
                &points,
                &t_prop.box3d,
                model_cfg.expand_ratio,
                model_cfg.points_per_roi,
                gather_seed,
            )
            .map_err(ModelError::Roi)?;
            let point_features = crate::roi::assemble_point_features(&gathered, &t_prop.box3d);
            // Pool from the untransformed world: identical by construction.
            let (image_tokens, image_valid) = if model_cfg.lidar_only || scene.cams.is_empty() {
                (
                    Tensor::zeros(&[
                        model_cfg.roi_grid * model_cfg.roi_grid,
                        model_cfg.image_channels,
                    ]),
                    false,
                )
            } else {
                let pooled = crate::roi::pool_image_tokens(
                    &scene.cams,
                    &proposal.box3d,
                    model_cfg.expand_ratio,
                    model_cfg.roi_grid,
                    None,
                )
                .map_err(ModelError::Roi)?;
                (pooled.tokens, pooled.valid)
            };
            let matched_gt = (positive && matched.is_some()).then(|| gts[matched.expect("index")]);
            items.push(TrainItem {
                features: RoiFeatures {
                    point_features,
                    pad_mask: gathered.mask,
                    image_tokens,
                    image_valid,
                },
                target: TrainTarget {
                    positive,
                    matched_gt,
                    regression_target: matched_gt
                        .map(|gt| encode_residuals(&t_prop.box3d, &gt)),
                    iou,
                },
                proposal: t_prop,
            });
        }
    }
    Ok(items)
}

/// Per-epoch training metrics, one line-delimited record each.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub conf_loss: f64,
    pub reg_loss: f64,
    pub mean_refined_iou: f64,
    pub mean_proposal_iou: f64,
    pub accuracy: f64,
    pub lr: f64,
}

struct RoiPass {
    conf: f64,
    reg: Option<f64>,
    grads: Vec<Tensor>,
    refined_iou: Option<f64>,
    correct: bool,
}

fn run_roi(
    net: &RefineNet,
    item: &TrainItem,
    conf_scale: f64,
    reg_scale: f64,
) -> Result<RoiPass, TrainError> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let out = net.forward(&mut tape, &bound, &item.features)?;
    let label = if item.target.positive { 1.0 } else { 0.0 };

    let bce = tape.bce_with_logits_mean(out.logit, &[label])?;
    let mut loss = tape.scale(bce, conf_scale);
    let conf = tape.value(bce).item();

    let mut reg = None;
    if let Some(target) = &item.target.regression_target {
        let target_tensor =
            Tensor::from_vec(&[1, 7], target.to_array().to_vec()).expect("residual shape");
        let sl1 = tape.smooth_l1_sum(out.residual, &target_tensor)?;
        reg = Some(tape.value(sl1).item());
        let scaled = tape.scale(sl1, reg_scale);
        loss = tape.add(loss, scaled)?;
    }

    let logit = tape.value(out.logit).item();
    let residual = BoxResidual::from_slice(tape.value(out.residual).data());
    let refined_iou = match (&item.target.matched_gt, residual.is_finite()) {
        (Some(gt), true) => apply_residuals(&item.proposal.box3d, &residual)
            .ok()
            .map(|refined| iou_3d(&refined, gt)),
        _ => None,
    };

    let grads = tape.backward(loss)?;
    let grad_list = bound
        .vars
        .iter()
        .enumerate()
        .map(|(idx, &var)| match grads.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(net.params.at(idx).value.shape()),
        })
        .collect();

    Ok(RoiPass {
        conf,
        reg,
        grads: grad_list,
        refined_iou,
        correct: (logit > 0.0) == item.target.positive,
    })
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub net: RefineNet,
    pub metrics: Vec<EpochMetrics>,
}

const AUGMENT_SALT: u64 = 0xA06;

/// Seeded end-to-end training. `on_epoch` fires after every epoch with its
/// metrics record.
pub fn train(
    scenes: &[Scene],
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    let prepared = prepare_scenes(scenes, &model_cfg, train_cfg)?;
    let n_items: usize = prepared.iter().map(|s| s.proposals.len()).sum();
    let mut net = RefineNet::init(model_cfg.clone(), train_cfg.seed)?;
    let mut adam = Adam::new(
        &net.params,
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.adam_eps,
    );
    let steps_per_epoch = n_items.div_ceil(train_cfg.batch_size);
    let total_steps = steps_per_epoch * train_cfg.epochs;
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(train_cfg.epochs);

    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..train_cfg.epochs {
        let items = epoch_items(
            &prepared,
            &model_cfg,
            scene_seed(train_cfg.seed ^ AUGMENT_SALT, epoch as u64),
            train_cfg.augment,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(train_cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut conf_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut pos_count = 0usize;
        let mut refined_iou_sum = 0.0;
        let mut proposal_iou_sum = 0.0;
        let mut matched_count = 0usize;
        let mut correct = 0usize;
        let mut last_lr = 0.0;

        for batch in order.chunks(train_cfg.batch_size) {
            let lr = cosine_lr(
                step,
                total_steps,
                train_cfg.learning_rate,
                train_cfg.warmup_frac,
            );
            last_lr = lr;
            step += 1;
            let b = batch.len();
            let b_pos = batch
                .iter()
                .filter(|&&i| items[i].target.positive)
                .count()
                .max(1);
            let conf_scale = train_cfg.w_conf / b as f64;
            let reg_scale = train_cfg.w_reg / b_pos as f64;

            let passes: Vec<Result<RoiPass, TrainError>> = batch
                .par_iter()
                .map(|&i| run_roi(&net, &items[i], conf_scale, reg_scale))
                .collect();

            let mut acc: Vec<Tensor> = net
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            for (pass, &item_idx) in passes.into_iter().zip(batch) {
                let pass = pass?;
                conf_sum += pass.conf;
                if let Some(r) = pass.reg {
                    reg_sum += r;
                    pos_count += 1;
                }
                if let Some(iou) = pass.refined_iou {
                    refined_iou_sum += iou;
                    proposal_iou_sum += items[item_idx].target.iou;
                    matched_count += 1;
                }
                if pass.correct {
                    correct += 1;
                }
                for (a, g) in acc.iter_mut().zip(&pass.grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
            adam.step(&mut net.params, &acc, lr);
        }

        let conf_loss = conf_sum / n_items as f64;
        let reg_loss = if pos_count > 0 {
            reg_sum / pos_count as f64
        } else {
            0.0
        };
        let record = EpochMetrics {
            epoch,
            loss: total_loss(conf_loss, reg_loss, train_cfg.w_conf, train_cfg.w_reg),
            conf_loss,
            reg_loss,
            mean_refined_iou: if matched_count > 0 {
                refined_iou_sum / matched_count as f64
            } else {
                0.0
            },
            mean_proposal_iou: if matched_count > 0 {
                proposal_iou_sum / matched_count as f64
            } else {
                0.0
            },
            accuracy: correct as f64 / n_items as f64,
            lr: last_lr,
        };
        if !record.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: record.loss,
            });
        }
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { net, metrics })
}
