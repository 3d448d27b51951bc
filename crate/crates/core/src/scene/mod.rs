//! Synthetic data substrate: seeded scene generation (point clouds, camera
//! images, ground-truth boxes), a proposal simulator standing in for a
//! first-stage detector, dual-modality augmentation and the on-disk dataset
//! format.

mod dataset;

pub use dataset::{read_dataset, write_dataset, DatasetReader, DatasetWriter, SceneIoError};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use roifusion_tensor::Tensor;

use crate::config::{require_non_negative, ConfigError, ConfigMap};
use crate::geometry::{iou_bev, points_in_box, wrap_angle, Box3D, CameraModel, Point3D};
use crate::roi::Proposal;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("could not place {requested} objects without overlap (placed {placed})")]
    Infeasible { requested: usize, placed: usize },
}

/// One camera with its rendered image, shape [3, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCamera {
    pub model: CameraModel,
    pub image: Tensor,
}

/// Ground-truth box with class and interior point count.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub box3d: Box3D,
    pub class_id: usize,
    pub num_points: usize,
}

/// The unit of data: point cloud, cameras, ground truth and proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub points: Vec<Point3D>,
    pub cameras: Vec<SceneCamera>,
    pub gt_boxes: Vec<GtBox>,
    pub proposals: Vec<Proposal>,
}

/// Size priors and silhouette shades for the two object classes.
const CLASS_PRIORS: [ClassPrior; 2] = [
    ClassPrior {
        l: (3.5, 5.0),
        w: (1.6, 2.1),
        h: (1.4, 1.8),
        shade: [0.85, 0.35, 0.25],
        reflectivity: (0.3, 0.6),
    },
    ClassPrior {
        l: (5.0, 7.0),
        w: (2.0, 2.6),
        h: (2.2, 2.9),
        shade: [0.25, 0.45, 0.9],
        reflectivity: (0.6, 0.9),
    },
];

struct ClassPrior {
    l: (f64, f64),
    w: (f64, f64),
    h: (f64, f64),
    shade: [f64; 3],
    reflectivity: (f64, f64),
}

const BACKGROUND_SHADE: f64 = 0.05;
const CAMERA_HEIGHT: f64 = 1.8;
const MAX_PLACEMENT_TRIES: usize = 60;

/// Generation knobs; every field maps to a `gen.*` config key.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GenConfig {
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// BEV distance range of object centers from the sensor origin.
    pub range_min: f64,
    pub range_max: f64,
    /// Azimuth half-extent of object placement, radians.
    pub azimuth_max: f64,
    /// Reference point count at 10 m; actual counts scale with 1/range^2.
    pub points_at_10m: f64,
    pub max_points_per_object: usize,
    /// Gaussian jitter of surface-sampled points, meters.
    pub point_jitter: f64,
    pub clutter_points: usize,
    pub cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Proposal noise: center sigma per axis (meters), log-size sigma, yaw
    /// sigma (radians), drop and false-positive rates.
    pub center_sigma: [f64; 3],
    pub size_sigma: f64,
    pub yaw_sigma: f64,
    pub drop_rate: f64,
    pub false_positive_rate: f64,
    /// Multiplies proposal center noise by (1 + scale * range / 10 m): far
    /// proposals localize worse, the way real first stages do. 0 disables.
    pub proposal_range_noise_scale: f64,
    /// Independent noisy proposals emitted per ground-truth box.
    pub proposals_per_gt: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 8,
            min_objects: 2,
            max_objects: 5,
            range_min: 6.0,
            range_max: 55.0,
            azimuth_max: 1.5,
            points_at_10m: 120.0,
            max_points_per_object: 400,
            point_jitter: 0.03,
            clutter_points: 250,
            cameras: 2,
            image_width: 96,
            image_height: 64,
            focal: 60.0,
            center_sigma: [0.3, 0.3, 0.1],
            size_sigma: 0.08,
            yaw_sigma: 0.08,
            drop_rate: 0.0,
            false_positive_rate: 0.1,
            proposal_range_noise_scale: 0.0,
            proposals_per_gt: 1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn from_config(cfg: &mut ConfigMap) -> Result<Self, GenError> {
        let d = GenConfig::default();
        let out = GenConfig {
            scenes: cfg.usize_or("gen.scenes", d.scenes)?,
            min_objects: cfg.usize_or("gen.min_objects", d.min_objects)?,
            max_objects: cfg.usize_or("gen.max_objects", d.max_objects)?,
            range_min: cfg.f64_or("gen.range_min", d.range_min)?,
            range_max: cfg.f64_or("gen.range_max", d.range_max)?,
            azimuth_max: cfg.f64_or("gen.azimuth_max", d.azimuth_max)?,
            points_at_10m: cfg.f64_or("gen.points_at_10m", d.points_at_10m)?,
            max_points_per_object: cfg
                .usize_or("gen.max_points_per_object", d.max_points_per_object)?,
            point_jitter: cfg.f64_or("gen.point_jitter", d.point_jitter)?,
            clutter_points: cfg.usize_or("gen.clutter_points", d.clutter_points)?,
            cameras: cfg.usize_or("gen.cameras", d.cameras)?,
            image_width: cfg.usize_or("gen.image_width", d.image_width)?,
            image_height: cfg.usize_or("gen.image_height", d.image_height)?,
            focal: cfg.f64_or("gen.focal", d.focal)?,
            center_sigma: [
                cfg.f64_or("gen.center_sigma_x", d.center_sigma[0])?,
                cfg.f64_or("gen.center_sigma_y", d.center_sigma[1])?,
                cfg.f64_or("gen.center_sigma_z", d.center_sigma[2])?,
            ],
            size_sigma: cfg.f64_or("gen.size_sigma", d.size_sigma)?,
            yaw_sigma: cfg.f64_or("gen.yaw_sigma", d.yaw_sigma)?,
            drop_rate: cfg.f64_or("gen.drop_rate", d.drop_rate)?,
            false_positive_rate: cfg.f64_or("gen.false_positive_rate", d.false_positive_rate)?,
            proposal_range_noise_scale: cfg.f64_or(
                "gen.proposal_range_noise_scale",
                d.proposal_range_noise_scale,
            )?,
            proposals_per_gt: cfg.usize_or("gen.proposals_per_gt", d.proposals_per_gt)?,
            seed: cfg.u64_or("gen.seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        require_non_negative("gen.center_sigma_x", self.center_sigma[0])?;
        require_non_negative("gen.center_sigma_y", self.center_sigma[1])?;
        require_non_negative("gen.center_sigma_z", self.center_sigma[2])?;
        require_non_negative("gen.size_sigma", self.size_sigma)?;
        require_non_negative("gen.yaw_sigma", self.yaw_sigma)?;
        require_non_negative("gen.point_jitter", self.point_jitter)?;
        require_non_negative(
            "gen.proposal_range_noise_scale",
            self.proposal_range_noise_scale,
        )?;
        for (key, rate) in [
            ("gen.drop_rate", self.drop_rate),
            ("gen.false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ConfigError::Invalid {
                    key: key.to_string(),
                    reason: format!("must be in [0, 1], got {rate}"),
                }
                .into());
            }
        }
        if self.proposals_per_gt == 0 {
            return Err(ConfigError::Invalid {
                key: "gen.proposals_per_gt".to_string(),
                reason: "must be >= 1".to_string(),
            }
            .into());
        }
        if self.min_objects > self.max_objects {
            return Err(ConfigError::Invalid {
                key: "gen.min_objects".to_string(),
                reason: "must be <= gen.max_objects".to_string(),
            }
            .into());
        }
        if !(self.range_min.is_finite() && self.range_max.is_finite())
            || self.range_min <= 0.0
            || self.range_min >= self.range_max
        {
            return Err(ConfigError::Invalid {
                key: "gen.range_min".to_string(),
                reason: "need 0 < range_min < range_max".to_string(),
            }
            .into());
        }
        if self.focal <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "gen.focal".to_string(),
                reason: "must be positive".to_string(),
            }
            .into());
        }
        Ok(())
    }
}

/// Per-scene seed derived from the dataset seed and scene index.
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = dataset_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generate one scene deterministically from `seed`.
pub fn generate_scene(cfg: &GenConfig, id: u64, seed: u64) -> Result<Scene, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);

    // Place boxes without BEV overlap above 0.1 IoU.
    let mut gt: Vec<(Box3D, usize)> = Vec::new();
    for placed in 0..n_objects {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let candidate = sample_object_box(cfg, &mut rng);
            if gt.iter().all(|(b, _)| iou_bev(b, &candidate.0) <= 0.1) {
                gt.push(candidate);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(GenError::Infeasible {
                requested: n_objects,
                placed,
            });
        }
    }

    // Object surface points with inverse-square density.
    let mut points = Vec::new();
    for (b, class_id) in &gt {
        let range = b.bev_range().max(1.0);
        let count = ((cfg.points_at_10m * (10.0 / range).powi(2)).round() as usize)
            .clamp(1, cfg.max_points_per_object);
        let prior = &CLASS_PRIORS[*class_id];
        for _ in 0..count {
            points.push(sample_surface_point(b, prior, cfg.point_jitter, &mut rng));
        }
    }

    // Background clutter.
    for _ in 0..cfg.clutter_points {
        let r = rng.random_range(2.0..cfg.range_max * 1.1);
        let phi = rng.random_range(-PI..PI);
        let z = rng.random_range(0.0..3.0);
        let refl = rng.random_range(0.0..0.3);
        points.push(Point3D::with_extras(
            r * phi.cos(),
            r * phi.sin(),
            z,
            vec![refl],
        ));
    }

    // Cameras and rendered silhouettes.
    let cameras = build_cameras(cfg, &gt, &mut rng);

    // Interior counts over the full cloud.
    let gt_boxes: Vec<GtBox> = gt
        .iter()
        .map(|(b, class_id)| GtBox {
            box3d: *b,
            class_id: *class_id,
            num_points: points_in_box(&points, b).len(),
        })
        .collect();

    let proposal_seed = rng.random::<u64>();
    let proposals = simulate_proposals(&gt_boxes, cfg, proposal_seed);

    Ok(Scene {
        id,
        points,
        cameras,
        gt_boxes,
        proposals,
    })
}

fn sample_object_box(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (Box3D, usize) {
    let class_id = rng.random_range(0..CLASS_PRIORS.len());
    let prior = &CLASS_PRIORS[class_id];
    // Area-uniform in the BEV annulus, so object counts per range bucket
    // follow the covered ground area.
    let u: f64 = rng.random_range(0.0..1.0);
    let r = (cfg.range_min * cfg.range_min
        + u * (cfg.range_max * cfg.range_max - cfg.range_min * cfg.range_min))
        .sqrt();
    let phi = rng.random_range(-cfg.azimuth_max..cfg.azimuth_max);
    let l = rng.random_range(prior.l.0..prior.l.1);
    let w = rng.random_range(prior.w.0..prior.w.1);
    let h = rng.random_range(prior.h.0..prior.h.1);
    let theta = rng.random_range(-PI..PI);
    let b = Box3D::new(r * phi.cos(), r * phi.sin(), h / 2.0, l, h, w, theta)
        .expect("sampled box is valid");
    (b, class_id)
}

/// Uniform point on the box surface (faces weighted by area) plus Gaussian
/// jitter; reflectivity drawn from the class prior.
fn sample_surface_point(
    b: &Box3D,
    prior: &ClassPrior,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Point3D {
    let areas = [
        b.w * b.h, // +l face
        b.w * b.h, // -l face
        b.l * b.h, // +w
        b.l * b.h, // -w
        b.l * b.w, // +h
        b.l * b.w, // -h
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let (u, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let local = match face {
        0 => Point3D::new(b.l / 2.0, u * b.w, v * b.h),
        1 => Point3D::new(-b.l / 2.0, u * b.w, v * b.h),
        2 => Point3D::new(u * b.l, b.w / 2.0, v * b.h),
        3 => Point3D::new(u * b.l, -b.w / 2.0, v * b.h),
        4 => Point3D::new(u * b.l, v * b.w, b.h / 2.0),
        _ => Point3D::new(u * b.l, v * b.w, -b.h / 2.0),
    };
    let mut world = b.box_frame_to_world(&local);
    if jitter > 0.0 {
        let normal = Normal::new(0.0, jitter).expect("jitter sigma validated");
        world.x += normal.sample(rng);
        world.y += normal.sample(rng);
        world.z += normal.sample(rng);
    }
    world.extras = vec![rng.random_range(prior.reflectivity.0..prior.reflectivity.1)];
    world
}

fn build_cameras(cfg: &GenConfig, gt: &[(Box3D, usize)], rng: &mut ChaCha8Rng) -> Vec<SceneCamera> {
    let mut cameras = Vec::with_capacity(cfg.cameras);
    for t in 0..cfg.cameras {
        let azimuth = if cfg.cameras == 1 {
            0.0
        } else {
            -0.65 + 1.3 * t as f64 / (cfg.cameras - 1) as f64
        };
        let model = camera_at(cfg, azimuth);
        let image = render_silhouettes(cfg, &model, gt, rng);
        cameras.push(SceneCamera { model, image });
    }
    cameras
}

/// Camera at the sensor origin (height 1.8 m), yawed by `azimuth`, x right,
/// y down, z forward.
fn camera_at(cfg: &GenConfig, azimuth: f64) -> CameraModel {
    let (sin, cos) = azimuth.sin_cos();
    let fwd = [cos, sin, 0.0];
    let right = [sin, -cos, 0.0];
    let down = [0.0, 0.0, -1.0];
    let pos = [0.0, 0.0, CAMERA_HEIGHT];
    let mut extrinsics = [[0.0; 4]; 4];
    for (row, axis) in [right, down, fwd].iter().enumerate() {
        extrinsics[row][..3].copy_from_slice(axis);
        extrinsics[row][3] = -(axis[0] * pos[0] + axis[1] * pos[1] + axis[2] * pos[2]);
    }
    extrinsics[3][3] = 1.0;
    let intrinsics = [
        [cfg.focal, 0.0, cfg.image_width as f64 / 2.0],
        [0.0, cfg.focal, cfg.image_height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ];
    CameraModel::new(intrinsics, extrinsics, cfg.image_width, cfg.image_height)
        .expect("generated camera is valid")
}

/// Flat-shaded convex silhouettes, far boxes painted first.
fn render_silhouettes(
    cfg: &GenConfig,
    cam: &CameraModel,
    gt: &[(Box3D, usize)],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut image = vec![BACKGROUND_SHADE; 3 * w * h];

    let mut order: Vec<(usize, f64, f64)> = gt
        .iter()
        .enumerate()
        .map(|(i, (b, _))| (i, b.bev_range(), rng.random_range(0.8..1.0)))
        .collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite ranges"));

    for (idx, _, brightness) in order {
        let (b, class_id) = &gt[idx];
        let pts: Vec<(f64, f64)> = b
            .corners()
            .iter()
            .map(|p| cam.project(p))
            .filter(|p| p.valid)
            .map(|p| (p.u, p.v))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let hull = convex_hull(pts);
        if hull.len() < 3 {
            continue;
        }
        let shade = CLASS_PRIORS[*class_id].shade;
        fill_convex(&mut image, w, h, &hull, shade.map(|s| s * brightness));
    }
    Tensor::from_vec(&[3, h, w], image).expect("image shape")
}

/// Andrew's monotone chain; returns counterclockwise hull.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite projections"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn fill_convex(image: &mut [f64], w: usize, h: usize, hull: &[(f64, f64)], shade: [f64; 3]) {
    let (mut u_min, mut u_max, mut v_min, mut v_max) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(u, v) in hull {
        u_min = u_min.min(u);
        u_max = u_max.max(u);
        v_min = v_min.min(v);
        v_max = v_max.max(v);
    }
    let x0 = u_min.floor().max(0.0) as usize;
    let x1 = (u_max.ceil() as isize).min(w as isize - 1).max(0) as usize;
    let y0 = v_min.floor().max(0.0) as usize;
    let y1 = (v_max.ceil() as isize).min(h as isize - 1).max(0) as usize;
    if u_min > w as f64 || v_min > h as f64 || u_max < 0.0 || v_max < 0.0 {
        return;
    }
    let n = hull.len();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = true;
            for i in 0..n {
                let a = hull[i];
                let b = hull[(i + 1) % n];
                if (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0) < 0.0 {
                    inside = false;
                    break;
                }
            }
            if inside {
                for c in 0..3 {
                    image[(c * h + y) * w + x] = shade[c];
                }
            }
        }
    }
}

/// Perturbed copies of the ground truth plus false positives, the stand-in
/// for a first-stage detector. True-derived proposals get scores in
/// [0.5, 1), false positives in [0.05, 0.55).
pub fn simulate_proposals(gt_boxes: &[GtBox], cfg: &GenConfig, seed: u64) -> Vec<Proposal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proposals = Vec::new();
    for gt in gt_boxes {
        for _ in 0..cfg.proposals_per_gt {
            if rng.random_range(0.0..1.0) < cfg.drop_rate {
                continue;
            }
            let b = &gt.box3d;
            // Center noise grows with range (sparser returns localize
            // worse); orientation and size noise stay at their base sigmas.
            let center_scale = 1.0 + cfg.proposal_range_noise_scale * b.bev_range() / 10.0;
            let gauss = |sigma: f64, rng: &mut ChaCha8Rng| -> f64 {
                if sigma <= 0.0 {
                    0.0
                } else {
                    Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
                }
            };
            let perturbed = Box3D::new(
                b.x + gauss(cfg.center_sigma[0] * center_scale, &mut rng),
                b.y + gauss(cfg.center_sigma[1] * center_scale, &mut rng),
                b.z + gauss(cfg.center_sigma[2] * center_scale, &mut rng),
                b.l * gauss(cfg.size_sigma, &mut rng).exp(),
                b.h * gauss(cfg.size_sigma, &mut rng).exp(),
                b.w * gauss(cfg.size_sigma, &mut rng).exp(),
                wrap_angle(b.theta + gauss(cfg.yaw_sigma, &mut rng)),
            )
            .expect("perturbed box stays valid");
            proposals.push(Proposal {
                box3d: perturbed,
                score: rng.random_range(0.5..1.0),
            });
            if rng.random_range(0.0..1.0) < cfg.false_positive_rate {
                let (fp, _) = sample_object_box(cfg, &mut rng);
                proposals.push(Proposal {
                    box3d: fp,
                    score: rng.random_range(0.05..0.55),
                });
            }
        }
    }
    proposals
}

/// Dual-modality augmentation operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// Mirror the x coordinate.
    FlipX,
    /// Rotate about the vertical axis by phi radians.
    Rotate(f64),
    /// Uniform scale by s > 0.
    Scale(f64),
}

impl AugmentOp {
    pub fn apply_point(&self, p: &Point3D) -> Point3D {
        let mut out = match self {
            AugmentOp::FlipX => Point3D::new(-p.x, p.y, p.z),
            AugmentOp::Rotate(phi) => {
                let (sin, cos) = phi.sin_cos();
                Point3D::new(cos * p.x - sin * p.y, sin * p.x + cos * p.y, p.z)
            }
            AugmentOp::Scale(s) => Point3D::new(s * p.x, s * p.y, s * p.z),
        };
        out.extras = p.extras.clone();
        out
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let center = self.apply_point(&Point3D::new(b.x, b.y, b.z));
        let (l, h, w, theta) = match self {
            AugmentOp::FlipX => (b.l, b.h, b.w, wrap_angle(PI - b.theta)),
            AugmentOp::Rotate(phi) => (b.l, b.h, b.w, wrap_angle(b.theta + phi)),
            AugmentOp::Scale(s) => (b.l * s, b.h * s, b.w * s, b.theta),
        };
        Box3D::new(center.x, center.y, center.z, l, h, w, theta).expect("augmented box stays valid")
    }

    /// Homogeneous matrix of the inverse world transform.
    fn inverse_matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        m[3][3] = 1.0;
        match self {
            AugmentOp::FlipX => {
                m[0][0] = -1.0;
                m[1][1] = 1.0;
                m[2][2] = 1.0;
            }
            AugmentOp::Rotate(phi) => {
                let (sin, cos) = (-phi).sin_cos();
                m[0][0] = cos;
                m[0][1] = -sin;
                m[1][0] = sin;
                m[1][1] = cos;
                m[2][2] = 1.0;
            }
            AugmentOp::Scale(s) => {
                m[0][0] = 1.0 / s;
                m[1][1] = 1.0 / s;
                m[2][2] = 1.0 / s;
            }
        }
        m
    }
}

/// Transform points, boxes and proposals; compose camera extrinsics with the
/// inverse world transform so projections of transformed points match the
/// untouched images.
pub fn augment(scene: &Scene, op: AugmentOp) -> Scene {
    if let AugmentOp::Scale(s) = op {
        assert!(s > 0.0 && s.is_finite(), "scale factor must be positive");
    }
    let inv = op.inverse_matrix();
    Scene {
        id: scene.id,
        points: scene.points.iter().map(|p| op.apply_point(p)).collect(),
        cameras: scene
            .cameras
            .iter()
            .map(|c| SceneCamera {
                model: CameraModel::from_parts_unchecked(
                    c.model.intrinsics,
                    c.model.compose_world_inverse(&inv).extrinsics,
                    c.model.width,
                    c.model.height,
                ),
                image: c.image.clone(),
            })
            .collect(),
        gt_boxes: scene
            .gt_boxes
            .iter()
            .map(|g| GtBox {
                box3d: op.apply_box(&g.box3d),
                class_id: g.class_id,
                num_points: g.num_points,
            })
            .collect(),
        proposals: scene
            .proposals
            .iter()
            .map(|p| Proposal {
                box3d: op.apply_box(&p.box3d),
                score: p.score,
            })
            .collect(),
    }
}
