//! RoI feature extraction: per-proposal point gathering and corner-offset
//! embedding features, plus image-token pooling through projection of the
//! expanded box onto a camera feature map. The learnable projections to the
//! network width C live in the model; this module produces their constant
//! inputs.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use roifusion_tensor::{xavier_uniform, Tensor};

use crate::geometry::{
    min_circumscribed_rect, points_in_box, Box3D, CameraModel, GeometryError, Point3D,
};

#[derive(Debug, Error)]
pub enum RoiError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] roifusion_tensor::TensorError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature-map file (bad magic)")]
    BadMagic,
    #[error("unsupported feature-map version {0}")]
    UnsupportedVersion(u32),
    #[error("feature-map file truncated")]
    Truncated,
    #[error("feature map has invalid stride {0}")]
    BadStride(f64),
}

/// First-stage candidate box with confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub box3d: Box3D,
    pub score: f64,
}

/// Dense 2D feature map in camera pixel space, `stride` pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    /// Shape [channels, height, width].
    pub data: Tensor,
}

const FMAP_MAGIC: &[u8; 4] = b"RFFM";
const FMAP_VERSION: u32 = 1;

impl FeatureMap {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample with clamped borders at continuous cell coords.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        for (c, slot) in out.iter_mut().enumerate() {
            let v00 = self.at(c, y0, x0);
            let v01 = self.at(c, y0, x1);
            let v10 = self.at(c, y1, x0);
            let v11 = self.at(c, y1, x1);
            *slot = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }

    /// Raw binary exchange format: header (dims + stride), body of
    /// little-endian f64, so externally computed backbones can be plugged in.
    pub fn write_to(&self, path: &Path) -> Result<(), RoiError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FMAP_MAGIC)?;
        w.write_all(&FMAP_VERSION.to_le_bytes())?;
        for dim in [self.channels, self.height, self.width] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.stride.to_le_bytes())?;
        for &v in self.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, RoiError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| RoiError::Truncated)?;
        if &magic != FMAP_MAGIC {
            return Err(RoiError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| RoiError::Truncated)?;
        let version = u32::from_le_bytes(b4);
        if version != FMAP_VERSION {
            return Err(RoiError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut b4).map_err(|_| RoiError::Truncated)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| RoiError::Truncated)?;
        let stride = f64::from_le_bytes(b8);
        if !(stride.is_finite() && stride > 0.0) {
            return Err(RoiError::BadStride(stride));
        }
        let len = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8).map_err(|_| RoiError::Truncated)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(FeatureMap {
            channels: dims[0],
            height: dims[1],
            width: dims[2],
            stride,
            data: Tensor::from_vec(&dims, data).expect("dims consistent"),
        })
    }
}

/// Points gathered for one RoI: always exactly N entries; `mask[i]` is true
/// for real (non-padded) points.
#[derive(Debug, Clone)]
pub struct GatheredPoints {
    pub points: Vec<Point3D>,
    pub mask: Vec<bool>,
}

/// Sample or pad the points inside `expand(box, k)` to exactly `n`.
///
/// More than `n` interior points: seeded uniform subsample without
/// replacement (original order preserved). Fewer: existing points repeat
/// cyclically with the repeats marked as padding. Empty box: all-zero
/// sentinel points, mask all false.
pub fn gather_roi_points(
    cloud: &[Point3D],
    box3d: &Box3D,
    k: f64,
    n: usize,
    seed: u64,
) -> Result<GatheredPoints, RoiError> {
    let expanded = box3d.expand(k)?;
    let inside = points_in_box(cloud, &expanded);
    let extras = cloud.first().map_or(0, |p| p.extras.len());

    if inside.is_empty() {
        return Ok(GatheredPoints {
            points: vec![Point3D::with_extras(0.0, 0.0, 0.0, vec![0.0; extras]); n],
            mask: vec![false; n],
        });
    }

    let selected: Vec<usize> = if inside.len() > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = inside.clone();
        pool.shuffle(&mut rng);
        let mut picked: Vec<usize> = pool.into_iter().take(n).collect();
        picked.sort_unstable();
        picked
    } else {
        inside.clone()
    };

    let mut points = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        points.push(cloud[selected[i % selected.len()]].clone());
        mask.push(i < selected.len());
    }
    Ok(GatheredPoints { points, mask })
}

/// Number of geometric embedding features per point: 8 corner offsets as
/// 3-vectors plus the center offset.
pub const GEOM_FEATURES: usize = 27;

/// Assemble per-point embedding features for one RoI, before the learnable
/// projection: concat(point - corner_j for j in 0..8, point - center,
/// extras), all offsets expressed in the box's yaw-aligned frame.
///
/// The canonical frame makes the features invariant under joint rigid
/// motion of (cloud, box), so one refinement mapping serves every proposal
/// pose; this is what lets a desk-scale dataset generalize.
pub fn assemble_point_features(gathered: &GatheredPoints, box3d: &Box3D) -> Tensor {
    let extras = gathered.points.first().map_or(0, |p| p.extras.len());
    let feat_dim = GEOM_FEATURES + extras;
    let mut data = Vec::with_capacity(gathered.points.len() * feat_dim);
    for p in &gathered.points {
        let local = box3d.world_to_box_frame(p);
        for (sx, sy, sz) in crate::geometry::CORNER_SIGNS {
            data.push(local.x - sx * box3d.l / 2.0);
            data.push(local.y - sy * box3d.w / 2.0);
            data.push(local.z - sz * box3d.h / 2.0);
        }
        data.push(local.x);
        data.push(local.y);
        data.push(local.z);
        data.extend_from_slice(&p.extras);
    }
    Tensor::from_vec(&[gathered.points.len(), feat_dim], data).expect("feature shape")
}

/// Full point embedding: assembled features through one linear projection.
pub fn embed_points(
    gathered: &GatheredPoints,
    box3d: &Box3D,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, RoiError> {
    let feats = assemble_point_features(gathered, box3d);
    let mut projected = feats.matmul(weight)?;
    let cols = projected.cols();
    for i in 0..projected.rows() {
        for j in 0..cols {
            let v = projected.at(i, j) + bias.data()[j];
            projected.set(i, j, v);
        }
    }
    Ok(projected)
}

/// Image tokens pooled for one RoI, before the learnable projection.
#[derive(Debug, Clone)]
pub struct PooledImage {
    /// Shape [S*S, channels]; zeros when `valid` is false.
    pub tokens: Tensor,
    pub valid: bool,
    /// Index of the camera the rect was pooled from.
    pub camera: Option<usize>,
}

/// Project the expanded box into the best camera and bilinear-pool an SxS
/// grid over the minimum circumscribed rectangle of the visible corners.
///
/// Camera choice: most depth-valid corners, ties to the lowest index. The
/// rect lives in feature-map cell coordinates and is clipped to the map;
/// `rect_jitter` shifts it by a seeded uniform offset in [-j, j] cells per
/// axis before clipping (calibration-noise experiments).
pub fn pool_image_tokens(
    cameras: &[(CameraModel, FeatureMap)],
    box3d: &Box3D,
    k: f64,
    s: usize,
    rect_jitter: Option<(f64, u64)>,
) -> Result<PooledImage, RoiError> {
    let expanded = box3d.expand(k)?;
    let corners = expanded.corners();

    let mut best: Option<(usize, usize)> = None; // (valid_count, cam_idx)
    for (idx, (cam, _)) in cameras.iter().enumerate() {
        let count = corners.iter().filter(|p| cam.project(p).valid).count();
        if count > 0 && best.map_or(true, |(c, _)| count > c) {
            best = Some((count, idx));
        }
    }
    let channels = cameras.first().map_or(0, |(_, f)| f.channels);
    let invalid = |channels: usize| PooledImage {
        tokens: Tensor::zeros(&[s * s, channels]),
        valid: false,
        camera: None,
    };
    let Some((_, cam_idx)) = best else {
        return Ok(invalid(channels));
    };

    let (cam, fmap) = &cameras[cam_idx];
    let cells: Vec<(f64, f64)> = corners
        .iter()
        .map(|p| cam.project(p))
        .filter(|p| p.valid)
        .map(|p| (p.u / fmap.stride, p.v / fmap.stride))
        .collect();
    let rect = min_circumscribed_rect(&cells)?;

    let (mut x_min, mut y_min, mut x_max, mut y_max) =
        (rect.x_min, rect.y_min, rect.x_max, rect.y_max);
    if let Some((j, seed)) = rect_jitter {
        if j > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let dx = rng.random_range(-j..=j);
            let dy = rng.random_range(-j..=j);
            x_min += dx;
            x_max += dx;
            y_min += dy;
            y_max += dy;
        }
    }
    x_min = x_min.max(0.0);
    y_min = y_min.max(0.0);
    x_max = x_max.min((fmap.width - 1) as f64);
    y_max = y_max.min((fmap.height - 1) as f64);
    if x_min > x_max || y_min > y_max {
        return Ok(invalid(fmap.channels));
    }

    let grid = |lo: f64, hi: f64, i: usize| {
        if s == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * i as f64 / (s - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(s * s * fmap.channels);
    let mut sample = vec![0.0; fmap.channels];
    for gy in 0..s {
        let y = grid(y_min, y_max, gy);
        for gx in 0..s {
            let x = grid(x_min, x_max, gx);
            fmap.sample(x, y, &mut sample);
            data.extend_from_slice(&sample);
        }
    }
    Ok(PooledImage {
        tokens: Tensor::from_vec(&[s * s, fmap.channels], data).expect("token shape"),
        valid: true,
        camera: Some(cam_idx),
    })
}

/// Frozen convolutional stub standing in for a pretrained image backbone:
/// two 3x3 stride-2 convolutions (total stride 4) with tanh in between,
/// seeded once and never trained.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    hidden: usize,
    pub out_channels: usize,
    w1: Tensor, // [hidden, 3, 3, 3]
    b1: Tensor,
    w2: Tensor, // [out, hidden, 3, 3]
    b2: Tensor,
}

impl SyntheticBackbone {
    pub fn init(out_channels: usize, seed: u64) -> Self {
        let hidden = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = xavier_uniform(hidden, 3 * 3 * 3, &mut rng);
        let w2 = xavier_uniform(out_channels, hidden * 3 * 3, &mut rng);
        SyntheticBackbone {
            hidden,
            out_channels,
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[out_channels]),
        }
    }

    /// Run the stack on a [3, H, W] image; output is ceil(H/4) x ceil(W/4)
    /// cells at stride 4.
    pub fn apply(&self, image: &Tensor) -> FeatureMap {
        let (c_in, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        debug_assert_eq!(c_in, 3);
        let mid = conv2d_s2(image, &self.w1, &self.b1, 3, self.hidden, h, w);
        let (h1, w1) = (h.div_ceil(2), w.div_ceil(2));
        let mid = Tensor::from_vec(
            &[self.hidden, h1, w1],
            mid.into_data().iter().map(|v| v.tanh()).collect(),
        )
        .expect("conv shape");
        let out = conv2d_s2(
            &mid,
            &self.w2,
            &self.b2,
            self.hidden,
            self.out_channels,
            h1,
            w1,
        );
        let (h2, w2) = (h1.div_ceil(2), w1.div_ceil(2));
        FeatureMap {
            channels: self.out_channels,
            height: h2,
            width: w2,
            stride: 4.0,
            data: out,
        }
    }
}

/// 3x3 convolution, stride 2, zero padding 1. Weight rows are flattened
/// [out_ch, in_ch*3*3].
fn conv2d_s2(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let h_out = h.div_ceil(2);
    let w_out = w.div_ceil(2);
    let mut out = vec![0.0; c_out * h_out * w_out];
    let inp = input.data();
    for co in 0..c_out {
        let wrow = weight.row(co);
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias.data()[co];
                for ci in 0..c_in {
                    for dy in 0..3usize {
                        let iy = (2 * oy + dy) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = (2 * ox + dx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += inp[(ci * h + iy as usize) * w + ix as usize]
                                * wrow[(ci * 3 + dy) * 3 + dx];
                        }
                    }
                }
                out[(co * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[c_out, h_out, w_out], out).expect("conv output shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_at(x: f64, y: f64, z: f64) -> Box3D {
        Box3D::new(x, y, z, 2.0, 2.0, 2.0, 0.0).unwrap()
    }

    #[test]
    fn gather_empty_box_gives_sentinels() {
        let g = gather_roi_points(&[], &cube_at(0.0, 0.0, 0.0), 1.0, 4, 7).unwrap();
        assert_eq!(g.points.len(), 4);
        assert!(g.mask.iter().all(|m| !m));
        assert!(g
            .points
            .iter()
            .all(|p| p.x == 0.0 && p.y == 0.0 && p.z == 0.0));
    }

    #[test]
    fn gather_exact_n_is_identity_for_any_seed() {
        let cloud: Vec<Point3D> = (0..3)
            .map(|i| Point3D::new(0.1 * i as f64, 0.0, 0.0))
            .collect();
        for seed in [0u64, 1, 99] {
            let g = gather_roi_points(&cloud, &cube_at(0.0, 0.0, 0.0), 1.0, 3, seed).unwrap();
            assert_eq!(g.points, cloud);
            assert!(g.mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn gather_subsample_is_deterministic() {
        let cloud: Vec<Point3D> = (0..30)
            .map(|i| Point3D::new(-0.9 + 0.06 * i as f64, 0.0, 0.0))
            .collect();
        let a = gather_roi_points(&cloud, &cube_at(0.0, 0.0, 0.0), 1.0, 10, 42).unwrap();
        let b = gather_roi_points(&cloud, &cube_at(0.0, 0.0, 0.0), 1.0, 10, 42).unwrap();
        assert_eq!(a.points, b.points);
        assert!(a.mask.iter().all(|&m| m));
        // Everything selected is inside the expanded box.
        let expanded = cube_at(0.0, 0.0, 0.0).expand(1.0).unwrap();
        assert!(a.points.iter().all(|p| expanded.contains(p)));
    }

    #[test]
    fn gather_pads_cyclically() {
        let cloud = vec![Point3D::new(0.2, 0.0, 0.0), Point3D::new(-0.3, 0.1, 0.0)];
        let g = gather_roi_points(&cloud, &cube_at(0.0, 0.0, 0.0), 1.0, 5, 0).unwrap();
        assert_eq!(g.points[2], g.points[0]);
        assert_eq!(g.points[3], g.points[1]);
        assert_eq!(g.points[4], g.points[0]);
        assert_eq!(g.mask, vec![true, true, false, false, false]);
    }

    #[test]
    fn center_point_features_are_negated_corners() {
        let b = cube_at(0.0, 0.0, 0.0);
        let g = GatheredPoints {
            points: vec![Point3D::new(0.0, 0.0, 0.0)],
            mask: vec![true],
        };
        let feats = assemble_point_features(&g, &b);
        let corners = b.corners();
        for (j, c) in corners.iter().enumerate() {
            assert_eq!(feats.at(0, 3 * j), -c.x);
            assert_eq!(feats.at(0, 3 * j + 1), -c.y);
            assert_eq!(feats.at(0, 3 * j + 2), -c.z);
        }
        // Center offset is zero.
        assert_eq!(feats.at(0, 24), 0.0);
        assert_eq!(feats.at(0, 25), 0.0);
        assert_eq!(feats.at(0, 26), 0.0);
    }

    #[test]
    fn features_invariant_under_joint_yaw() {
        // Canonical-frame offsets: rotating cloud and box together about the
        // vertical axis leaves every feature unchanged.
        let b = Box3D::new(4.0, -2.0, 0.5, 3.0, 1.5, 2.0, 0.3).unwrap();
        let p = Point3D::new(4.8, -1.6, 0.9);
        let phi = 1.2f64;
        let (sin, cos) = phi.sin_cos();
        let rot = |x: f64, y: f64| (cos * x - sin * y, sin * x + cos * y);
        let (bx, by) = rot(b.x, b.y);
        let br = Box3D::new(bx, by, b.z, b.l, b.h, b.w, b.theta + phi).unwrap();
        let (px, py) = rot(p.x, p.y);
        let pr = Point3D::new(px, py, p.z);

        let f = assemble_point_features(
            &GatheredPoints {
                points: vec![p],
                mask: vec![true],
            },
            &b,
        );
        let fr = assemble_point_features(
            &GatheredPoints {
                points: vec![pr],
                mask: vec![true],
            },
            &br,
        );
        for (a, c) in f.data().iter().zip(fr.data()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn features_invariant_under_joint_translation() {
        let b = Box3D::new(1.0, 2.0, 0.5, 3.0, 1.5, 2.0, 0.7).unwrap();
        let bt = Box3D::new(11.0, -8.0, 3.5, 3.0, 1.5, 2.0, 0.7).unwrap();
        let p = Point3D::new(1.4, 2.2, 0.9);
        let pt = Point3D::new(11.4, -7.8, 3.9);
        let f = assemble_point_features(
            &GatheredPoints {
                points: vec![p],
                mask: vec![true],
            },
            &b,
        );
        let ft = assemble_point_features(
            &GatheredPoints {
                points: vec![pt],
                mask: vec![true],
            },
            &bt,
        );
        for (a, c) in f.data().iter().zip(ft.data()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_map_round_trip() {
        let dir = std::env::temp_dir().join("rf_fmap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.rffm");
        let fmap = FeatureMap {
            channels: 2,
            height: 3,
            width: 4,
            stride: 4.0,
            data: Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.5).collect()).unwrap(),
        };
        fmap.write_to(&path).unwrap();
        let loaded = FeatureMap::read_from(&path).unwrap();
        assert_eq!(loaded, fmap);
    }

    #[test]
    fn backbone_zero_image_is_zero_map() {
        let bb = SyntheticBackbone::init(6, 99);
        let img = Tensor::zeros(&[3, 16, 20]);
        let fmap = bb.apply(&img);
        assert_eq!((fmap.height, fmap.width), (4, 5));
        assert!(fmap.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_is_deterministic() {
        let img =
            Tensor::from_vec(&[3, 9, 11], (0..297).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = SyntheticBackbone::init(4, 5).apply(&img);
        let b = SyntheticBackbone::init(4, 5).apply(&img);
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (3, 3)); // ceil(9/4), ceil(11/4)
    }
}
