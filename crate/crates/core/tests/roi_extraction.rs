//! Image RoI pooling against closed-form bilinear oracles, camera
//! selection behavior, and the point-gathering contracts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roifusion_core::geometry::{points_in_box, Box3D, CameraModel, Point3D};
use roifusion_core::roi::{gather_roi_points, pool_image_tokens, FeatureMap, SyntheticBackbone};
use roifusion_tensor::Tensor;

fn test_camera(azimuth: f64) -> CameraModel {
    let (sin, cos) = azimuth.sin_cos();
    let right = [sin, -cos, 0.0];
    let down = [0.0, 0.0, -1.0];
    let fwd = [cos, sin, 0.0];
    let mut extrinsics = [[0.0; 4]; 4];
    for (row, axis) in [right, down, fwd].iter().enumerate() {
        extrinsics[row][..3].copy_from_slice(axis);
    }
    extrinsics[3][3] = 1.0;
    let intrinsics = [[60.0, 0.0, 48.0], [0.0, 60.0, 32.0], [0.0, 0.0, 1.0]];
    CameraModel::new(intrinsics, extrinsics, 96, 64).unwrap()
}

fn constant_map(channels: usize, value: f64) -> FeatureMap {
    FeatureMap {
        channels,
        height: 16,
        width: 24,
        stride: 4.0,
        data: Tensor::filled(&[channels, 16, 24], value),
    }
}

/// Feature map whose single channel is a linear ramp a*x + b*y + c in cell
/// coordinates; bilinear interpolation reproduces it exactly.
fn ramp_map(a: f64, b: f64, c: f64) -> FeatureMap {
    let (h, w) = (16usize, 24usize);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(a * x as f64 + b * y as f64 + c);
        }
    }
    FeatureMap {
        channels: 1,
        height: h,
        width: w,
        stride: 4.0,
        data: Tensor::from_vec(&[1, h, w], data).unwrap(),
    }
}

#[test]
fn box_behind_camera_is_invalid_with_zero_tokens() {
    let cam = test_camera(0.0);
    let b = Box3D::new(-15.0, 0.0, 0.0, 4.0, 1.6, 2.0, 0.2).unwrap();
    let pooled = pool_image_tokens(&[(cam, constant_map(2, 1.0))], &b, 2.0, 3, None).unwrap();
    assert!(!pooled.valid);
    assert!(pooled.camera.is_none());
    assert!(pooled.tokens.data().iter().all(|&v| v == 0.0));
    assert_eq!(pooled.tokens.shape(), &[9, 2]);
}

#[test]
fn constant_map_pools_to_equal_vectors() {
    let cam = test_camera(0.0);
    let b = Box3D::new(12.0, 1.0, 0.0, 4.0, 1.6, 2.0, 0.7).unwrap();
    let pooled = pool_image_tokens(&[(cam, constant_map(3, 2.5))], &b, 2.0, 4, None).unwrap();
    assert!(pooled.valid);
    for row in 0..16 {
        for c in 0..3 {
            assert!((pooled.tokens.at(row, c) - 2.5).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_ramp_matches_closed_form_bilinear() {
    let cam = test_camera(0.0);
    let (a, bb, c) = (0.37, -0.21, 1.5);
    let fmap = ramp_map(a, bb, c);
    let b = Box3D::new(10.0, 0.5, 0.2, 3.0, 1.5, 1.8, 0.3).unwrap();
    let s = 5usize;
    let pooled = pool_image_tokens(&[(cam.clone(), fmap)], &b, 2.0, s, None).unwrap();
    assert!(pooled.valid);

    // Oracle: recompute the rect from scratch and evaluate the plane at the
    // align-corners grid points.
    let expanded = b.expand(2.0).unwrap();
    let cells: Vec<(f64, f64)> = expanded
        .corners()
        .iter()
        .map(|p| cam.project(p))
        .filter(|p| p.valid)
        .map(|p| (p.u / 4.0, p.v / 4.0))
        .collect();
    assert_eq!(cells.len(), 8, "whole box should be visible");
    let x_min = cells
        .iter()
        .map(|c| c.0)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let x_max = cells
        .iter()
        .map(|c| c.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .min(23.0);
    let y_min = cells
        .iter()
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let y_max = cells
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .min(15.0);
    for gy in 0..s {
        for gx in 0..s {
            let x = x_min + (x_max - x_min) * gx as f64 / (s - 1) as f64;
            let y = y_min + (y_max - y_min) * gy as f64 / (s - 1) as f64;
            let expect = a * x + bb * y + c;
            let got = pooled.tokens.at(gy * s + gx, 0);
            assert!(
                (got - expect).abs() < 1e-9,
                "({gx},{gy}): {got} vs {expect}"
            );
        }
    }
}

#[test]
fn camera_with_most_valid_corners_wins_ties_to_lowest_index() {
    // Box in front of camera 1 only.
    let cam_front = test_camera(0.0);
    let cam_side = test_camera(std::f64::consts::FRAC_PI_2);
    let b = Box3D::new(0.0, 14.0, 0.0, 4.0, 1.6, 2.0, 0.1).unwrap();
    let pooled = pool_image_tokens(
        &[
            (cam_front.clone(), constant_map(1, 1.0)),
            (cam_side.clone(), constant_map(1, 2.0)),
        ],
        &b,
        2.0,
        2,
        None,
    )
    .unwrap();
    assert_eq!(pooled.camera, Some(1));
    assert!((pooled.tokens.at(0, 0) - 2.0).abs() < 1e-12);

    // Identical cameras tie on valid corners: the lowest index is chosen.
    let tied = pool_image_tokens(
        &[
            (cam_front.clone(), constant_map(1, 5.0)),
            (cam_front.clone(), constant_map(1, 9.0)),
        ],
        &Box3D::new(12.0, 0.0, 0.0, 4.0, 1.6, 2.0, 0.0).unwrap(),
        2.0,
        2,
        None,
    )
    .unwrap();
    assert_eq!(tied.camera, Some(0));
    assert!((tied.tokens.at(0, 0) - 5.0).abs() < 1e-12);
}

#[test]
fn zero_jitter_changes_nothing_and_jitter_is_seeded() {
    let cam = test_camera(0.0);
    let b = Box3D::new(11.0, -0.5, 0.1, 3.5, 1.5, 1.9, -0.4).unwrap();
    let fmap = ramp_map(0.2, 0.1, 0.0);
    let base = pool_image_tokens(&[(cam.clone(), fmap.clone())], &b, 2.0, 3, None).unwrap();
    let zero =
        pool_image_tokens(&[(cam.clone(), fmap.clone())], &b, 2.0, 3, Some((0.0, 42))).unwrap();
    assert_eq!(base.tokens, zero.tokens);

    let j1 =
        pool_image_tokens(&[(cam.clone(), fmap.clone())], &b, 2.0, 3, Some((2.0, 42))).unwrap();
    let j2 = pool_image_tokens(&[(cam, fmap)], &b, 2.0, 3, Some((2.0, 42))).unwrap();
    assert_eq!(j1.tokens, j2.tokens);
    assert_ne!(base.tokens, j1.tokens);
}

#[test]
fn gathered_points_always_inside_expanded_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let b = Box3D::new(2.0, -1.0, 0.5, 3.0, 1.6, 2.0, 0.9).unwrap();
    let cloud: Vec<Point3D> = (0..500)
        .map(|_| {
            Point3D::new(
                rng.random_range(-4.0..8.0),
                rng.random_range(-6.0..4.0),
                rng.random_range(-2.0..3.0),
            )
        })
        .collect();
    let k = 1.6;
    let g = gather_roi_points(&cloud, &b, k, 64, 3).unwrap();
    let expanded = b.expand(k).unwrap();
    let inside = points_in_box(&cloud, &expanded);
    for (p, &real) in g.points.iter().zip(&g.mask) {
        assert!(expanded.contains(p));
        let _ = real;
    }
    // Mask never marks a padded slot as real.
    let real_count = g.mask.iter().filter(|&&m| m).count();
    assert_eq!(real_count, inside.len().min(64));
}

#[test]
fn backbone_output_dims_are_quarter_scale_for_random_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bb = SyntheticBackbone::init(4, 1);
    for _ in 0..10 {
        let h = rng.random_range(8..40usize);
        let w = rng.random_range(8..40usize);
        let img = Tensor::zeros(&[3, h, w]);
        let fmap = bb.apply(&img);
        assert_eq!(fmap.height, h.div_ceil(4));
        assert_eq!(fmap.width, w.div_ceil(4));
        assert!((fmap.stride - 4.0).abs() < 1e-12);
    }
}
