//! Independent oracles for the geometry kernels: Monte-Carlo area/volume
//! sampling for rotated IoU, half-space tests for containment, and an
//! explicit matrix product for projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roifusion_core::geometry::{
    iou_3d, iou_bev, min_circumscribed_rect, points_in_box, Box3D, CameraModel, Point3D,
};

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    Box3D::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-1.0..1.0),
        rng.random_range(1.0..5.0),
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// BEV footprint membership test used by the Monte-Carlo oracle; written
/// directly against the rotation definition, independent from the clipper.
fn in_footprint(b: &Box3D, x: f64, y: f64) -> bool {
    let (sin, cos) = b.theta.sin_cos();
    let dx = x - b.x;
    let dy = y - b.y;
    let lx = cos * dx + sin * dy;
    let ly = -sin * dx + cos * dy;
    lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
}

fn mc_iou_bev(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let pts: Vec<(f64, f64)> = a
        .corners()
        .iter()
        .chain(b.corners().iter())
        .map(|p| (p.x, p.y))
        .collect();
    let rect = min_circumscribed_rect(&pts).unwrap();
    let mut inter = 0usize;
    let mut union = 0usize;
    for _ in 0..samples {
        let x = rng.random_range(rect.x_min..rect.x_max);
        let y = rng.random_range(rect.y_min..rect.y_max);
        let ia = in_footprint(a, x, y);
        let ib = in_footprint(b, x, y);
        if ia && ib {
            inter += 1;
        }
        if ia || ib {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mc_iou_3d(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let pts: Vec<(f64, f64)> = a
        .corners()
        .iter()
        .chain(b.corners().iter())
        .map(|p| (p.x, p.y))
        .collect();
    let rect = min_circumscribed_rect(&pts).unwrap();
    let z_min = (a.z - a.h / 2.0).min(b.z - b.h / 2.0);
    let z_max = (a.z + a.h / 2.0).max(b.z + b.h / 2.0);
    let mut inter = 0usize;
    let mut union = 0usize;
    for _ in 0..samples {
        let p = Point3D::new(
            rng.random_range(rect.x_min..rect.x_max),
            rng.random_range(rect.y_min..rect.y_max),
            rng.random_range(z_min..z_max),
        );
        let ia = a.contains(&p);
        let ib = b.contains(&p);
        if ia && ib {
            inter += 1;
        }
        if ia || ib {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn rotated_square_iou_matches_monte_carlo() {
    let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0).unwrap();
    let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mc = mc_iou_bev(&a, &b, 100_000, &mut rng);
    assert!((iou_bev(&a, &b) - mc).abs() < 1e-2);
}

#[test]
fn random_pairs_match_monte_carlo_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut overlapping = 0;
    for _ in 0..40 {
        let a = random_box(&mut rng, 2.5);
        let b = random_box(&mut rng, 2.5);
        let exact_bev = iou_bev(&a, &b);
        let exact_3d = iou_3d(&a, &b);
        let mc_bev = mc_iou_bev(&a, &b, 100_000, &mut rng);
        let mc_3d = mc_iou_3d(&a, &b, 100_000, &mut rng);
        assert!(
            (exact_bev - mc_bev).abs() < 1e-2,
            "bev {exact_bev} vs mc {mc_bev} for {a:?} {b:?}"
        );
        assert!(
            (exact_3d - mc_3d).abs() < 1e-2,
            "3d {exact_3d} vs mc {mc_3d} for {a:?} {b:?}"
        );
        if exact_bev > 0.05 {
            overlapping += 1;
        }
    }
    // The sampling ranges must actually produce overlapping pairs.
    assert!(overlapping > 10, "only {overlapping} overlapping pairs");
}

#[test]
fn iou_symmetry_and_rigid_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let a = random_box(&mut rng, 3.0);
        let b = random_box(&mut rng, 3.0);
        assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() < 1e-9);
        assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() < 1e-9);
        let v = iou_3d(&a, &b);
        assert!((0.0..=1.0).contains(&v));

        // Joint rigid transform: common translation + yaw about the origin.
        let (tx, ty, tz) = (
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-2.0..2.0),
        );
        let phi: f64 = rng.random_range(-3.0..3.0);
        let move_box = |b: &Box3D| {
            let (sin, cos) = phi.sin_cos();
            Box3D::new(
                cos * b.x - sin * b.y + tx,
                sin * b.x + cos * b.y + ty,
                b.z + tz,
                b.l,
                b.h,
                b.w,
                b.theta + phi,
            )
            .unwrap()
        };
        let va = iou_3d(&move_box(&a), &move_box(&b));
        assert!((va - v).abs() < 1e-9, "rigid invariance broke: {va} vs {v}");
    }
}

/// Half-space oracle: a point is inside iff it is on the inner side of all
/// six faces, each face described by a corner and an outward normal derived
/// from corner differences only.
#[test]
fn containment_matches_half_space_oracle_on_1000_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b = random_box(&mut rng, 1.0);
    let corners = b.corners();
    // Corner order: top face 0..4 counterclockwise, bottom face 4..8.
    let edge = |i: usize, j: usize| {
        [
            corners[j].x - corners[i].x,
            corners[j].y - corners[i].y,
            corners[j].z - corners[i].z,
        ]
    };
    let axis_l = edge(1, 0); // +l direction
    let axis_w = edge(3, 0); // +w direction
    let axis_h = edge(4, 0); // +h direction
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let norm = |a: [f64; 3]| dot(a, a).sqrt();
    let inside_oracle = |p: &Point3D| {
        let rel = [p.x - b.x, p.y - b.y, p.z - b.z];
        dot(rel, axis_l).abs() <= norm(axis_l) * b.l / 2.0 + 1e-12
            && dot(rel, axis_w).abs() <= norm(axis_w) * b.w / 2.0 + 1e-12
            && dot(rel, axis_h).abs() <= norm(axis_h) * b.h / 2.0 + 1e-12
    };

    let points: Vec<Point3D> = (0..1000)
        .map(|_| {
            Point3D::new(
                b.x + rng.random_range(-4.0..4.0),
                b.y + rng.random_range(-4.0..4.0),
                b.z + rng.random_range(-3.0..3.0),
            )
        })
        .collect();
    let got = points_in_box(&points, &b);
    let expect: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| inside_oracle(p))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(got, expect);
}

#[test]
fn expansion_only_grows_the_contained_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let b = random_box(&mut rng, 2.0);
        let points: Vec<Point3D> = (0..300)
            .map(|_| {
                Point3D::new(
                    b.x + rng.random_range(-6.0..6.0),
                    b.y + rng.random_range(-6.0..6.0),
                    b.z + rng.random_range(-4.0..4.0),
                )
            })
            .collect();
        let k = rng.random_range(1.0..3.0);
        let small = points_in_box(&points, &b);
        let big = points_in_box(&points, &b.expand(k).unwrap());
        for idx in &small {
            assert!(big.contains(idx));
        }
    }
}

/// Projection against the explicit K [R|t] matrix product with perspective
/// divide, assembled independently here.
#[test]
fn projection_matches_matrix_oracle() {
    let intrinsics = [[85.0, 0.0, 47.5], [0.0, 92.0, 31.0], [0.0, 0.0, 1.0]];
    // Rotation about z by 0.35 then x by 0.1, camera 2 m up.
    let (s1, c1) = 0.35f64.sin_cos();
    let (s2, c2) = 0.1f64.sin_cos();
    let rz = [[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c2, -s2], [0.0, s2, c2]];
    let mut rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = (0..3).map(|k| rx[i][k] * rz[k][j]).sum();
        }
    }
    let t = [0.3, -0.2, 2.0];
    let mut extrinsics = [[0.0; 4]; 4];
    for i in 0..3 {
        extrinsics[i][..3].copy_from_slice(&rot[i]);
        extrinsics[i][3] = t[i];
    }
    extrinsics[3][3] = 1.0;
    let cam = CameraModel::new(intrinsics, extrinsics, 96, 64).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let p = Point3D::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5.0..30.0),
        );
        let proj = cam.project(&p);

        // Oracle: full homogeneous pipeline.
        let world = [p.x, p.y, p.z, 1.0];
        let mut camf = [0.0; 3];
        for i in 0..3 {
            camf[i] = (0..4).map(|k| extrinsics[i][k] * world[k]).sum();
        }
        let mut uvw = [0.0; 3];
        for i in 0..3 {
            uvw[i] = (0..3).map(|k| intrinsics[i][k] * camf[k]).sum();
        }
        assert_eq!(proj.valid, camf[2] > 0.0);
        if proj.valid {
            assert!((proj.u - uvw[0] / uvw[2]).abs() < 1e-9);
            assert!((proj.v - uvw[1] / uvw[2]).abs() < 1e-9);
            assert!((proj.depth - camf[2]).abs() < 1e-9);
        }
    }
}
