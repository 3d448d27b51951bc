//! Rotated-box IoU via exact Sutherland-Hodgman polygon clipping.

use super::Box3D;

type P2 = [f64; 2];

/// BEV footprint corners, counterclockwise.
fn footprint(b: &Box3D) -> [P2; 4] {
    let (sin, cos) = b.theta.sin_cos();
    let half_l = b.l / 2.0;
    let half_w = b.w / 2.0;
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].map(|(sx, sy)| {
        let dx = sx * half_l;
        let dy = sy * half_w;
        [b.x + cos * dx - sin * dy, b.y + sin * dx + cos * dy]
    })
}

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clip a polygon against one half-plane (left of edge a -> b).
fn clip_edge(subject: &[P2], a: P2, b: P2) -> Vec<P2> {
    let mut out = Vec::with_capacity(subject.len() + 2);
    let n = subject.len();
    for i in 0..n {
        let cur = subject[i];
        let prev = subject[(i + n - 1) % n];
        let cur_in = cross(a, b, cur) >= 0.0;
        let prev_in = cross(a, b, prev) >= 0.0;
        if cur_in {
            if !prev_in {
                out.push(intersect(prev, cur, a, b));
            }
            out.push(cur);
        } else if prev_in {
            out.push(intersect(prev, cur, a, b));
        }
    }
    out
}

/// Intersection of segment p -> q with the infinite line a -> b.
fn intersect(p: P2, q: P2, a: P2, b: P2) -> P2 {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn polygon_area(poly: &[P2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Area of the intersection of two convex CCW polygons.
fn intersection_area(a: &[P2], b: &[P2]) -> f64 {
    let mut poly: Vec<P2> = a.to_vec();
    let n = b.len();
    for i in 0..n {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % n]);
    }
    polygon_area(&poly)
}

/// Bird's-eye-view IoU of two yaw-rotated box footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let fa = footprint(a);
    let fb = footprint(b);
    let inter = intersection_area(&fa, &fb);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volume IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let fa = footprint(a);
    let fb = footprint(b);
    let inter_area = intersection_area(&fa, &fb);
    let z_overlap = (a.z + a.h / 2.0).min(b.z + b.h / 2.0) - (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let inter = inter_area * z_overlap.max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
