//! Oriented-box and camera geometry: corners, containment, rotated IoU and
//! pinhole projection. Everything here is a pure function of its inputs.

mod camera;
mod iou;

pub use camera::{CameraModel, Projection};
pub use iou::{iou_3d, iou_bev};

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("box extent `{0}` must be positive")]
    NonPositiveExtent(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expand ratio {0} must be >= 1")]
    BadExpandRatio(f64),
    #[error("minimum circumscribed rectangle needs at least one point")]
    EmptyPointSet,
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(&'static str),
    #[error("invalid extrinsics: {0}")]
    BadExtrinsics(&'static str),
    #[error("rectangle bounds out of order")]
    BadRect,
}

/// Wrap an angle to (-pi, pi]. Exact no-op on angles already in range, so
/// wrapping is idempotent at the bit level.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// 3D point with optional extra channels (reflectivity etc.).
#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub extras: Vec<f64>,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3D {
            x,
            y,
            z,
            extras: Vec::new(),
        }
    }

    pub fn with_extras(x: f64, y: f64, z: f64, extras: Vec<f64>) -> Self {
        Point3D { x, y, z, extras }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.extras.iter().all(|v| v.is_finite())
    }
}

/// Oriented 3D box: center (x, y, z), extents (l along heading, h vertical,
/// w lateral) and yaw about the vertical axis, counterclockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub h: f64,
    pub w: f64,
    pub theta: f64,
}

/// Corner sign pattern in the box frame, fixed order: top face (+h/2) then
/// bottom face (-h/2), each counterclockwise starting at (+l/2, +w/2).
pub const CORNER_SIGNS: [(f64, f64, f64); 8] = [
    (1.0, 1.0, 1.0),
    (-1.0, 1.0, 1.0),
    (-1.0, -1.0, 1.0),
    (1.0, -1.0, 1.0),
    (1.0, 1.0, -1.0),
    (-1.0, 1.0, -1.0),
    (-1.0, -1.0, -1.0),
    (1.0, -1.0, -1.0),
];

impl Box3D {
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        l: f64,
        h: f64,
        w: f64,
        theta: f64,
    ) -> Result<Self, GeometryError> {
        for (v, name) in [
            (x, "x"),
            (y, "y"),
            (z, "z"),
            (l, "l"),
            (h, "h"),
            (w, "w"),
            (theta, "theta"),
        ] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(name));
            }
        }
        if l <= 0.0 {
            return Err(GeometryError::NonPositiveExtent("l"));
        }
        if h <= 0.0 {
            return Err(GeometryError::NonPositiveExtent("h"));
        }
        if w <= 0.0 {
            return Err(GeometryError::NonPositiveExtent("w"));
        }
        Ok(Box3D {
            x,
            y,
            z,
            l,
            h,
            w,
            theta: wrap_angle(theta),
        })
    }

    /// The 8 corners in world coordinates, in [`CORNER_SIGNS`] order.
    pub fn corners(&self) -> [Point3D; 8] {
        let (sin, cos) = self.theta.sin_cos();
        CORNER_SIGNS.map(|(sx, sy, sz)| {
            let dx = sx * self.l / 2.0;
            let dy = sy * self.w / 2.0;
            let dz = sz * self.h / 2.0;
            Point3D::new(
                self.x + cos * dx - sin * dy,
                self.y + sin * dx + cos * dy,
                self.z + dz,
            )
        })
    }

    /// Same center and heading, every extent multiplied by `k` (k >= 1).
    pub fn expand(&self, k: f64) -> Result<Box3D, GeometryError> {
        if !k.is_finite() || k < 1.0 {
            return Err(GeometryError::BadExpandRatio(k));
        }
        Ok(Box3D {
            l: self.l * k,
            h: self.h * k,
            w: self.w * k,
            ..*self
        })
    }

    pub fn volume(&self) -> f64 {
        self.l * self.h * self.w
    }

    /// BEV distance of the box center from the origin.
    pub fn bev_range(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    /// Coordinates of `p` in this box's center-origin, yaw-aligned frame.
    pub fn world_to_box_frame(&self, p: &Point3D) -> Point3D {
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        let (sin, cos) = self.theta.sin_cos();
        Point3D::new(cos * dx + sin * dy, -sin * dx + cos * dy, p.z - self.z)
    }

    /// Inverse of [`Self::world_to_box_frame`].
    pub fn box_frame_to_world(&self, p: &Point3D) -> Point3D {
        let (sin, cos) = self.theta.sin_cos();
        Point3D::new(
            self.x + cos * p.x - sin * p.y,
            self.y + sin * p.x + cos * p.y,
            self.z + p.z,
        )
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &Point3D) -> bool {
        let local = self.world_to_box_frame(p);
        local.x.abs() <= self.l / 2.0
            && local.y.abs() <= self.w / 2.0
            && local.z.abs() <= self.h / 2.0
    }
}

/// Indices of the points inside `bbox` (boundary inclusive).
pub fn points_in_box(points: &[Point3D], bbox: &Box3D) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| bbox.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// Continuous axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite("rect"));
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::BadRect);
        }
        Ok(Rect2D {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x_min && u <= self.x_max && v >= self.y_min && v <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Axis-aligned bounding rectangle of a non-empty point set.
pub fn min_circumscribed_rect(points: &[(f64, f64)]) -> Result<Rect2D, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &(u, v) in points {
        x_min = x_min.min(u);
        y_min = y_min.min(v);
        x_max = x_max.max(u);
        y_max = y_max.max(v);
    }
    Rect2D::new(x_min, y_min, x_max, y_max)
}
