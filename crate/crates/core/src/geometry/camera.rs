use super::{GeometryError, Point3D};

/// Pinhole camera: 3x3 intrinsics (pixel units) and a 4x4 world-to-camera
/// transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

/// Result of projecting one world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// True iff the point lies in front of the camera (depth > 0); (u, v)
    /// are reported regardless, clamping is the consumer's job.
    pub valid: bool,
}

impl CameraModel {
    /// Validated constructor: positive focal entries, zero lower triangle,
    /// orthonormal rotation with det = +1.
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if intrinsics.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::BadIntrinsics("non-finite entry"));
        }
        if intrinsics[0][0] <= 0.0 || intrinsics[1][1] <= 0.0 {
            return Err(GeometryError::BadIntrinsics(
                "focal entries must be positive",
            ));
        }
        if intrinsics[1][0] != 0.0 || intrinsics[2][0] != 0.0 || intrinsics[2][1] != 0.0 {
            return Err(GeometryError::BadIntrinsics("lower triangle must be zero"));
        }
        if extrinsics.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::BadExtrinsics("non-finite entry"));
        }
        let cam = CameraModel {
            intrinsics,
            extrinsics,
            width,
            height,
        };
        let r = cam.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(GeometryError::BadExtrinsics("rotation not orthonormal"));
                }
            }
        }
        if (det3(&r) - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadExtrinsics("rotation determinant not +1"));
        }
        Ok(cam)
    }

    /// Constructor without the rigidity checks. Augmentation composes world
    /// transforms into the extrinsics, and mirrored (det = -1) or scaled
    /// frames are legitimate there; projection math is unaffected.
    pub fn from_parts_unchecked(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Self {
        CameraModel {
            intrinsics,
            extrinsics,
            width,
            height,
        }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    /// Standard pinhole projection of one world point.
    pub fn project(&self, p: &Point3D) -> Projection {
        let e = &self.extrinsics;
        let cx = e[0][0] * p.x + e[0][1] * p.y + e[0][2] * p.z + e[0][3];
        let cy = e[1][0] * p.x + e[1][1] * p.y + e[1][2] * p.z + e[1][3];
        let cz = e[2][0] * p.x + e[2][1] * p.y + e[2][2] * p.z + e[2][3];
        let k = &self.intrinsics;
        let hu = k[0][0] * cx + k[0][1] * cy + k[0][2] * cz;
        let hv = k[1][1] * cy + k[1][2] * cz;
        let hw = k[2][2] * cz;
        Projection {
            u: hu / hw,
            v: hv / hw,
            depth: cz,
            valid: cz > 0.0,
        }
    }

    pub fn project_points(&self, points: &[Point3D]) -> Vec<Projection> {
        points.iter().map(|p| self.project(p)).collect()
    }

    /// Replace the extrinsics with `extrinsics @ inverse_world`, so that
    /// projecting transformed world points reproduces the original pixels.
    pub fn compose_world_inverse(&self, inverse_world: &[[f64; 4]; 4]) -> CameraModel {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..4)
                    .map(|k| self.extrinsics[i][k] * inverse_world[k][j])
                    .sum();
            }
        }
        CameraModel {
            intrinsics: self.intrinsics,
            extrinsics: out,
            width: self.width,
            height: self.height,
        }
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn simple_camera() -> CameraModel {
        // Camera at origin looking down +x: camera z = world x, camera x =
        // -world y, camera y = -world z.
        let intrinsics = [[100.0, 0.0, 64.0], [0.0, 100.0, 48.0], [0.0, 0.0, 1.0]];
        let extrinsics = [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraModel::new(intrinsics, extrinsics, 128, 96).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = simple_camera();
        let p = cam.project(&Point3D::new(7.5, 0.0, 0.0));
        assert!((p.u - 64.0).abs() < 1e-12);
        assert!((p.v - 48.0).abs() < 1e-12);
        assert!((p.depth - 7.5).abs() < 1e-12);
        assert!(p.valid);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let cam = simple_camera();
        let p = cam.project(&Point3D::new(-3.0, 0.5, 0.2));
        assert!(!p.valid);
        assert!(p.depth < 0.0);
    }

    #[test]
    fn rejects_bad_calibration() {
        let good = simple_camera();
        let mut k = good.intrinsics;
        k[0][0] = -1.0;
        assert!(CameraModel::new(k, good.extrinsics, 128, 96).is_err());
        let mut e = good.extrinsics;
        e[0][0] = 0.5; // breaks orthonormality
        assert!(CameraModel::new(good.intrinsics, e, 128, 96).is_err());
    }
}
