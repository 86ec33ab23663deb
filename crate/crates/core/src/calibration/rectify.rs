use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{CalibrationError, CameraSide};
use crate::geometry::{rotation_from_vector, CameraIntrinsics, GeometryError, Pixel, Point3, StereoRig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn is_empty(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
    }
}

/// Rotations taking each camera into a common rectified frame in which the
/// baseline lies along the x axis, plus the shared rectified intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifyMap {
    pub left_rot: Matrix3<f64>,
    pub right_rot: Matrix3<f64>,
    pub new_intrinsics: CameraIntrinsics,
    pub valid_region: PixelRect,
}

impl RectifyMap {
    fn rotation(&self, side: CameraSide) -> &Matrix3<f64> {
        match side {
            CameraSide::Left => &self.left_rot,
            CameraSide::Right => &self.right_rot,
        }
    }

    /// Maps a raw (distorted) pixel of one camera into its rectified image.
    pub fn rectify_pixel(&self, rig: &StereoRig, side: CameraSide, pixel: Pixel) -> Result<Pixel, GeometryError> {
        let k = match side {
            CameraSide::Left => &rig.left,
            CameraSide::Right => &rig.right,
        };
        let n = k.pixel_to_normalized(pixel)?;
        self.project_ray(&(self.rotation(side) * Vector3::new(n.x, n.y, 1.0)))
    }

    /// Rectified-image projection of a point given in the raw left camera
    /// frame.
    pub fn project_point(&self, rig: &StereoRig, side: CameraSide, point: &Point3) -> Result<Pixel, GeometryError> {
        let pc = match side {
            CameraSide::Left => *point,
            CameraSide::Right => rig.relative.transform(point),
        };
        self.project_ray(&(self.rotation(side) * pc))
    }

    fn project_ray(&self, ray: &Vector3<f64>) -> Result<Pixel, GeometryError> {
        if !(ray.z > crate::geometry::MIN_DEPTH) {
            return Err(GeometryError::NonPositiveDepth { z: ray.z });
        }
        let k = &self.new_intrinsics;
        Ok(Pixel::new(k.fx * ray.x / ray.z + k.cx, k.fy * ray.y / ray.z + k.cy))
    }

    /// Right-camera position offset in the rectified frame,
    /// `X_right_rect = X_left_rect + t`, with `t = (tx, 0, 0)`.
    pub fn rectified_translation(&self, rig: &StereoRig) -> Vector3<f64> {
        self.right_rot * rig.relative.translation
    }

    /// Closed-form depth from rectified coordinates (`Z = f·B/d`), returned
    /// in the raw left camera frame. `None` for disparities of the wrong sign
    /// or zero.
    pub fn triangulate_rectified(&self, rig: &StereoRig, left: Pixel, right: Pixel) -> Option<Point3> {
        let k = &self.new_intrinsics;
        let tx = self.rectified_translation(rig).x;
        let d = left.x - right.x;
        let z = -k.fx * tx / d;
        if !(z.is_finite() && z > 0.0) {
            return None;
        }
        let rect = Point3::new((left.x - k.cx) * z / k.fx, (left.y - k.cy) * z / k.fy, z);
        Some(self.left_rot.transpose() * rect)
    }
}

/// Splits the relative rotation evenly between the two cameras, then rotates
/// both so that the baseline becomes the rectified x axis.
pub fn rectify(rig: &StereoRig) -> Result<RectifyMap, CalibrationError> {
    let t = rig.relative.translation;
    if !(t.norm() >= 1e-9) {
        return Err(CalibrationError::DegenerateBaseline(t.norm()));
    }
    let w = rig.relative.rotation_vector();
    let half_left = rotation_from_vector(&(w * 0.5));
    let half_right = rotation_from_vector(&(w * -0.5));

    let t_half = half_right * t;
    let sign = if t_half.x < 0.0 { -1.0 } else { 1.0 };
    let e1 = t_half.normalize() * sign;
    let e2_raw = Vector3::new(-e1.y, e1.x, 0.0);
    if e2_raw.norm() < 1e-9 {
        // Baseline along the optical axis: epipoles inside the image.
        return Err(CalibrationError::DegenerateBaseline(t.norm()));
    }
    let e2 = e2_raw.normalize();
    let e3 = e1.cross(&e2);
    let align = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);

    let left_rot = align * half_left;
    let right_rot = align * half_right;

    let (w_px, h_px) = (rig.image_size.0 as f64, rig.image_size.1 as f64);
    let f = (rig.left.fx + rig.left.fy + rig.right.fx + rig.right.fy) / 4.0;
    let new_intrinsics = CameraIntrinsics::pinhole(f, f, w_px / 2.0, h_px / 2.0);

    let mut map = RectifyMap {
        left_rot,
        right_rot,
        new_intrinsics,
        valid_region: PixelRect { x0: 0.0, y0: 0.0, x1: w_px, y1: h_px },
    };
    map.valid_region = valid_region(&map, rig);
    Ok(map)
}

/// Largest axis-aligned rectangle (approximately) inside both rectified
/// images, found by mapping sampled border pixels.
fn valid_region(map: &RectifyMap, rig: &StereoRig) -> PixelRect {
    const SAMPLES: usize = 32;
    let (w, h) = (rig.image_size.0 as f64, rig.image_size.1 as f64);
    let mut rect = PixelRect { x0: 0.0, y0: 0.0, x1: w, y1: h };
    for side in [CameraSide::Left, CameraSide::Right] {
        for i in 0..=SAMPLES {
            let s = i as f64 / SAMPLES as f64;
            let edges = [
                (Pixel::new(0.0, s * h), 0),
                (Pixel::new(w, s * h), 1),
                (Pixel::new(s * w, 0.0), 2),
                (Pixel::new(s * w, h), 3),
            ];
            for (p, edge) in edges {
                let Ok(q) = map.rectify_pixel(rig, side, p) else { continue };
                match edge {
                    0 => rect.x0 = rect.x0.max(q.x),
                    1 => rect.x1 = rect.x1.min(q.x),
                    2 => rect.y0 = rect.y0.max(q.y),
                    _ => rect.y1 = rect.y1.min(q.y),
                }
            }
        }
    }
    rect
}

/// Mean |y_left − y_right| over rectified correspondences.
pub fn residual_y_disparity(rectified_pairs: &[(Pixel, Pixel)]) -> Result<f64, CalibrationError> {
    if rectified_pairs.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let sum: f64 = rectified_pairs.iter().map(|(l, r)| (l.y - r.y).abs()).sum();
    Ok(sum / rectified_pairs.len() as f64)
}

/// Rectified y-disparity threshold for stereo correspondences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityGate {
    pub threshold: f64,
}

impl Default for QualityGate {
    fn default() -> Self {
        Self { threshold: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub mean_y_disparity: f64,
    pub kept: usize,
    pub dropped: usize,
    /// Scene-level verdict: the mean residual is within the threshold.
    pub passed: bool,
}

impl QualityGate {
    pub fn accepts(&self, left: &Pixel, right: &Pixel) -> bool {
        (left.y - right.y).abs() <= self.threshold
    }

    pub fn evaluate(&self, rectified_pairs: &[(Pixel, Pixel)]) -> Result<GateReport, CalibrationError> {
        let mean = residual_y_disparity(rectified_pairs)?;
        let kept = rectified_pairs.iter().filter(|(l, r)| self.accepts(l, r)).count();
        Ok(GateReport {
            mean_y_disparity: mean,
            kept,
            dropped: rectified_pairs.len() - kept,
            passed: mean <= self.threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig_with(rot: Matrix3<f64>, t: Vector3<f64>) -> StereoRig {
        StereoRig {
            left: CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0),
            right: CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0),
            relative: Pose { rotation: rot, translation: t },
            image_size: (1920, 1080),
        }
    }

    #[test]
    fn rectified_rig_is_fixed_point() {
        for t in [Vector3::new(0.1, 0.0, 0.0), Vector3::new(-0.1, 0.0, 0.0)] {
            let map = rectify(&rig_with(Matrix3::identity(), t)).unwrap();
            assert!((map.left_rot - Matrix3::identity()).abs().max() < 1e-15);
            assert!((map.right_rot - Matrix3::identity()).abs().max() < 1e-15);
        }
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let err = rectify(&rig_with(Matrix3::identity(), Vector3::zeros())).unwrap_err();
        assert!(matches!(err, CalibrationError::DegenerateBaseline(_)));
    }

    #[test]
    fn rotated_rig_rectifies_rows() {
        let rot = rotation_from_vector(&Vector3::new(0.0, 5f64.to_radians(), 0.0));
        let mut rig = rig_with(rot, Vector3::new(-0.12, 0.004, 0.003));
        rig.left.dist = [-0.08, 0.01, 0.0005, -0.0003, 0.0];
        rig.right.dist = [-0.06, 0.0, 0.0, 0.0, 0.0];
        let map = rectify(&rig).unwrap();
        for r in [map.left_rot, map.right_rot] {
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pairs = Vec::new();
        for _ in 0..200 {
            let p = Point3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(1.0..4.0));
            let l = project(&rig.left, &Pose::identity(), &p).unwrap();
            let r = project(&rig.right, &rig.relative, &p).unwrap();
            let lr = map.rectify_pixel(&rig, CameraSide::Left, l).unwrap();
            let rr = map.rectify_pixel(&rig, CameraSide::Right, r).unwrap();
            pairs.push((lr, rr));
            let q = map.triangulate_rectified(&rig, lr, rr).unwrap();
            assert!((q - p).norm() < 1e-8 * p.z.max(1.0));
        }
        assert!(residual_y_disparity(&pairs).unwrap() < 1e-6);
        assert!(!map.valid_region.is_empty());
    }

    #[test]
    fn y_disparity_mean() {
        let pairs: Vec<_> = [0.2, 0.4, 0.6]
            .iter()
            .map(|dy| (Pixel::new(10.0, 5.0), Pixel::new(3.0, 5.0 + dy)))
            .collect();
        assert!((residual_y_disparity(&pairs).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(residual_y_disparity(&[]), Err(CalibrationError::EmptyInput)));
    }

    #[test]
    fn gate_default_threshold() {
        let gate = QualityGate::default();
        assert_eq!(gate.threshold, 0.75);
        assert!(gate.accepts(&Pixel::new(1000.0, 500.0), &Pixel::new(940.0, 500.1)));
        assert!(!gate.accepts(&Pixel::new(1000.0, 500.0), &Pixel::new(940.0, 502.0)));
    }
}
