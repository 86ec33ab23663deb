//! Pinhole camera model with radial-tangential distortion, rigid poses and
//! two-view triangulation.
//!
//! Conventions used throughout the crate:
//!
//! - A [`Pose`] maps world (or reference-camera) coordinates into the camera
//!   frame: `X_cam = R * X_world + t`.
//! - Pixel coordinates put the center of pixel `(col, row)` at `(col, row)`.
//! - Distortion follows the 5-coefficient `[k1, k2, p1, p2, k3]` layout:
//!
//! ```text
//! r² = x² + y²
//! x_d = x (1 + k1 r² + k2 r⁴ + k3 r⁶) + 2 p1 x y + p2 (r² + 2x²)
//! y_d = y (1 + k1 r² + k2 r⁴ + k3 r⁶) + p1 (r² + 2y²) + 2 p2 x y
//! u = fx x_d + cx,  v = fy y_d + cy
//! ```

use nalgebra::{Matrix2, Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3D point in meters. The frame is documented at each use site.
pub type Point3 = Vector3<f64>;

/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-12;

const UNDISTORT_MAX_ITERATIONS: usize = 50;
const TRIANGULATE_MAX_ITERATIONS: usize = 10;
const TRIANGULATE_STEP_TOL: f64 = 1e-10;
const PARALLEL_RAY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth {z:e} in the camera frame")]
    NonPositiveDepth { z: f64 },
    #[error("distortion inversion did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("viewing rays are parallel; the point lies at infinity")]
    DegenerateRays,
    #[error("triangulated point lies behind a camera")]
    BehindCamera,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NonPositiveDepth { .. } => "NonPositiveDepth",
            Self::NoConvergence { .. } => "NoConvergence",
            Self::DegenerateRays => "DegenerateRays",
            Self::BehindCamera => "BehindCamera",
            Self::InvalidIntrinsics(_) => "InvalidIntrinsics",
            Self::InvalidPose(_) => "InvalidPose",
            Self::InvalidRig(_) => "InvalidRig",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pixel {
    pub x: f64,
    pub y: f64,
}

impl Pixel {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn offset(&self, flow: FlowVec) -> Pixel {
        Pixel::new(self.x + flow.dx, self.y + flow.dy)
    }

    /// Displacement from `self` to `target`.
    pub fn flow_to(&self, target: &Pixel) -> FlowVec {
        FlowVec::new(target.x - self.x, target.y - self.y)
    }

    pub fn scaled(&self, s: f64) -> Pixel {
        Pixel::new(self.x * s, self.y * s)
    }
}

/// 2D displacement in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowVec {
    pub dx: f64,
    pub dy: f64,
}

impl FlowVec {
    pub const ZERO: FlowVec = FlowVec { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    /// L2 distance between two flow vectors.
    pub fn distance(&self, other: &FlowVec) -> f64 {
        (self.dx - other.dx).hypot(self.dy - other.dy)
    }

    pub fn scaled(&self, s: f64) -> FlowVec {
        FlowVec::new(self.dx * s, self.dy * s)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

/// Focal lengths and principal point in pixels plus `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub dist: [f64; 5],
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, dist: [f64; 5]) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, dist };
        k.validate()?;
        Ok(k)
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy, dist: [0.0; 5] }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.dist.iter().any(|d| !d.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("distortion must be finite".into()));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.dist.iter().any(|&d| d != 0.0)
    }

    /// Same focal lengths and principal point, distortion removed.
    pub fn without_distortion(&self) -> Self {
        Self { dist: [0.0; 5], ..*self }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Scales the pixel-valued parameters by `s` (image resampling by `s`).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            dist: self.dist,
        }
    }

    /// Applies the distortion polynomial to normalized coordinates.
    pub fn distort_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`Self::distort_normalized`] with respect to `(x, y)`.
    pub fn distort_jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let [k1, k2, p1, p2, k3] = self.dist;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        // d(radial)/d(r2)
        let dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);
        let dxd_dx = radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x;
        let dxd_dy = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyd_dx = 2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y;
        let dyd_dy = radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x;
        Matrix2::new(dxd_dx, dxd_dy, dyd_dx, dyd_dy)
    }

    /// Maps normalized (undistorted) coordinates to a distorted pixel.
    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> Pixel {
        let (xd, yd) = self.distort_normalized(x, y);
        Pixel::new(self.fx * xd + self.cx, self.fy * yd + self.cy)
    }

    /// Inverse of [`Self::normalized_to_pixel`]: removes intrinsics and
    /// inverts the distortion with Newton's method.
    pub fn pixel_to_normalized(&self, pixel: Pixel) -> Result<Vector2<f64>, GeometryError> {
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        if !self.has_distortion() {
            return Ok(Vector2::new(xd, yd));
        }
        let target = Vector2::new(xd, yd);
        let mut est = target;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let (fx, fy) = self.distort_normalized(est.x, est.y);
            let residual = Vector2::new(fx, fy) - target;
            if !residual.iter().all(|v| v.is_finite()) {
                break;
            }
            if residual.norm() <= 1e-15 * (1.0 + target.norm()) {
                return self.on_monotone_branch(est);
            }
            let jac = self.distort_jacobian(est.x, est.y);
            let Some(inv) = jac.try_inverse() else { break };
            let step = inv * residual;
            est -= step;
            if step.norm() <= 1e-16 * (1.0 + est.norm()) {
                let (fx, fy) = self.distort_normalized(est.x, est.y);
                if (Vector2::new(fx, fy) - target).norm() <= 1e-12 {
                    return self.on_monotone_branch(est);
                }
                break;
            }
        }
        Err(GeometryError::NoConvergence { iterations: UNDISTORT_MAX_ITERATIONS })
    }

    /// Rejects roots past the fold of the distortion model, where the image
    /// would be mirrored.
    fn on_monotone_branch(&self, n: Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        let [k1, k2, _, _, k3] = self.dist;
        let r2 = n.norm_squared();
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        if radial > 0.0 && self.distort_jacobian(n.x, n.y).determinant() > 0.0 {
            Ok(n)
        } else {
            Err(GeometryError::NoConvergence { iterations: UNDISTORT_MAX_ITERATIONS })
        }
    }
}

/// Rigid transform mapping reference coordinates into a camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major 3×3.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr { rotation: matrix_to_row_major(&p.rotation), translation: p.translation.into() }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;
    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        Pose::new(matrix_from_row_major(&r.rotation), Vector3::from(r.translation))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("translation must be finite".into()));
        }
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    /// Builds a pose from a rotation vector (axis × angle, radians).
    pub fn from_rotation_vector(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: rotation_from_vector(&rotvec), translation }
    }

    /// Camera looking from `eye` towards `target`, with image-up roughly
    /// along `-up` in camera y (camera y axis points down).
    pub fn look_at(eye: Point3, target: Point3, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("eye coincides with target".into()))?;
        let x = z
            .cross(&(-up))
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("up vector parallel to view".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self { rotation, translation: -(rotation * eye) })
    }

    pub fn transform(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first, then `self`. The rotation is
    /// re-projected onto SO(3).
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: nearest_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in reference coordinates.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        rotation_to_vector(&self.rotation)
    }
}

/// Two calibrated cameras; `relative` maps left-camera coordinates into the
/// right camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub relative: Pose,
    pub image_size: (u32, u32),
}

impl StereoRig {
    pub fn new(
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        relative: Pose,
        image_size: (u32, u32),
    ) -> Result<Self, GeometryError> {
        let rig = Self { left, right, relative, image_size };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.left.validate()?;
        self.right.validate()?;
        check_rotation(&self.relative.rotation)?;
        if !(self.relative.translation.norm() > 0.0) {
            return Err(GeometryError::InvalidRig("baseline must be non-zero".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(GeometryError::InvalidRig("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn baseline(&self) -> f64 {
        self.relative.translation.norm()
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidPose("rotation must be finite".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(GeometryError::InvalidPose(format!(
            "rotation not orthonormal (|RᵀR − I|∞ = {ortho:e}, det = {det})"
        )));
    }
    Ok(())
}

pub fn matrix_to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

pub fn matrix_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

/// Closest rotation matrix in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Rodrigues exponential map.
pub fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// Logarithm of a rotation matrix as axis × angle.
pub fn rotation_to_vector(r: &Matrix3<f64>) -> Vector3<f64> {
    // atan2 form stays finite when rounding pushes the trace past 3.
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let sin = v.norm();
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    if cos < -0.9 {
        return Rotation3::from_matrix_unchecked(nearest_rotation(r)).scaled_axis();
    }
    if sin < 1e-12 {
        return v;
    }
    v * (sin.atan2(cos) / sin)
}

/// Angle of the rotation `a⁻¹ b`, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_to_vector(&(a.transpose() * b)).norm()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Projects a reference-frame point: extrinsics, perspective division,
/// distortion, intrinsics.
pub fn project(intrinsics: &CameraIntrinsics, pose: &Pose, point: &Point3) -> Result<Pixel, GeometryError> {
    let pc = pose.transform(point);
    if !(pc.z > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth { z: pc.z });
    }
    Ok(intrinsics.normalized_to_pixel(pc.x / pc.z, pc.y / pc.z))
}

/// Removes lens distortion from a pixel, keeping focal lengths and principal
/// point.
pub fn undistort(intrinsics: &CameraIntrinsics, pixel: Pixel) -> Result<Pixel, GeometryError> {
    let n = intrinsics.pixel_to_normalized(pixel)?;
    Ok(Pixel::new(intrinsics.fx * n.x + intrinsics.cx, intrinsics.fy * n.y + intrinsics.cy))
}

/// Intersects the viewing rays of two undistorted pixels. The result is in
/// the left camera frame.
///
/// A linear (DLT) solution in normalized coordinates seeds a Gauss-Newton
/// refinement of the pinhole reprojection error in both views.
pub fn triangulate(rig: &StereoRig, left_px: Pixel, right_px: Pixel) -> Result<Point3, GeometryError> {
    let (kl, kr) = (&rig.left, &rig.right);
    let (rot, t) = (&rig.relative.rotation, &rig.relative.translation);

    let nl = Vector3::new((left_px.x - kl.cx) / kl.fx, (left_px.y - kl.cy) / kl.fy, 1.0);
    let nr = Vector3::new((right_px.x - kr.cx) / kr.fx, (right_px.y - kr.cy) / kr.fy, 1.0);

    let dl = nl.normalize();
    let dr = (rot.transpose() * nr).normalize();
    let angle = dl.cross(&dr).norm().atan2(dl.dot(&dr));
    if !(angle.abs() >= PARALLEL_RAY_TOL) {
        return Err(GeometryError::DegenerateRays);
    }

    // Rows of x × (P X) = 0 for P_left = [I | 0] and P_right = [R | t].
    let mut a = Matrix4::<f64>::zeros();
    let p_left = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let p_right = [
        [rot[(0, 0)], rot[(0, 1)], rot[(0, 2)], t.x],
        [rot[(1, 0)], rot[(1, 1)], rot[(1, 2)], t.y],
        [rot[(2, 0)], rot[(2, 1)], rot[(2, 2)], t.z],
    ];
    for c in 0..4 {
        a[(0, c)] = nl.x * p_left[2][c] - p_left[0][c];
        a[(1, c)] = nl.y * p_left[2][c] - p_left[1][c];
        a[(2, c)] = nr.x * p_right[2][c] - p_right[0][c];
        a[(3, c)] = nr.y * p_right[2][c] - p_right[1][c];
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(imin);
    if h[3].abs() < 1e-300 {
        return Err(GeometryError::DegenerateRays);
    }
    let mut x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let kl0 = kl.without_distortion();
    let kr0 = kr.without_distortion();
    let identity = Pose::identity();
    for _ in 0..TRIANGULATE_MAX_ITERATIONS {
        let (Some((rl, jl)), Some((rr, jr))) = (
            pinhole_residual(&kl0, &identity, &x, left_px),
            pinhole_residual(&kr0, &rig.relative, &x, right_px),
        ) else {
            return Err(GeometryError::BehindCamera);
        };
        let jtj = jl.transpose() * jl + jr.transpose() * jr;
        let jtr = jl.transpose() * rl + jr.transpose() * rr;
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        x -= step;
        if step.norm() < TRIANGULATE_STEP_TOL {
            break;
        }
    }

    if x.z <= 0.0 || rig.relative.transform(&x).z <= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    Ok(x)
}

/// Pinhole reprojection residual (predicted − observed) and its Jacobian
/// with respect to the reference-frame point.
fn pinhole_residual(
    k: &CameraIntrinsics,
    pose: &Pose,
    x: &Point3,
    observed: Pixel,
) -> Option<(Vector2<f64>, nalgebra::Matrix2x3<f64>)> {
    let pc = pose.transform(x);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let r = Vector2::new(k.fx * pc.x * iz + k.cx - observed.x, k.fy * pc.y * iz + k.cy - observed.y);
    let d = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    Some((r, d * pose.rotation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k1000() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(1000.0, 1000.0, 960.0, 540.0)
    }

    /// Formula-by-formula reference projector, written independently of
    /// `CameraIntrinsics::distort_normalized`.
    fn reference_project(k: &CameraIntrinsics, pose: &Pose, p: &Point3) -> (f64, f64) {
        let r = pose.rotation;
        let xc = r[(0, 0)] * p.x + r[(0, 1)] * p.y + r[(0, 2)] * p.z + pose.translation.x;
        let yc = r[(1, 0)] * p.x + r[(1, 1)] * p.y + r[(1, 2)] * p.z + pose.translation.y;
        let zc = r[(2, 0)] * p.x + r[(2, 1)] * p.y + r[(2, 2)] * p.z + pose.translation.z;
        let (a, b) = (xc / zc, yc / zc);
        let rr = a.powi(2) + b.powi(2);
        let k_radial = 1.0 + k.dist[0] * rr + k.dist[1] * rr.powi(2) + k.dist[4] * rr.powi(3);
        let xd = a * k_radial + 2.0 * k.dist[2] * a * b + k.dist[3] * (rr + 2.0 * a.powi(2));
        let yd = b * k_radial + k.dist[2] * (rr + 2.0 * b.powi(2)) + 2.0 * k.dist[3] * a * b;
        (k.fx * xd + k.cx, k.fy * yd + k.cy)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let px = project(&k1000(), &Pose::identity(), &Point3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Pixel::new(960.0, 540.0));
    }

    #[test]
    fn off_axis_projection() {
        let px = project(&k1000(), &Pose::identity(), &Point3::new(0.002, 0.0, 2.0)).unwrap();
        assert!((px.x - 961.0).abs() < 1e-12);
        assert_eq!(px.y, 540.0);
    }

    #[test]
    fn projection_rejects_points_behind_camera() {
        let err = project(&k1000(), &Pose::identity(), &Point3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::NonPositiveDepth { .. }));
        let err = project(&k1000(), &Pose::identity(), &Point3::new(1.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, GeometryError::NonPositiveDepth { .. }));
    }

    #[test]
    fn projection_matches_reference_with_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let k = CameraIntrinsics {
                fx: rng.random_range(400.0..2000.0),
                fy: rng.random_range(400.0..2000.0),
                cx: rng.random_range(200.0..1000.0),
                cy: rng.random_range(200.0..1000.0),
                dist: [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.05..0.05),
                ],
            };
            let pose = Pose::from_rotation_vector(
                Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.5..1.0)),
            );
            let p = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.5..3.0));
            let px = project(&k, &pose, &p).unwrap();
            let (u, v) = reference_project(&k, &pose, &p);
            assert!((px.x - u).abs() < 1e-9 && (px.y - v).abs() < 1e-9, "{px:?} vs ({u}, {v})");
        }
    }

    #[test]
    fn undistort_is_identity_without_distortion() {
        let px = Pixel::new(123.25, 987.5);
        assert_eq!(undistort(&k1000(), px).unwrap(), px);
    }

    #[test]
    fn undistort_round_trips_random_pixels() {
        let k = CameraIntrinsics { dist: [-0.1, 0.0, 0.0, 0.0, 0.0], ..k1000() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            // Undistorted pixel within normalized radius < 1.
            let x = rng.random_range(-0.7..0.7);
            let y = rng.random_range(-0.7..0.7);
            let distorted = k.normalized_to_pixel(x, y);
            let und = undistort(&k, distorted).unwrap();
            let back = k.normalized_to_pixel((und.x - k.cx) / k.fx, (und.y - k.cy) / k.fy);
            worst = worst.max(back.distance(&distorted));
            worst = worst.max((und.x - (k.fx * x + k.cx)).hypot(und.y - (k.fy * y + k.cy)));
        }
        assert!(worst < 1e-6, "worst round trip {worst}");
    }

    #[test]
    fn undistort_fails_outside_distortion_range() {
        // r(1 + k1 r²) peaks at r = 1/sqrt(3|k1|); far pixels are unreachable.
        let k = CameraIntrinsics { dist: [-0.5, 0.0, 0.0, 0.0, 0.0], ..k1000() };
        let err = undistort(&k, Pixel::new(960.0 + 5000.0, 540.0 + 5000.0)).unwrap_err();
        assert_eq!(err, GeometryError::NoConvergence { iterations: 50 });
    }

    fn rectified_rig(baseline: f64) -> StereoRig {
        StereoRig::new(
            k1000(),
            k1000(),
            Pose::new(Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0)).unwrap(),
            (1920, 1080),
        )
        .unwrap()
    }

    #[test]
    fn triangulate_rectified_disparity() {
        let p = triangulate(&rectified_rig(0.1), Pixel::new(960.0, 540.0), Pixel::new(910.0, 540.0)).unwrap();
        assert!((p.z - 2.0).abs() < 1e-12, "{p:?}");
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn triangulate_zero_disparity_is_degenerate() {
        let err = triangulate(&rectified_rig(0.1), Pixel::new(700.0, 300.0), Pixel::new(700.0, 300.0)).unwrap_err();
        assert_eq!(err, GeometryError::DegenerateRays);
    }

    #[test]
    fn triangulate_negative_disparity_is_behind() {
        let err = triangulate(&rectified_rig(0.1), Pixel::new(900.0, 300.0), Pixel::new(950.0, 300.0)).unwrap_err();
        assert_eq!(err, GeometryError::BehindCamera);
    }

    #[test]
    fn triangulate_round_trip_random_rigs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let rel = Pose::from_rotation_vector(
                Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                Vector3::new(rng.random_range(-0.3..-0.05), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
            );
            let rig = StereoRig::new(
                CameraIntrinsics::pinhole(rng.random_range(500.0..1500.0), rng.random_range(500.0..1500.0), 640.0, 360.0),
                CameraIntrinsics::pinhole(rng.random_range(500.0..1500.0), rng.random_range(500.0..1500.0), 650.0, 370.0),
                rel,
                (1280, 720),
            )
            .unwrap();
            let p = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..5.0));
            let l = project(&rig.left, &Pose::identity(), &p).unwrap();
            let r = project(&rig.right, &rig.relative, &p).unwrap();
            let q = triangulate(&rig, l, r).unwrap();
            assert!((q - p).norm() < 1e-8, "{q:?} vs {p:?}");
        }
    }

    #[test]
    fn doubling_focal_doubles_offsets() {
        let p = Point3::new(0.13, -0.07, 1.7);
        let k = k1000();
        let k2 = CameraIntrinsics { fx: 2.0 * k.fx, ..k };
        let a = project(&k, &Pose::identity(), &p).unwrap();
        let b = project(&k2, &Pose::identity(), &p).unwrap();
        assert_eq!(b.x - k.cx, 2.0 * (a.x - k.cx));
    }

    #[test]
    fn pose_validation_and_serde() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Pose::new(bad, Vector3::zeros()).is_err());
        let pose = Pose::from_rotation_vector(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let json = serde_json::to_string(&pose).unwrap();
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert_eq!(back, pose);
        let composed = pose.compose(&pose.inverse());
        assert!((composed.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(composed.translation.norm() < 1e-12);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = Pose::look_at(Point3::new(1.0, -0.5, -2.0), Point3::new(0.0, 0.0, 3.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let pc = pose.transform(&Point3::new(0.0, 0.0, 3.0));
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        assert!((pose.center() - Point3::new(1.0, -0.5, -2.0)).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn undistort_round_trip(
                fx in 300.0f64..2000.0, fy in 300.0f64..2000.0,
                k1 in -0.2f64..0.2, k2 in -0.05f64..0.05,
                p1 in -0.005f64..0.005, p2 in -0.005f64..0.005,
                x in -0.6f64..0.6, y in -0.6f64..0.6,
            ) {
                let k = CameraIntrinsics { fx, fy, cx: 640.0, cy: 360.0, dist: [k1, k2, p1, p2, 0.0] };
                let distorted = k.normalized_to_pixel(x, y);
                let und = undistort(&k, distorted).unwrap();
                let again = k.normalized_to_pixel((und.x - k.cx) / k.fx, (und.y - k.cy) / k.fy);
                prop_assert!(again.distance(&distorted) < 1e-6);
            }

            #[test]
            fn projection_is_deterministic(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..10.0) {
                let k = CameraIntrinsics { dist: [-0.05, 0.01, 0.001, -0.001, 0.0], ..k1000() };
                let a = project(&k, &Pose::identity(), &Point3::new(x, y, z)).unwrap();
                let b = project(&k, &Pose::identity(), &Point3::new(x, y, z)).unwrap();
                prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
                prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
            }
        }
    }
}
