//! Chessboard calibration of single cameras and stereo rigs, plus
//! rectification and the rectified y-disparity quality gate.
//!
//! Single-camera calibration follows the classical planar pipeline: one
//! normalized-DLT homography per view, zero-skew intrinsics from the
//! absolute-conic constraints, per-view poses from the homographies, and a
//! joint Levenberg–Marquardt refinement of intrinsics, distortion and all
//! board poses. Stereo calibration starts from per-camera board poses,
//! averages the per-view relative transforms, then refines the relative pose
//! and the board poses jointly over both cameras' reprojection errors.

mod homography;
pub mod lm;
mod rectify;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    nearest_rotation, rotation_from_vector, skew, CameraIntrinsics, GeometryError, Pixel, Point3, Pose, StereoRig,
    MIN_DEPTH,
};
pub use homography::estimate_homography;
use lm::{LeastSquares, LmConfig, LmReport};
pub use rectify::{rectify, residual_y_disparity, GateReport, PixelRect, QualityGate, RectifyMap};

pub const MIN_VIEWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("need at least {need} views, got {got}")]
    InsufficientViews { got: usize, need: usize },
    #[error("singular initialization: {0}")]
    SingularInitialization(String),
    #[error("optimizer exceeded {iterations} iterations without reducing the cost")]
    NoConvergence { iterations: usize },
    #[error("left and right observations do not pair up: {0}")]
    MismatchedPairs(String),
    #[error("stereo baseline is degenerate (‖t‖ = {0:e})")]
    DegenerateBaseline(f64),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl CalibrationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InsufficientViews { .. } => "InsufficientViews",
            Self::SingularInitialization(_) => "SingularInitialization",
            Self::NoConvergence { .. } => "NoConvergence",
            Self::MismatchedPairs(_) => "MismatchedPairs",
            Self::DegenerateBaseline(_) => "DegenerateBaseline",
            Self::InvalidObservation(_) => "InvalidObservation",
            Self::EmptyInput => "EmptyInput",
            Self::Geometry(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraSide {
    Left,
    Right,
}

/// Inner-corner grid of a chessboard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    /// Square edge length in meters.
    pub square_size: f64,
}

impl BoardSpec {
    pub fn corner_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Board-frame coordinates (z = 0) of corner `index`, row-major.
    pub fn corner_point(&self, index: usize) -> Point3 {
        let (r, c) = (index / self.cols, index % self.cols);
        Point3::new(c as f64 * self.square_size, r as f64 * self.square_size, 0.0)
    }

    pub fn points(&self) -> Vec<Point3> {
        (0..self.corner_count()).map(|i| self.corner_point(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChessboardObservation {
    pub view_id: String,
    pub camera: CameraSide,
    pub board: BoardSpec,
    /// Inner corners, row-major.
    pub corners: Vec<Pixel>,
}

impl ChessboardObservation {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let b = &self.board;
        if b.rows < 3 || b.cols < 3 {
            return Err(CalibrationError::InvalidObservation(format!(
                "view {}: board must have at least 3×3 inner corners",
                self.view_id
            )));
        }
        if !(b.square_size > 0.0 && b.square_size.is_finite()) {
            return Err(CalibrationError::InvalidObservation(format!(
                "view {}: square size must be positive",
                self.view_id
            )));
        }
        if self.corners.len() != b.corner_count() {
            return Err(CalibrationError::InvalidObservation(format!(
                "view {}: expected {} corners, got {}",
                self.view_id,
                b.corner_count(),
                self.corners.len()
            )));
        }
        if self.corners.iter().any(|c| !c.is_finite()) {
            return Err(CalibrationError::InvalidObservation(format!("view {}: non-finite corner", self.view_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleCalibration {
    pub intrinsics: CameraIntrinsics,
    /// Board → camera pose per input view, in input order.
    pub poses: Vec<Pose>,
    /// Root-mean-square of the reprojection residual components (pixels).
    pub rms_error: f64,
    pub report: LmReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoCalibration {
    pub rig: StereoRig,
    /// Board → left-camera pose per view, in input order.
    pub board_poses: Vec<Pose>,
    pub rms_error: f64,
    pub report: LmReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StereoOptions {
    /// Also refine both cameras' intrinsics during the joint solve.
    pub refine_intrinsics: bool,
    pub lm: LmConfig,
}

const N_INTR: usize = 9;

fn intr_to_array(k: &CameraIntrinsics) -> [f64; N_INTR] {
    [k.fx, k.fy, k.cx, k.cy, k.dist[0], k.dist[1], k.dist[2], k.dist[3], k.dist[4]]
}

fn intr_from_array(a: &[f64; N_INTR]) -> CameraIntrinsics {
    CameraIntrinsics { fx: a[0], fy: a[1], cx: a[2], cy: a[3], dist: [a[4], a[5], a[6], a[7], a[8]] }
}

/// Projection of a camera-frame point with Jacobians with respect to the
/// point and to `[fx, fy, cx, cy, k1, k2, p1, p2, k3]`.
fn project_camera_frame(k: &CameraIntrinsics, pc: &Point3) -> Option<(Vector2<f64>, Matrix2x3<f64>, SMatrix<f64, 2, N_INTR>)> {
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let (x, y) = (pc.x * iz, pc.y * iz);
    let (xd, yd) = k.distort_normalized(x, y);
    let uv = Vector2::new(k.fx * xd + k.cx, k.fy * yd + k.cy);

    let jd = k.distort_jacobian(x, y);
    let dn = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
    let d_point = nalgebra::Matrix2::new(k.fx, 0.0, 0.0, k.fy) * jd * dn;

    let r2 = x * x + y * y;
    let (r4, r6) = (r2 * r2, r2 * r2 * r2);
    let mut d_intr = SMatrix::<f64, 2, N_INTR>::zeros();
    d_intr[(0, 0)] = xd;
    d_intr[(1, 1)] = yd;
    d_intr[(0, 2)] = 1.0;
    d_intr[(1, 3)] = 1.0;
    let dx = [x * r2, x * r4, 2.0 * x * y, r2 + 2.0 * x * x, x * r6];
    let dy = [y * r2, y * r4, r2 + 2.0 * y * y, 2.0 * x * y, y * r6];
    for i in 0..5 {
        d_intr[(0, 4 + i)] = k.fx * dx[i];
        d_intr[(1, 4 + i)] = k.fy * dy[i];
    }
    Some((uv, d_point, d_intr))
}

/// Left-multiplicative pose update `R ← exp(δω) R`, `t ← t + δt`.
fn retract_pose(pose: &Pose, delta: &[f64]) -> Pose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    Pose {
        rotation: nearest_rotation(&(rotation_from_vector(&w) * pose.rotation)),
        translation: pose.translation + dt,
    }
}

/// Derivative of `R X + t` with respect to the left-multiplicative update,
/// evaluated at `rx = R X`.
fn pose_point_jacobian(rx: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(rx)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

/// Large finite residual for points that fall behind the camera, so the
/// optimizer rejects the step.
const BEHIND_PENALTY: f64 = 1e6;

fn rms(r: &DVector<f64>) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        (r.norm_squared() / r.len() as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// single camera

struct SingleProblem<'a> {
    views: Vec<(&'a [Pixel], Vec<Point3>)>,
}

#[derive(Clone)]
struct SingleState {
    intr: [f64; N_INTR],
    poses: Vec<Pose>,
}

impl SingleProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.views.iter().map(|(c, _)| 2 * c.len()).sum()
    }
}

impl LeastSquares for SingleProblem<'_> {
    type State = SingleState;

    fn residuals(&self, s: &SingleState) -> DVector<f64> {
        let k = intr_from_array(&s.intr);
        let mut r = DVector::zeros(self.n_residuals());
        let mut row = 0;
        for ((obs, pts), pose) in self.views.iter().zip(&s.poses) {
            for (o, p) in obs.iter().zip(pts) {
                match project_camera_frame(&k, &pose.transform(p)) {
                    Some((uv, _, _)) => {
                        r[row] = uv.x - o.x;
                        r[row + 1] = uv.y - o.y;
                    }
                    None => {
                        r[row] = BEHIND_PENALTY;
                        r[row + 1] = BEHIND_PENALTY;
                    }
                }
                row += 2;
            }
        }
        r
    }

    fn jacobian(&self, s: &SingleState) -> DMatrix<f64> {
        let k = intr_from_array(&s.intr);
        let n_params = N_INTR + 6 * self.views.len();
        let mut j = DMatrix::zeros(self.n_residuals(), n_params);
        let mut row = 0;
        for (v, ((obs, pts), pose)) in self.views.iter().zip(&s.poses).enumerate() {
            let col = N_INTR + 6 * v;
            for (_, p) in obs.iter().zip(pts) {
                let rx = pose.rotation * p;
                if let Some((_, d_point, d_intr)) = project_camera_frame(&k, &(rx + pose.translation)) {
                    j.view_mut((row, 0), (2, N_INTR)).copy_from(&d_intr);
                    j.view_mut((row, col), (2, 6)).copy_from(&(d_point * pose_point_jacobian(&rx)));
                }
                row += 2;
            }
        }
        j
    }

    fn apply(&self, s: &SingleState, delta: &DVector<f64>) -> SingleState {
        let mut intr = s.intr;
        for (i, v) in intr.iter_mut().enumerate() {
            *v += delta[i];
        }
        let poses = s
            .poses
            .iter()
            .enumerate()
            .map(|(v, p)| retract_pose(p, &delta.as_slice()[N_INTR + 6 * v..N_INTR + 6 * v + 6]))
            .collect();
        SingleState { intr, poses }
    }
}

fn board_xy(board: &BoardSpec) -> Vec<Vector2<f64>> {
    board.points().iter().map(|p| Vector2::new(p.x, p.y)).collect()
}

/// Calibrates one camera from ≥ 3 chessboard views.
///
/// Views are processed in `view_id` order internally, so the result does not
/// depend on the order of `observations`.
pub fn calibrate_single(observations: &[ChessboardObservation]) -> Result<SingleCalibration, CalibrationError> {
    calibrate_single_with(observations, &LmConfig::default())
}

pub fn calibrate_single_with(
    observations: &[ChessboardObservation],
    config: &LmConfig,
) -> Result<SingleCalibration, CalibrationError> {
    if observations.len() < MIN_VIEWS {
        return Err(CalibrationError::InsufficientViews { got: observations.len(), need: MIN_VIEWS });
    }
    for o in observations {
        o.validate()?;
    }
    let order = canonical_order(observations);

    let all_pixels: Vec<Vector2<f64>> = order
        .iter()
        .flat_map(|&i| observations[i].corners.iter().map(|c| Vector2::new(c.x, c.y)))
        .collect();
    let mut homographies = Vec::with_capacity(order.len());
    for &i in &order {
        let o = &observations[i];
        let dst: Vec<_> = o.corners.iter().map(|c| Vector2::new(c.x, c.y)).collect();
        homographies.push(estimate_homography(&board_xy(&o.board), &dst)?);
    }
    let norm = homography::pixel_normalizer(&all_pixels);
    let k0 = homography::intrinsics_from_homographies(&homographies, &norm)?;
    let kmat = k0.matrix();
    let poses = homographies
        .iter()
        .map(|h| homography::pose_from_homography(&kmat, h))
        .collect::<Result<Vec<_>, _>>()?;

    let problem = SingleProblem {
        views: order
            .iter()
            .map(|&i| (observations[i].corners.as_slice(), observations[i].board.points()))
            .collect(),
    };
    let init = SingleState { intr: intr_to_array(&k0), poses };
    let (state, report) = lm::minimize(&problem, init, config);
    if !report.converged && report.final_cost >= report.initial_cost {
        return Err(CalibrationError::NoConvergence { iterations: report.iterations });
    }
    let intrinsics = intr_from_array(&state.intr);
    intrinsics.validate()?;
    let rms_error = rms(&problem.residuals(&state));

    let mut poses = vec![Pose::identity(); observations.len()];
    for (slot, &i) in order.iter().enumerate() {
        poses[i] = state.poses[slot];
    }
    Ok(SingleCalibration { intrinsics, poses, rms_error, report })
}

/// Sort key making the solve independent of input order: view id, then the
/// corner coordinates bitwise.
fn canonical_order(observations: &[ChessboardObservation]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..observations.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&observations[a], &observations[b]);
        oa.view_id.cmp(&ob.view_id).then_with(|| {
            let ka = oa.corners.iter().flat_map(|c| [c.x.to_bits(), c.y.to_bits()]);
            let kb = ob.corners.iter().flat_map(|c| [c.x.to_bits(), c.y.to_bits()]);
            ka.cmp(kb)
        })
    });
    order
}

// ---------------------------------------------------------------------------
// board pose with known intrinsics

struct PoseProblem<'a> {
    k: &'a CameraIntrinsics,
    obs: &'a [Pixel],
    pts: Vec<Point3>,
}

impl LeastSquares for PoseProblem<'_> {
    type State = Pose;

    fn residuals(&self, pose: &Pose) -> DVector<f64> {
        let mut r = DVector::zeros(2 * self.obs.len());
        for (i, (o, p)) in self.obs.iter().zip(&self.pts).enumerate() {
            let (a, b) = match project_camera_frame(self.k, &pose.transform(p)) {
                Some((uv, _, _)) => (uv.x - o.x, uv.y - o.y),
                None => (BEHIND_PENALTY, BEHIND_PENALTY),
            };
            r[2 * i] = a;
            r[2 * i + 1] = b;
        }
        r
    }

    fn jacobian(&self, pose: &Pose) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.obs.len(), 6);
        for (i, p) in self.pts.iter().enumerate() {
            let rx = pose.rotation * p;
            if let Some((_, d_point, _)) = project_camera_frame(self.k, &(rx + pose.translation)) {
                j.view_mut((2 * i, 0), (2, 6)).copy_from(&(d_point * pose_point_jacobian(&rx)));
            }
        }
        j
    }

    fn apply(&self, pose: &Pose, delta: &DVector<f64>) -> Pose {
        retract_pose(pose, delta.as_slice())
    }
}

/// Board → camera pose for a view, given the camera's intrinsics.
pub fn estimate_board_pose(k: &CameraIntrinsics, obs: &ChessboardObservation) -> Result<Pose, CalibrationError> {
    obs.validate()?;
    let normalized = obs
        .corners
        .iter()
        .map(|c| k.pixel_to_normalized(*c))
        .collect::<Result<Vec<_>, _>>()?;
    let h = estimate_homography(&board_xy(&obs.board), &normalized)?;
    let init = homography::pose_from_homography(&Matrix3::identity(), &h)?;
    let problem = PoseProblem { k, obs: &obs.corners, pts: obs.board.points() };
    let (pose, _) = lm::minimize(&problem, init, &LmConfig::default());
    Ok(pose)
}

// ---------------------------------------------------------------------------
// stereo

struct StereoProblem<'a> {
    views: Vec<(&'a [Pixel], &'a [Pixel], Vec<Point3>)>,
    refine_intrinsics: bool,
}

#[derive(Clone)]
struct StereoState {
    left: [f64; N_INTR],
    right: [f64; N_INTR],
    relative: Pose,
    boards: Vec<Pose>,
}

impl StereoProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.views.iter().map(|(l, r, _)| 2 * (l.len() + r.len())).sum()
    }

    fn n_intr(&self) -> usize {
        if self.refine_intrinsics {
            2 * N_INTR
        } else {
            0
        }
    }
}

impl LeastSquares for StereoProblem<'_> {
    type State = StereoState;

    fn residuals(&self, s: &StereoState) -> DVector<f64> {
        let (kl, kr) = (intr_from_array(&s.left), intr_from_array(&s.right));
        let mut r = DVector::zeros(self.n_residuals());
        let mut row = 0;
        for ((lo, ro, pts), board) in self.views.iter().zip(&s.boards) {
            for (cam, obs) in [(0, lo), (1, ro)] {
                for (o, p) in obs.iter().zip(pts) {
                    let pl = board.transform(p);
                    let (k, pc) = if cam == 0 { (&kl, pl) } else { (&kr, s.relative.transform(&pl)) };
                    let (a, b) = match project_camera_frame(k, &pc) {
                        Some((uv, _, _)) => (uv.x - o.x, uv.y - o.y),
                        None => (BEHIND_PENALTY, BEHIND_PENALTY),
                    };
                    r[row] = a;
                    r[row + 1] = b;
                    row += 2;
                }
            }
        }
        r
    }

    fn jacobian(&self, s: &StereoState) -> DMatrix<f64> {
        let (kl, kr) = (intr_from_array(&s.left), intr_from_array(&s.right));
        let ni = self.n_intr();
        let n_params = ni + 6 + 6 * self.views.len();
        let mut j = DMatrix::zeros(self.n_residuals(), n_params);
        let mut row = 0;
        for (v, ((lo, ro, pts), board)) in self.views.iter().zip(&s.boards).enumerate() {
            let bcol = ni + 6 + 6 * v;
            for (cam, obs) in [(0, lo), (1, ro)] {
                for (_, p) in obs.iter().zip(pts) {
                    let rx = board.rotation * p;
                    let pl = rx + board.translation;
                    let d_board_left = pose_point_jacobian(&rx);
                    if cam == 0 {
                        if let Some((_, d_point, d_intr)) = project_camera_frame(&kl, &pl) {
                            if self.refine_intrinsics {
                                j.view_mut((row, 0), (2, N_INTR)).copy_from(&d_intr);
                            }
                            j.view_mut((row, bcol), (2, 6)).copy_from(&(d_point * d_board_left));
                        }
                    } else {
                        let rpl = s.relative.rotation * pl;
                        if let Some((_, d_point, d_intr)) = project_camera_frame(&kr, &(rpl + s.relative.translation)) {
                            if self.refine_intrinsics {
                                j.view_mut((row, N_INTR), (2, N_INTR)).copy_from(&d_intr);
                            }
                            j.view_mut((row, ni), (2, 6)).copy_from(&(d_point * pose_point_jacobian(&rpl)));
                            j.view_mut((row, bcol), (2, 6))
                                .copy_from(&(d_point * s.relative.rotation * d_board_left));
                        }
                    }
                    row += 2;
                }
            }
        }
        j
    }

    fn apply(&self, s: &StereoState, delta: &DVector<f64>) -> StereoState {
        let d = delta.as_slice();
        let ni = self.n_intr();
        let (mut left, mut right) = (s.left, s.right);
        if self.refine_intrinsics {
            for i in 0..N_INTR {
                left[i] += d[i];
                right[i] += d[N_INTR + i];
            }
        }
        StereoState {
            left,
            right,
            relative: retract_pose(&s.relative, &d[ni..ni + 6]),
            boards: s
                .boards
                .iter()
                .enumerate()
                .map(|(v, b)| retract_pose(b, &d[ni + 6 + 6 * v..ni + 12 + 6 * v]))
                .collect(),
        }
    }
}

/// Pairs left/right views by `view_id` and checks their boards agree.
fn pair_views<'a>(
    left: &'a [ChessboardObservation],
    right: &'a [ChessboardObservation],
) -> Result<Vec<(&'a ChessboardObservation, &'a ChessboardObservation)>, CalibrationError> {
    if left.len() != right.len() {
        return Err(CalibrationError::MismatchedPairs(format!(
            "{} left views vs {} right views",
            left.len(),
            right.len()
        )));
    }
    let mut l: Vec<_> = left.iter().collect();
    let mut r: Vec<_> = right.iter().collect();
    l.sort_by(|a, b| a.view_id.cmp(&b.view_id));
    r.sort_by(|a, b| a.view_id.cmp(&b.view_id));
    let mut pairs = Vec::with_capacity(l.len());
    for (a, b) in l.into_iter().zip(r) {
        if a.view_id != b.view_id {
            return Err(CalibrationError::MismatchedPairs(format!(
                "view id {:?} has no partner (found {:?})",
                a.view_id, b.view_id
            )));
        }
        if a.camera != CameraSide::Left || b.camera != CameraSide::Right {
            return Err(CalibrationError::MismatchedPairs(format!("view {} has wrong camera labels", a.view_id)));
        }
        if a.board != b.board {
            return Err(CalibrationError::MismatchedPairs(format!("view {} boards differ", a.view_id)));
        }
        pairs.push((a, b));
    }
    for w in pairs.windows(2) {
        if w[0].0.view_id == w[1].0.view_id {
            return Err(CalibrationError::MismatchedPairs(format!("duplicate view id {:?}", w[0].0.view_id)));
        }
    }
    Ok(pairs)
}

/// Chordal L2 mean of rotations: the nearest rotation to their sum.
pub fn chordal_mean(rotations: &[Matrix3<f64>]) -> Matrix3<f64> {
    let sum = rotations.iter().fold(Matrix3::zeros(), |acc, r| acc + r);
    nearest_rotation(&sum)
}

/// Calibrates the left→right transform of a stereo rig. The world origin is
/// the left camera center.
pub fn calibrate_stereo(
    left_obs: &[ChessboardObservation],
    right_obs: &[ChessboardObservation],
    left_k: &CameraIntrinsics,
    right_k: &CameraIntrinsics,
    image_size: (u32, u32),
    options: &StereoOptions,
) -> Result<StereoCalibration, CalibrationError> {
    let pairs = pair_views(left_obs, right_obs)?;
    if pairs.len() < MIN_VIEWS {
        return Err(CalibrationError::InsufficientViews { got: pairs.len(), need: MIN_VIEWS });
    }
    left_k.validate()?;
    right_k.validate()?;

    let mut boards = Vec::with_capacity(pairs.len());
    let mut rel_rots = Vec::with_capacity(pairs.len());
    let mut rel_ts = Vec::with_capacity(pairs.len());
    for (l, r) in &pairs {
        let pl = estimate_board_pose(left_k, l)?;
        let pr = estimate_board_pose(right_k, r)?;
        let rel = pr.compose(&pl.inverse());
        rel_rots.push(rel.rotation);
        rel_ts.push(rel.translation);
        boards.push(pl);
    }
    let rotation = chordal_mean(&rel_rots);
    let translation = rel_ts.iter().fold(Vector3::zeros(), |a, t| a + t) / rel_ts.len() as f64;

    let problem = StereoProblem {
        views: pairs
            .iter()
            .map(|(l, r)| (l.corners.as_slice(), r.corners.as_slice(), l.board.points()))
            .collect(),
        refine_intrinsics: options.refine_intrinsics,
    };
    let init = StereoState {
        left: intr_to_array(left_k),
        right: intr_to_array(right_k),
        relative: Pose { rotation, translation },
        boards,
    };
    let (state, report) = lm::minimize(&problem, init, &options.lm);
    if !report.converged && report.final_cost >= report.initial_cost {
        return Err(CalibrationError::NoConvergence { iterations: report.iterations });
    }
    let rms_error = rms(&problem.residuals(&state));
    let rig = StereoRig::new(intr_from_array(&state.left), intr_from_array(&state.right), state.relative, image_size)?;

    // Report board poses in the caller's left order.
    let mut board_poses = vec![Pose::identity(); pairs.len()];
    for (slot, (l, _)) in pairs.iter().enumerate() {
        let idx = left_obs.iter().position(|o| std::ptr::eq(o, *l)).expect("pair drawn from left_obs");
        board_poses[idx] = state.boards[slot];
    }
    Ok(StereoCalibration { rig, board_poses, rms_error, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, CalibrationScenario};

    #[test]
    fn two_views_are_insufficient() {
        let sc = CalibrationScenario::default_single(1);
        let obs = sc.observe_left(0.0, 1);
        let err = calibrate_single(&obs[..2]).unwrap_err();
        assert_eq!(err, CalibrationError::InsufficientViews { got: 2, need: 3 });
    }

    #[test]
    fn noise_free_single_recovers_intrinsics() {
        let sc = CalibrationScenario::default_single(7);
        let obs = sc.observe_left(0.0, 0);
        let cal = calibrate_single(&obs).unwrap();
        let k = &sc.rig.left;
        assert!((cal.intrinsics.fx / k.fx - 1.0).abs() < 1e-3, "{:?}", cal.intrinsics);
        assert!((cal.intrinsics.fy / k.fy - 1.0).abs() < 1e-3);
        assert!((cal.intrinsics.dist[0] - k.dist[0]).abs() < 5e-3);
        assert!(cal.rms_error < 1e-6, "rms {}", cal.rms_error);
        for (est, truth) in cal.poses.iter().zip(&sc.board_poses) {
            assert!((est.translation - truth.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn lm_costs_are_monotone() {
        let sc = CalibrationScenario::default_single(9);
        let cal = calibrate_single(&sc.observe_left(0.2, 3)).unwrap();
        let mut prev = cal.report.initial_cost;
        for &c in &cal.report.accepted_costs {
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn single_is_order_invariant() {
        let sc = CalibrationScenario::default_single(2);
        let obs = sc.observe_left(0.2, 5);
        let a = calibrate_single(&obs).unwrap();
        let mut rev = obs.clone();
        rev.reverse();
        let b = calibrate_single(&rev).unwrap();
        assert_eq!(a.intrinsics, b.intrinsics);
        assert_eq!(a.rms_error, b.rms_error);
        assert_eq!(a.poses[0], b.poses[b.poses.len() - 1]);
    }

    #[test]
    fn mismatched_pair_lengths() {
        let sc = synth::CalibrationScenario::default_stereo(3);
        let (l, r) = sc.observe_stereo(0.0, 0);
        let err = calibrate_stereo(&l, &r[..r.len() - 1], &sc.rig.left, &sc.rig.right, sc.rig.image_size, &Default::default())
            .unwrap_err();
        assert!(matches!(err, CalibrationError::MismatchedPairs(_)));
    }

    #[test]
    fn mismatched_view_ids() {
        let sc = synth::CalibrationScenario::default_stereo(3);
        let (l, mut r) = sc.observe_stereo(0.0, 0);
        r[0].view_id = "nope".into();
        let err =
            calibrate_stereo(&l, &r, &sc.rig.left, &sc.rig.right, sc.rig.image_size, &Default::default()).unwrap_err();
        assert!(matches!(err, CalibrationError::MismatchedPairs(_)));
    }

    #[test]
    fn noise_free_stereo_recovers_rig() {
        let sc = synth::CalibrationScenario::default_stereo(4);
        let (l, r) = sc.observe_stereo(0.0, 0);
        let cal = calibrate_stereo(&l, &r, &sc.rig.left, &sc.rig.right, sc.rig.image_size, &Default::default()).unwrap();
        let angle = crate::geometry::rotation_angle_between(&cal.rig.relative.rotation, &sc.rig.relative.rotation);
        assert!(angle < 1e-6, "rotation error {angle}");
        assert!((cal.rig.baseline() - sc.rig.baseline()).abs() < 1e-6);
        assert!(cal.rms_error < 1e-6);
    }

    #[test]
    fn bad_board_rejected() {
        let mut obs = CalibrationScenario::default_single(1).observe_left(0.0, 0);
        obs[0].corners.pop();
        assert!(matches!(calibrate_single(&obs), Err(CalibrationError::InvalidObservation(_))));
    }
}
