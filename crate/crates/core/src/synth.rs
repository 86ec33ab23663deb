//! Synthetic observation generators with known ground truth, used by the
//! test suites and the demo commands. Everything goes through
//! [`geometry::project`](crate::geometry::project), so the generators double
//! as oracles for calibration and annotation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annotation::{Frame, TagDetection};
use crate::calibration::{BoardSpec, CameraSide, ChessboardObservation};
use crate::geometry::{project, rotation_from_vector, CameraIntrinsics, Pixel, Point3, Pose, StereoRig};

/// A stereo rig plus a set of chessboard poses (board → left camera).
#[derive(Debug, Clone)]
pub struct CalibrationScenario {
    pub rig: StereoRig,
    pub board: BoardSpec,
    pub board_poses: Vec<Pose>,
}

impl CalibrationScenario {
    pub fn left_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 1200.0, fy: 1180.0, cx: 970.0, cy: 550.0, dist: [-0.08, 0.0, 0.0, 0.0, 0.0] }
    }

    pub fn right_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics { fx: 1190.0, fy: 1175.0, cx: 962.0, cy: 546.0, dist: [-0.07, 0.004, 0.0, 0.0, 0.0] }
    }

    /// Stereo rig with a 0.12 m baseline (right camera at +x) and 3° yaw.
    pub fn default_rig() -> StereoRig {
        let rotation = rotation_from_vector(&Vector3::new(0.0, 3f64.to_radians(), 0.0));
        let center = Vector3::new(0.12, 0.0, 0.0);
        StereoRig {
            left: Self::left_intrinsics(),
            right: Self::right_intrinsics(),
            relative: Pose { rotation, translation: -(rotation * center) },
            image_size: (1940, 1100),
        }
    }

    pub fn default_board() -> BoardSpec {
        BoardSpec { rows: 7, cols: 10, square_size: 0.03 }
    }

    /// Ten board poses visible in the left camera.
    pub fn default_single(seed: u64) -> Self {
        Self::generate(Self::default_rig(), Self::default_board(), 10, false, seed)
    }

    /// Ten board poses visible in both cameras.
    pub fn default_stereo(seed: u64) -> Self {
        Self::generate(Self::default_rig(), Self::default_board(), 10, true, seed)
    }

    pub fn generate(rig: StereoRig, board: BoardSpec, views: usize, stereo: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = board.points();
        let center = (pts[0] + pts[pts.len() - 1]) * 0.5;
        let (w, h) = (rig.image_size.0 as f64, rig.image_size.1 as f64);
        let margin = 15.0;
        let visible = |k: &CameraIntrinsics, pose: &Pose| {
            pts.iter().all(|p| match project(k, pose, p) {
                Ok(px) => px.x > margin && px.x < w - margin && px.y > margin && px.y < h - margin,
                Err(_) => false,
            })
        };
        let mut board_poses = Vec::with_capacity(views);
        let mut attempts = 0usize;
        while board_poses.len() < views {
            let rot = rotation_from_vector(&Vector3::new(
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.3..0.3),
            ));
            let depth = rng.random_range(0.55..0.9);
            let target = Vector3::new(
                rng.random_range(-0.12..0.12) * depth,
                rng.random_range(-0.08..0.08) * depth,
                depth,
            );
            let pose = Pose { rotation: rot, translation: target - rot * center };
            attempts += 1;
            assert!(attempts < 1_000_000, "board pose sampler cannot satisfy visibility");
            if !visible(&rig.left, &pose) {
                continue;
            }
            if stereo && !visible(&rig.right, &rig.relative.compose(&pose)) {
                continue;
            }
            board_poses.push(pose);
        }
        Self { rig, board, board_poses }
    }

    fn observe(&self, side: CameraSide, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<ChessboardObservation> {
        let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
        let pts = self.board.points();
        self.board_poses
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let (k, pose) = match side {
                    CameraSide::Left => (&self.rig.left, *pose),
                    CameraSide::Right => (&self.rig.right, self.rig.relative.compose(pose)),
                };
                let corners = pts
                    .iter()
                    .map(|p| {
                        let px = project(k, &pose, p).expect("generated boards are visible");
                        if sigma > 0.0 {
                            Pixel::new(px.x + noise.sample(rng), px.y + noise.sample(rng))
                        } else {
                            px
                        }
                    })
                    .collect();
                ChessboardObservation { view_id: format!("view{i:03}"), camera: side, board: self.board, corners }
            })
            .collect()
    }

    /// Left-camera observations with Gaussian corner noise of `sigma` pixels
    /// per coordinate.
    pub fn observe_left(&self, sigma: f64, seed: u64) -> Vec<ChessboardObservation> {
        self.observe(CameraSide::Left, sigma, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn observe_stereo(&self, sigma: f64, seed: u64) -> (Vec<ChessboardObservation>, Vec<ChessboardObservation>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = self.observe(CameraSide::Left, sigma, &mut rng);
        let r = self.observe(CameraSide::Right, sigma, &mut rng);
        (l, r)
    }
}

/// A square fiducial tag in the left-T0 camera frame, moving rigidly between
/// the two capture frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTag {
    pub id: u32,
    /// Corners TL, TR, BR, BL at T0 (left camera frame, meters).
    pub corners_t0: [Point3; 4],
    /// Rigid motion applied to the corners between T0 and T1.
    pub motion: Pose,
}

impl SyntheticTag {
    pub fn corners_t1(&self) -> [Point3; 4] {
        self.corners_t0.map(|c| self.motion.transform(&c))
    }

    pub fn corners(&self, frame: Frame) -> [Point3; 4] {
        match frame {
            Frame::T0 => self.corners_t0,
            Frame::T1 => self.corners_t1(),
        }
    }
}

/// A small tag scene: several tags at 0.8–2.5 m moving by up to a few cm.
pub fn tag_scene(seed: u64, count: usize) -> Vec<SyntheticTag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let depth = rng.random_range(0.8..2.5);
            let center = Point3::new(rng.random_range(-0.3..0.3) * depth, rng.random_range(-0.2..0.2) * depth, depth);
            let rot = rotation_from_vector(&Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.5..0.5),
            ));
            let half = rng.random_range(0.02..0.05);
            let local = [
                Vector3::new(-half, -half, 0.0),
                Vector3::new(half, -half, 0.0),
                Vector3::new(half, half, 0.0),
                Vector3::new(-half, half, 0.0),
            ];
            let corners_t0 = local.map(|l| center + rot * l);
            let motion_rot = rotation_from_vector(&Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            ));
            let shift = Vector3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            );
            // Rotate about the tag center, then translate.
            let motion = Pose { rotation: motion_rot, translation: center - motion_rot * center + shift };
            SyntheticTag { id: 100 + i as u32, corners_t0, motion }
        })
        .collect()
}

/// Renders tag detections for all four images (left/right × T0/T1). Tags
/// not fully visible in an image are omitted from it.
pub fn detect_tags(rig: &StereoRig, tags: &[SyntheticTag]) -> Vec<TagDetection> {
    let (w, h) = (rig.image_size.0 as f64, rig.image_size.1 as f64);
    let mut out = Vec::new();
    for frame in [Frame::T0, Frame::T1] {
        for side in [CameraSide::Left, CameraSide::Right] {
            let (k, pose) = match side {
                CameraSide::Left => (&rig.left, Pose::identity()),
                CameraSide::Right => (&rig.right, rig.relative),
            };
            for tag in tags {
                let pts = tag.corners(frame);
                let projected: Option<Vec<Pixel>> = pts
                    .iter()
                    .map(|p| project(k, &pose, p).ok().filter(|q| q.x >= 0.0 && q.x < w && q.y >= 0.0 && q.y < h))
                    .collect();
                let Some(px) = projected else { continue };
                let center_3d = (pts[0] + pts[1] + pts[2] + pts[3]) * 0.25;
                let center = project(k, &pose, &center_3d).expect("center in front");
                out.push(TagDetection {
                    tag_id: tag.id,
                    center,
                    corners: [px[0], px[1], px[2], px[3]],
                    image_id: image_id(side, frame),
                    camera: side,
                    frame,
                });
            }
        }
    }
    out
}

pub fn image_id(side: CameraSide, frame: Frame) -> String {
    let s = match side {
        CameraSide::Left => "left",
        CameraSide::Right => "right",
    };
    let f = match frame {
        Frame::T0 => "t0",
        Frame::T1 => "t1",
    };
    format!("{s}_{f}")
}

/// Random rotation with angle below `max_angle` radians.
pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = axis.try_normalize(1e-9).unwrap_or_else(Vector3::z);
    rotation_from_vector(&(axis * rng.random_range(0.0..max_angle)))
}
