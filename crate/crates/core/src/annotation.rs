//! Turns fiducial-tag detections from the four-image capture (left/right at
//! T0 and T1) into rectified, triangulated and labeled ground truth.
//!
//! Only tag corners are used as correspondences. Corner order inside a
//! detection is fixed: top-left, top-right, bottom-right, bottom-left in the
//! tag's own frame.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{residual_y_disparity, CameraSide, QualityGate, RectifyMap};
use crate::geometry::{triangulate, undistort, FlowVec, GeometryError, Pixel, Point3, StereoRig};

/// Maximum disagreement between closed-form rectified depth and general
/// triangulation before a correspondence is flagged.
pub const TRIANGULATION_AGREEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("tag {tag_id} appears more than once in image {image_id}")]
    DuplicateTagInImage { tag_id: u32, image_id: String },
    #[error("images {0} and {1} both claim the same camera and frame")]
    ConflictingImages(String, String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("tag {0} has no material/layer label")]
    MissingLabel(u32),
    #[error("detection image {image_id} is {found:?}, calibration expects {expected:?}")]
    CalibrationMismatch { image_id: String, expected: (u32, u32), found: (u32, u32) },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl AnnotationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::DuplicateTagInImage { .. } => "DuplicateTagInImage",
            Self::ConflictingImages(..) => "ConflictingImages",
            Self::InvalidDetection(_) => "InvalidDetection",
            Self::MissingLabel(_) => "MissingLabel",
            Self::CalibrationMismatch { .. } => "CalibrationMismatch",
            Self::InvalidAnnotation(_) => "InvalidAnnotation",
            Self::InvalidScale(_) => "InvalidScale",
            Self::Geometry(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Frame {
    #[serde(alias = "t0")]
    T0,
    #[serde(alias = "t1")]
    T1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagDetection {
    pub tag_id: u32,
    pub center: Pixel,
    /// TL, TR, BR, BL.
    pub corners: [Pixel; 4],
    pub image_id: String,
    pub camera: CameraSide,
    pub frame: Frame,
}

impl TagDetection {
    /// Shoelace area of the corner quad (absolute value, px²).
    pub fn quad_area(&self) -> f64 {
        let c = &self.corners;
        let twice: f64 = (0..4).map(|i| {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            a.x * b.y - b.x * a.y
        })
        .sum();
        twice.abs() * 0.5
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if !self.center.is_finite() || self.corners.iter().any(|c| !c.is_finite()) {
            return Err(AnnotationError::InvalidDetection(format!(
                "tag {} in {}: non-finite coordinates",
                self.tag_id, self.image_id
            )));
        }
        let area = self.quad_area();
        if !(area > 1.0) {
            return Err(AnnotationError::InvalidDetection(format!(
                "tag {} in {}: corner quad area {area} px² is degenerate",
                self.tag_id, self.image_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaterialClass {
    Transparent,
    Reflective,
    Diffuse,
}

/// One ground-truth correspondence at a left-T0 rectified pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAnnotation {
    pub pixel: Pixel,
    /// Left-T0 → left-T1 displacement.
    #[serde(default)]
    pub flow: Option<FlowVec>,
    /// Left-T0 → right-T0 horizontal offset, `x_left − x_right`.
    #[serde(default)]
    pub disparity: Option<f64>,
    /// Left-T0 camera frame, meters.
    #[serde(default)]
    pub point3d: Option<[f64; 3]>,
    pub layer: u32,
    pub material: MaterialClass,
    pub transparent: bool,
    #[serde(default)]
    pub tag_id: Option<u32>,
    #[serde(default)]
    pub corner_index: Option<u8>,
}

impl LayerAnnotation {
    pub fn point(&self) -> Option<Point3> {
        self.point3d.map(Point3::from)
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        let bad = |m: &str| Err(AnnotationError::InvalidAnnotation(format!("{m} at {:?}", self.pixel)));
        if !self.pixel.is_finite() {
            return bad("non-finite pixel");
        }
        if self.layer < 1 {
            return bad("layer must be ≥ 1");
        }
        if self.transparent != (self.material == MaterialClass::Transparent) {
            return bad("transparent flag disagrees with material");
        }
        if let Some(f) = self.flow {
            if !f.is_finite() {
                return bad("non-finite flow");
            }
        }
        if let Some(d) = self.disparity {
            if !(d > 0.0 && d.is_finite()) {
                return bad("disparity must be positive");
            }
        }
        if let Some(p) = self.point3d {
            if p.iter().any(|v| !v.is_finite()) {
                return bad("non-finite 3D point");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotationSet {
    pub scene_id: String,
    pub annotations: Vec<LayerAnnotation>,
    /// Absent for rendered (monocular) scenes.
    pub rig: Option<StereoRig>,
    pub resolution: (u32, u32),
}

impl SceneAnnotationSet {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        self.annotations.iter().try_for_each(LayerAnnotation::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagLabel {
    pub material: MaterialClass,
    pub layer: u32,
}

pub type TagLabels = BTreeMap<u32, TagLabel>;

/// A tag corner tracked across the four capture images.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CornerTrack {
    pub tag_id: u32,
    pub corner: u8,
    pub left_t0: Option<Pixel>,
    pub right_t0: Option<Pixel>,
    pub left_t1: Option<Pixel>,
    pub right_t1: Option<Pixel>,
}

impl CornerTrack {
    fn slot_mut(&mut self, camera: CameraSide, frame: Frame) -> &mut Option<Pixel> {
        match (camera, frame) {
            (CameraSide::Left, Frame::T0) => &mut self.left_t0,
            (CameraSide::Right, Frame::T0) => &mut self.right_t0,
            (CameraSide::Left, Frame::T1) => &mut self.left_t1,
            (CameraSide::Right, Frame::T1) => &mut self.right_t1,
        }
    }

    pub fn stereo(&self, frame: Frame) -> Option<(Pixel, Pixel)> {
        match frame {
            Frame::T0 => self.left_t0.zip(self.right_t0),
            Frame::T1 => self.left_t1.zip(self.right_t1),
        }
    }

    pub fn flow(&self) -> Option<(Pixel, Pixel)> {
        self.left_t0.zip(self.left_t1)
    }
}

/// Corner tracks keyed by `(tag_id, corner_index)`, in key order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchedTags {
    pub tracks: Vec<CornerTrack>,
}

impl MatchedTags {
    pub fn stereo_pairs(&self, frame: Frame) -> Vec<(u32, u8, Pixel, Pixel)> {
        self.tracks
            .iter()
            .filter_map(|t| t.stereo(frame).map(|(l, r)| (t.tag_id, t.corner, l, r)))
            .collect()
    }

    pub fn flow_pairs(&self) -> Vec<(u32, u8, Pixel, Pixel)> {
        self.tracks
            .iter()
            .filter_map(|t| t.flow().map(|(a, b)| (t.tag_id, t.corner, a, b)))
            .collect()
    }

    pub fn tag_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tracks.iter().map(|t| t.tag_id).collect();
        ids.dedup();
        ids
    }
}

/// Groups detections by `(tag_id, corner_index)` across the four images.
pub fn match_tags(detections: &[TagDetection]) -> Result<MatchedTags, AnnotationError> {
    let mut slot_owner: HashMap<(CameraSide, Frame), &str> = HashMap::new();
    let mut seen: HashMap<(&str, u32), ()> = HashMap::new();
    let mut tracks: BTreeMap<(u32, u8), CornerTrack> = BTreeMap::new();
    for det in detections {
        det.validate()?;
        match slot_owner.get(&(det.camera, det.frame)) {
            Some(owner) if *owner != det.image_id => {
                return Err(AnnotationError::ConflictingImages(owner.to_string(), det.image_id.clone()));
            }
            _ => {
                slot_owner.insert((det.camera, det.frame), &det.image_id);
            }
        }
        if seen.insert((&det.image_id, det.tag_id), ()).is_some() {
            return Err(AnnotationError::DuplicateTagInImage { tag_id: det.tag_id, image_id: det.image_id.clone() });
        }
        for (i, corner) in det.corners.iter().enumerate() {
            let track = tracks.entry((det.tag_id, i as u8)).or_insert_with(|| CornerTrack {
                tag_id: det.tag_id,
                corner: i as u8,
                ..Default::default()
            });
            *track.slot_mut(det.camera, det.frame) = Some(*corner);
        }
    }
    Ok(MatchedTags { tracks: tracks.into_values().collect() })
}

/// Per-scene bookkeeping from [`build_annotations`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BuildStats {
    pub flow_kept: usize,
    pub flow_dropped: usize,
    pub stereo_kept: usize,
    /// Rejected by the y-disparity gate.
    pub stereo_dropped_gate: usize,
    /// Non-positive disparity or unrectifiable pixels.
    pub stereo_dropped_invalid: usize,
    pub stereo_t1_kept: usize,
    pub stereo_t1_dropped: usize,
    /// Mean rectified |Δy| over all T0 stereo pairs before gating.
    pub mean_y_disparity: Option<f64>,
    /// Corners whose closed-form and general triangulations disagree.
    pub calibration_flags: usize,
}

#[derive(Debug, Clone)]
pub struct AnnotationInputs<'a> {
    pub scene_id: &'a str,
    pub rig: &'a StereoRig,
    pub rectify_map: &'a RectifyMap,
    pub labels: &'a TagLabels,
    pub gate: QualityGate,
    /// Image sizes declared by the detection files, by image id.
    pub image_sizes: &'a [(String, (u32, u32))],
}

/// Rectifies matched corners and turns them into labeled annotations.
pub fn build_annotations(
    matched: &MatchedTags,
    inputs: &AnnotationInputs<'_>,
) -> Result<(SceneAnnotationSet, BuildStats), AnnotationError> {
    let rig = inputs.rig;
    let map = inputs.rectify_map;
    for (image_id, size) in inputs.image_sizes {
        if *size != rig.image_size {
            return Err(AnnotationError::CalibrationMismatch {
                image_id: image_id.clone(),
                expected: rig.image_size,
                found: *size,
            });
        }
    }
    for id in matched.tag_ids() {
        if !inputs.labels.contains_key(&id) {
            return Err(AnnotationError::MissingLabel(id));
        }
    }

    let rect = |side: CameraSide, p: Option<Pixel>| p.map(|p| map.rectify_pixel(rig, side, p));
    let mut stats = BuildStats::default();
    let mut annotations = Vec::new();
    let mut t0_pairs = Vec::new();

    for track in &matched.tracks {
        if let Some((l, r)) = track.stereo(Frame::T1) {
            match (map.rectify_pixel(rig, CameraSide::Left, l), map.rectify_pixel(rig, CameraSide::Right, r)) {
                (Ok(a), Ok(b)) if inputs.gate.accepts(&a, &b) && a.x - b.x > 0.0 => stats.stereo_t1_kept += 1,
                _ => stats.stereo_t1_dropped += 1,
            }
        }

        let Some(Ok(p0)) = rect(CameraSide::Left, track.left_t0) else {
            if track.flow().is_some() {
                stats.flow_dropped += 1;
            }
            if track.stereo(Frame::T0).is_some() {
                stats.stereo_dropped_invalid += 1;
            }
            continue;
        };

        let flow = match rect(CameraSide::Left, track.left_t1) {
            Some(Ok(p1)) => {
                stats.flow_kept += 1;
                Some(p0.flow_to(&p1))
            }
            Some(Err(_)) => {
                stats.flow_dropped += 1;
                None
            }
            None => None,
        };

        let mut disparity = None;
        let mut point3d = None;
        match rect(CameraSide::Right, track.right_t0) {
            None => {}
            Some(Err(_)) => stats.stereo_dropped_invalid += 1,
            Some(Ok(pr)) => {
                t0_pairs.push((p0, pr));
                if !inputs.gate.accepts(&p0, &pr) {
                    stats.stereo_dropped_gate += 1;
                } else if let Some(p) = map.triangulate_rectified(rig, p0, pr) {
                    stats.stereo_kept += 1;
                    disparity = Some(p0.x - pr.x);
                    point3d = Some([p.x, p.y, p.z]);
                    let (l, r) = track.left_t0.zip(track.right_t0).expect("stereo track");
                    let general = undistort(&rig.left, l)
                        .and_then(|ul| undistort(&rig.right, r).and_then(|ur| triangulate(rig, ul, ur)));
                    match general {
                        Ok(q) if (q - p).norm() <= TRIANGULATION_AGREEMENT => {}
                        _ => stats.calibration_flags += 1,
                    }
                } else {
                    stats.stereo_dropped_invalid += 1;
                }
            }
        }

        if flow.is_none() && disparity.is_none() {
            continue;
        }
        let label = inputs.labels[&track.tag_id];
        annotations.push(LayerAnnotation {
            pixel: p0,
            flow,
            disparity,
            point3d,
            layer: label.layer,
            material: label.material,
            transparent: label.material == MaterialClass::Transparent,
            tag_id: Some(track.tag_id),
            corner_index: Some(track.corner),
        });
    }
    stats.mean_y_disparity = residual_y_disparity(&t0_pairs).ok();
    if stats.calibration_flags > 0 {
        log::warn!(
            "scene {}: {} corners disagree between rectified and general triangulation",
            inputs.scene_id,
            stats.calibration_flags
        );
    }

    let set = SceneAnnotationSet {
        scene_id: inputs.scene_id.to_string(),
        annotations,
        rig: Some(*rig),
        resolution: rig.image_size,
    };
    set.validate()?;
    Ok((set, stats))
}

/// Resamples annotations to an image scaled by `factor`. Pixels, flow and
/// disparity scale linearly; 3D points are unchanged.
pub fn rescale_annotations(set: &SceneAnnotationSet, factor: f64) -> Result<SceneAnnotationSet, AnnotationError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AnnotationError::InvalidScale(factor));
    }
    let scale_dim = |v: u32| ((v as f64) * factor).round().max(1.0) as u32;
    let resolution = (scale_dim(set.resolution.0), scale_dim(set.resolution.1));
    let rig = set.rig.map(|r| StereoRig {
        left: r.left.scaled(factor),
        right: r.right.scaled(factor),
        relative: r.relative,
        image_size: (scale_dim(r.image_size.0), scale_dim(r.image_size.1)),
    });
    let annotations = set
        .annotations
        .iter()
        .map(|a| LayerAnnotation {
            pixel: a.pixel.scaled(factor),
            flow: a.flow.map(|f| f.scaled(factor)),
            disparity: a.disparity.map(|d| d * factor),
            ..a.clone()
        })
        .collect();
    Ok(SceneAnnotationSet { scene_id: set.scene_id.clone(), annotations, rig, resolution })
}
