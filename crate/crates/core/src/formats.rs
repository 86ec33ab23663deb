//! File formats: the MLGT/MLFL binary flow containers, binary PPM, and the
//! JSON / JSON Lines interchange files used by the command-line tool.
//!
//! Every decoder works on an in-memory byte slice or string, validates sizes
//! before allocating and never panics on malformed input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Frame, LayerAnnotation, SceneAnnotationSet, TagDetection, TagLabels};
use crate::calibration::{BoardSpec, CameraSide, ChessboardObservation};
use crate::geometry::{CameraIntrinsics, Pixel, StereoRig};
use crate::prediction::{MultiLayerPrediction, MAX_PREDICTION_LAYERS};
use crate::render::{GroundTruthMaps, RgbImage};

pub const MLGT_MAGIC: &[u8; 4] = b"MLGT";
pub const MLFL_MAGIC: &[u8; 4] = b"MLFL";
pub const FORMAT_VERSION: u32 = 1;
/// Sanity cap on MLGT layer planes.
pub const MLGT_MAX_LAYERS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic, expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("invalid content: {0}")]
    InvalidContent(String),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadMagic { .. } => "BadMagic",
            Self::UnsupportedVersion(_) => "UnsupportedVersion",
            Self::Truncated { .. } => "Truncated",
            Self::TrailingBytes(_) => "TrailingBytes",
            Self::InvalidHeader(_) => "InvalidHeader",
            Self::Json { .. } => "JsonError",
            Self::InvalidContent(_) => "InvalidContent",
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated {
            needed: self.pos.saturating_add(n),
            got: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_plane(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn u8_plane(&mut self, n: usize) -> Result<Vec<u8>, FormatError> {
        Ok(self.take(n)?.to_vec())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Validates a `width × height × layers` header against the payload so that
/// no allocation exceeds the input size.
fn checked_planes(
    width: u32,
    height: u32,
    layers: u32,
    bytes_per_pixel_layer: usize,
    available: usize,
) -> Result<usize, FormatError> {
    let px = (width as usize).checked_mul(height as usize).ok_or_else(|| FormatError::InvalidHeader("image too large".into()))?;
    let needed = px
        .checked_mul(layers as usize)
        .and_then(|n| n.checked_mul(bytes_per_pixel_layer))
        .ok_or_else(|| FormatError::InvalidHeader("image too large".into()))?;
    if needed > available {
        return Err(FormatError::Truncated { needed, got: available });
    }
    Ok(px)
}

/// In-memory MLGT: per-layer flow, validity and world-space position planes.
#[derive(Debug, Clone, PartialEq)]
pub struct GtLayerPlanes {
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    /// Flow is valid (the point stays visible at this layer in T1).
    pub valid: Vec<u8>,
    /// World position of the layer hit; NaN where the ray has no such layer.
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
}

impl GtLayerPlanes {
    pub fn has_hit(&self, i: usize) -> bool {
        !self.x[i].is_nan()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtPlanes {
    pub width: u32,
    pub height: u32,
    pub layers: Vec<GtLayerPlanes>,
}

impl GtPlanes {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn from_maps(maps: &GroundTruthMaps) -> Self {
        let n = maps.max_layers().max(1);
        let px = maps.pixels.len();
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let mut p = GtLayerPlanes {
                dx: vec![0.0; px],
                dy: vec![0.0; px],
                valid: vec![0; px],
                x: vec![f32::NAN; px],
                y: vec![f32::NAN; px],
                z: vec![f32::NAN; px],
            };
            for (i, pix) in maps.pixels.iter().enumerate() {
                if let Some(hit) = pix.hits.get(l) {
                    p.x[i] = hit.world_point.x as f32;
                    p.y[i] = hit.world_point.y as f32;
                    p.z[i] = hit.world_point.z as f32;
                }
                if let Some(Some(f)) = pix.flows.get(l) {
                    p.dx[i] = f.dx as f32;
                    p.dy[i] = f.dy as f32;
                    p.valid[i] = 1;
                }
            }
            layers.push(p);
        }
        Self { width: maps.width, height: maps.height, layers }
    }

    /// Flow planes only, as a prediction file (the MLFL mirror).
    pub fn to_prediction(&self) -> MultiLayerPrediction {
        let n = self.layers.len().min(MAX_PREDICTION_LAYERS);
        let mut p = MultiLayerPrediction::new(self.width, self.height, n);
        let px = self.pixel_count();
        for (l, layer) in self.layers.iter().take(n).enumerate() {
            p.dx[l * px..(l + 1) * px].copy_from_slice(&layer.dx);
            p.dy[l * px..(l + 1) * px].copy_from_slice(&layer.dy);
            p.valid[l * px..(l + 1) * px].copy_from_slice(&layer.valid);
        }
        p
    }
}

pub fn encode_mlgt(gt: &GtPlanes) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + gt.layers.len() * gt.pixel_count() * 21);
    out.extend_from_slice(MLGT_MAGIC);
    for v in [FORMAT_VERSION, gt.width, gt.height, gt.layers.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &gt.layers {
        put_f32s(&mut out, &l.dx);
        put_f32s(&mut out, &l.dy);
        out.extend_from_slice(&l.valid);
        put_f32s(&mut out, &l.x);
        put_f32s(&mut out, &l.y);
        put_f32s(&mut out, &l.z);
    }
    out
}

pub fn decode_mlgt(bytes: &[u8]) -> Result<GtPlanes, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MLGT_MAGIC {
        return Err(FormatError::BadMagic { expected: "MLGT" });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (width, height, n) = (r.u32()?, r.u32()?, r.u32()?);
    if n > MLGT_MAX_LAYERS {
        return Err(FormatError::InvalidHeader(format!("{n} layers exceeds the limit of {MLGT_MAX_LAYERS}")));
    }
    let px = checked_planes(width, height, n, 21, bytes.len() - r.pos)?;
    let mut layers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        layers.push(GtLayerPlanes {
            dx: r.f32_plane(px)?,
            dy: r.f32_plane(px)?,
            valid: r.u8_plane(px)?,
            x: r.f32_plane(px)?,
            y: r.f32_plane(px)?,
            z: r.f32_plane(px)?,
        });
    }
    r.finish()?;
    Ok(GtPlanes { width, height, layers })
}

pub fn encode_mlfl(pred: &MultiLayerPrediction) -> Vec<u8> {
    let px = pred.pixel_count();
    let mut out = Vec::with_capacity(20 + pred.n_layers * px * 9);
    out.extend_from_slice(MLFL_MAGIC);
    for v in [FORMAT_VERSION, pred.width, pred.height, pred.n_layers as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in 0..pred.n_layers {
        let s = l * px..(l + 1) * px;
        put_f32s(&mut out, &pred.dx[s.clone()]);
        put_f32s(&mut out, &pred.dy[s.clone()]);
        out.extend_from_slice(&pred.valid[s]);
    }
    out
}

pub fn decode_mlfl(bytes: &[u8]) -> Result<MultiLayerPrediction, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MLFL_MAGIC {
        return Err(FormatError::BadMagic { expected: "MLFL" });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (width, height, n) = (r.u32()?, r.u32()?, r.u32()?);
    if n == 0 || n as usize > MAX_PREDICTION_LAYERS {
        return Err(FormatError::InvalidHeader(format!("layer count {n} outside 1..={MAX_PREDICTION_LAYERS}")));
    }
    let px = checked_planes(width, height, n, 9, bytes.len() - r.pos)?;
    let mut pred = MultiLayerPrediction::new(width, height, n as usize);
    for l in 0..n as usize {
        let s = l * px..(l + 1) * px;
        pred.dx[s.clone()].copy_from_slice(&r.f32_plane(px)?);
        pred.dy[s.clone()].copy_from_slice(&r.f32_plane(px)?);
        pred.valid[s].copy_from_slice(&r.u8_plane(px)?);
    }
    r.finish()?;
    pred.validate().map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    Ok(pred)
}

/// Binary PPM (P6), 8 bits per channel, linear values clamped to [0,1].
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 3);
    for px in &img.data {
        for c in px {
            out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(FormatError::BadMagic { expected: "P6" });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Whitespace and comments before each header field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| FormatError::InvalidHeader("expected a decimal number".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(FormatError::InvalidHeader("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::InvalidHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let px = checked_planes(width, height, 1, 3 * bps, bytes.len() - pos)?;
    let body = &bytes[pos..pos + px * 3 * bps];
    let scale = 1.0 / maxval as f32;
    let sample = |i: usize| -> f32 {
        let v = if bps == 1 { body[i] as u32 } else { u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as u32 };
        v.min(maxval) as f32 * scale
    };
    let data = (0..px).map(|p| [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)]).collect();
    Ok(RgbImage { width, height, data })
}

fn json_err(line: usize) -> impl Fn(serde_json::Error) -> FormatError {
    move |e| FormatError::Json { line, message: e.to_string() }
}

/// Non-blank lines with their 1-based line numbers.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObservationRecord {
    view_id: String,
    camera: CameraSide,
    /// `[rows, cols, square_m]`.
    board: (usize, usize, f64),
    corners: Vec<[f64; 2]>,
}

pub fn parse_observations(text: &str) -> Result<Vec<ChessboardObservation>, FormatError> {
    jsonl_lines(text)
        .map(|(line, l)| {
            let r: ObservationRecord = serde_json::from_str(l).map_err(json_err(line))?;
            Ok(ChessboardObservation {
                view_id: r.view_id,
                camera: r.camera,
                board: BoardSpec { rows: r.board.0, cols: r.board.1, square_size: r.board.2 },
                corners: r.corners.into_iter().map(|[x, y]| Pixel::new(x, y)).collect(),
            })
        })
        .collect()
}

pub fn write_observations(obs: &[ChessboardObservation]) -> String {
    let mut out = String::new();
    for o in obs {
        let r = ObservationRecord {
            view_id: o.view_id.clone(),
            camera: o.camera,
            board: (o.board.rows, o.board.cols, o.board.square_size),
            corners: o.corners.iter().map(|c| [c.x, c.y]).collect(),
        };
        out.push_str(&serde_json::to_string(&r).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TagRecord {
    id: u32,
    center: [f64; 2],
    corners: [[f64; 2]; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionImageRecord {
    image_id: String,
    camera: CameraSide,
    frame: Frame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<(u32, u32)>,
    tags: Vec<TagRecord>,
}

/// Detections file contents: every tag detection plus the image sizes that
/// were declared.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub detections: Vec<TagDetection>,
    pub image_sizes: Vec<(String, (u32, u32))>,
}

pub fn parse_detections(text: &str) -> Result<DetectionFile, FormatError> {
    let mut file = DetectionFile::default();
    for (line, l) in jsonl_lines(text) {
        let r: DetectionImageRecord = serde_json::from_str(l).map_err(json_err(line))?;
        if let Some(size) = r.image_size {
            file.image_sizes.push((r.image_id.clone(), size));
        }
        for t in r.tags {
            file.detections.push(TagDetection {
                tag_id: t.id,
                center: Pixel::new(t.center[0], t.center[1]),
                corners: t.corners.map(|[x, y]| Pixel::new(x, y)),
                image_id: r.image_id.clone(),
                camera: r.camera,
                frame: r.frame,
            });
        }
    }
    Ok(file)
}

/// Groups detections by image, in first-seen order.
pub fn write_detections(detections: &[TagDetection], image_size: Option<(u32, u32)>) -> String {
    let mut images: Vec<DetectionImageRecord> = Vec::new();
    for d in detections {
        let tag = TagRecord { id: d.tag_id, center: [d.center.x, d.center.y], corners: d.corners.map(|c| [c.x, c.y]) };
        match images.iter_mut().find(|i| i.image_id == d.image_id) {
            Some(img) => img.tags.push(tag),
            None => images.push(DetectionImageRecord {
                image_id: d.image_id.clone(),
                camera: d.camera,
                frame: d.frame,
                image_size,
                tags: vec![tag],
            }),
        }
    }
    images.iter().map(|i| serde_json::to_string(i).expect("serializable") + "\n").collect()
}

pub fn parse_labels(text: &str) -> Result<TagLabels, FormatError> {
    serde_json::from_str(text).map_err(json_err(1))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationHeader {
    scene_id: String,
    resolution: (u32, u32),
    rig: Option<StereoRig>,
}

/// Header line, then one annotation per line.
pub fn encode_annotations(set: &SceneAnnotationSet) -> String {
    let header = AnnotationHeader { scene_id: set.scene_id.clone(), resolution: set.resolution, rig: set.rig };
    let mut out = serde_json::to_string(&header).expect("serializable");
    out.push('\n');
    for a in &set.annotations {
        out.push_str(&serde_json::to_string(a).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn decode_annotations(text: &str) -> Result<SceneAnnotationSet, FormatError> {
    let mut lines = jsonl_lines(text);
    let (line, first) = lines.next().ok_or(FormatError::InvalidHeader("empty annotation file".into()))?;
    let header: AnnotationHeader = serde_json::from_str(first).map_err(json_err(line))?;
    let annotations = lines
        .map(|(line, l)| serde_json::from_str::<LayerAnnotation>(l).map_err(json_err(line)))
        .collect::<Result<Vec<_>, _>>()?;
    let set = SceneAnnotationSet { scene_id: header.scene_id, annotations, rig: header.rig, resolution: header.resolution };
    set.validate().map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibrationRecord {
    pub intrinsics: CameraIntrinsics,
    pub rms_error: f64,
    pub views: usize,
}

/// Output of the `calibrate` command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationFile {
    #[serde(default)]
    pub left: Option<CameraCalibrationRecord>,
    #[serde(default)]
    pub right: Option<CameraCalibrationRecord>,
    #[serde(default)]
    pub rig: Option<StereoRig>,
    #[serde(default)]
    pub stereo_rms_error: Option<f64>,
}

pub fn parse_calibration(text: &str) -> Result<CalibrationFile, FormatError> {
    let file: CalibrationFile = serde_json::from_str(text).map_err(json_err(1))?;
    if let Some(rig) = &file.rig {
        rig.validate().map_err(|e| FormatError::InvalidContent(e.to_string()))?;
    }
    Ok(file)
}
