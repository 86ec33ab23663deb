//! Multi-layer predictions: storage, the layer-pruning heuristic, and two
//! reference predictors (a noisy ground-truth oracle and a classical block
//! matcher).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::formats::GtPlanes;
use crate::geometry::FlowVec;

/// Raw layers produced per pixel by the reference multi-layer model.
pub const DEFAULT_LAYERS: usize = 4;
/// Minimum separation between consecutive kept layers, pixels.
pub const DEFAULT_PRUNE_DELTA: f64 = 0.5;
pub const MAX_PREDICTION_LAYERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((u32, u32), (u32, u32)),
    #[error("invalid prediction: {0}")]
    Invalid(String),
}

impl PredictionError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::SizeMismatch(..) => "SizeMismatch",
            Self::Invalid(_) => "InvalidPrediction",
        }
    }
}

/// Dense per-layer flow, stored as layer-major row-major planes. Valid
/// layers at a pixel always form a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerPrediction {
    pub width: u32,
    pub height: u32,
    pub n_layers: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub valid: Vec<u8>,
}

impl MultiLayerPrediction {
    /// All layers invalid, zero flow.
    pub fn new(width: u32, height: u32, n_layers: usize) -> Self {
        let len = width as usize * height as usize * n_layers;
        Self { width, height, n_layers, dx: vec![0.0; len], dy: vec![0.0; len], valid: vec![0; len] }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    fn index(&self, x: u32, y: u32, layer: usize) -> usize {
        layer * self.pixel_count() + y as usize * self.width as usize + x as usize
    }

    /// Flow of 0-based `layer` at an integer pixel, if valid.
    pub fn get(&self, x: u32, y: u32, layer: usize) -> Option<FlowVec> {
        if layer >= self.n_layers {
            return None;
        }
        let i = self.index(x, y, layer);
        (self.valid[i] != 0).then(|| FlowVec::new(self.dx[i] as f64, self.dy[i] as f64))
    }

    pub fn set(&mut self, x: u32, y: u32, layer: usize, flow: Option<FlowVec>) {
        let i = self.index(x, y, layer);
        match flow {
            Some(f) => {
                self.dx[i] = f.dx as f32;
                self.dy[i] = f.dy as f32;
                self.valid[i] = 1;
            }
            None => {
                self.dx[i] = 0.0;
                self.dy[i] = 0.0;
                self.valid[i] = 0;
            }
        }
    }

    /// Number of predicted layers `|F̂|` at a pixel.
    pub fn layer_count(&self, x: u32, y: u32) -> usize {
        (0..self.n_layers).take_while(|&l| self.valid[self.index(x, y, l)] != 0).count()
    }

    /// Valid layers at a pixel, in order.
    pub fn layers_at(&self, x: u32, y: u32) -> Vec<FlowVec> {
        (0..self.layer_count(x, y)).filter_map(|l| self.get(x, y, l)).collect()
    }

    pub fn validate(&self) -> Result<(), PredictionError> {
        let len = self.pixel_count() * self.n_layers;
        if self.dx.len() != len || self.dy.len() != len || self.valid.len() != len {
            return Err(PredictionError::Invalid("plane sizes disagree with the header".into()));
        }
        if self.n_layers == 0 || self.n_layers > MAX_PREDICTION_LAYERS {
            return Err(PredictionError::Invalid(format!("layer count {} outside 1..=8", self.n_layers)));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let n = self.layer_count(x, y);
                if (n..self.n_layers).any(|l| self.valid[self.index(x, y, l)] != 0) {
                    return Err(PredictionError::Invalid(format!("valid layers at ({x},{y}) are not a prefix")));
                }
            }
        }
        Ok(())
    }

    /// Layer subset `0..n` (later layers dropped).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_layers);
        let len = self.pixel_count() * n;
        Self { n_layers: n, dx: self.dx[..len].to_vec(), dy: self.dy[..len].to_vec(), valid: self.valid[..len].to_vec(), ..*self }
    }
}

/// Treats a single-layer field as if it predicted every layer: the layer-1
/// flow is copied into layers `2..=n_layers`.
pub fn single_layer_workaround(single: &MultiLayerPrediction, n_layers: usize) -> MultiLayerPrediction {
    let n_layers = n_layers.clamp(1, MAX_PREDICTION_LAYERS);
    let mut out = MultiLayerPrediction::new(single.width, single.height, n_layers);
    let px = single.pixel_count();
    for l in 0..n_layers {
        out.dx[l * px..(l + 1) * px].copy_from_slice(&single.dx[..px]);
        out.dy[l * px..(l + 1) * px].copy_from_slice(&single.dy[..px]);
        out.valid[l * px..(l + 1) * px].copy_from_slice(&single.valid[..px]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneMode {
    /// Compare each layer with the last layer that was kept.
    #[default]
    SurvivorPrevious,
    /// Compare each layer with the raw layer before it, all at once.
    RawPrevious,
}

fn prune_pixel(layers: &[FlowVec], delta: f64, mode: PruneMode) -> Vec<FlowVec> {
    let Some(&first) = layers.first() else { return Vec::new() };
    let mut kept = vec![first];
    for i in 1..layers.len() {
        let reference = match mode {
            PruneMode::SurvivorPrevious => *kept.last().expect("layer 1 is kept"),
            PruneMode::RawPrevious => layers[i - 1],
        };
        if layers[i].distance(&reference) >= delta {
            kept.push(layers[i]);
        }
    }
    kept
}

/// Drops layers that repeat the previous layer's flow (closer than `delta`
/// pixels) and compacts the survivors into a prefix.
pub fn prune(raw: &MultiLayerPrediction, delta: f64) -> MultiLayerPrediction {
    prune_with(raw, delta, PruneMode::default())
}

pub fn prune_with(raw: &MultiLayerPrediction, delta: f64, mode: PruneMode) -> MultiLayerPrediction {
    let mut out = MultiLayerPrediction::new(raw.width, raw.height, raw.n_layers);
    for y in 0..raw.height {
        for x in 0..raw.width {
            // Distances in f32 storage precision: compare the stored values.
            for (l, f) in prune_pixel(&raw.layers_at(x, y), delta, mode).into_iter().enumerate() {
                out.set(x, y, l, Some(f));
            }
        }
    }
    out
}

/// Ground truth plus isotropic Gaussian noise. A layer is predicted wherever
/// the ground truth has a surface hit; occluded layers keep a zero
/// placeholder flow so the predicted layer count stays correct.
pub fn oracle_predictor(gt: &GtPlanes, noise_sigma: f64, seed: u64, n_layers: usize) -> MultiLayerPrediction {
    let n_layers = n_layers.clamp(1, MAX_PREDICTION_LAYERS);
    let mut out = MultiLayerPrediction::new(gt.width, gt.height, n_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    for l in 0..n_layers.min(gt.layers.len()) {
        let plane = &gt.layers[l];
        for i in 0..gt.pixel_count() {
            if !plane.has_hit(i) {
                continue;
            }
            let (mut dx, mut dy) = if plane.valid[i] != 0 { (plane.dx[i] as f64, plane.dy[i] as f64) } else { (0.0, 0.0) };
            if noise_sigma > 0.0 {
                dx += noise.sample(&mut rng);
                dy += noise.sample(&mut rng);
            }
            let j = l * out.pixel_count() + i;
            out.dx[j] = dx as f32;
            out.dy[j] = dy as f32;
            out.valid[j] = 1;
        }
    }
    out
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Self { width, height, data }
    }

    /// Edge-clamped lookup.
    fn at(&self, x: i64, y: i64) -> f32 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[y * self.width as usize + x]
    }

    fn downsample(&self) -> GrayImage {
        let (w, h) = (self.width.div_ceil(2), self.height.div_ceil(2));
        let mut data = Vec::with_capacity((w * h) as usize);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let s = self.at(2 * x, 2 * y) + self.at(2 * x + 1, 2 * y) + self.at(2 * x, 2 * y + 1) + self.at(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        GrayImage { width: w, height: h, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatchConfig {
    /// Window half-size; the window is `(2r+1)²`.
    pub window_radius: u32,
    /// Integer search radius at the coarsest level.
    pub search_radius: i32,
    /// Search radius around the upsampled estimate at finer levels.
    pub refine_radius: i32,
    pub levels: u32,
    /// Windows with intensity variance below this are textureless.
    pub min_variance: f32,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self { window_radius: 3, search_radius: 4, refine_radius: 2, levels: 3, min_variance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatchResult {
    /// A single-layer prediction.
    pub flow: MultiLayerPrediction,
    /// Textureless pixels, which get zero flow.
    pub low_confidence: Vec<bool>,
}

fn sad(a: &GrayImage, b: &GrayImage, x: i64, y: i64, dx: i64, dy: i64, r: i64) -> f32 {
    let mut s = 0.0;
    for v in -r..=r {
        for u in -r..=r {
            s += (a.at(x + u, y + v) - b.at(x + u + dx, y + v + dy)).abs();
        }
    }
    s
}

fn window_variance(img: &GrayImage, x: i64, y: i64, r: i64) -> f32 {
    let n = ((2 * r + 1) * (2 * r + 1)) as f32;
    let (mut s, mut s2) = (0.0f32, 0.0f32);
    for v in -r..=r {
        for u in -r..=r {
            let p = img.at(x + u, y + v);
            s += p;
            s2 += p * p;
        }
    }
    (s2 / n - (s / n) * (s / n)).max(0.0)
}

/// Best integer displacement in a square around `center`; equal costs go to
/// the smaller displacement, then to the earlier scan position.
fn search(a: &GrayImage, b: &GrayImage, x: i64, y: i64, center: (i64, i64), radius: i64, r: i64) -> ((i64, i64), f32) {
    let mut best = (center, f32::INFINITY);
    let mag = |d: (i64, i64)| d.0 * d.0 + d.1 * d.1;
    for dy in center.1 - radius..=center.1 + radius {
        for dx in center.0 - radius..=center.0 + radius {
            let c = sad(a, b, x, y, dx, dy, r);
            if c < best.1 || (c == best.1 && mag((dx, dy)) < mag(best.0)) {
                best = ((dx, dy), c);
            }
        }
    }
    best
}

/// Sub-pixel offset of the cost minimum. An exact match stays on the integer.
fn parabolic(cm: f32, c0: f32, cp: f32) -> f64 {
    let den = cm - 2.0 * c0 + cp;
    if c0 > 0.0 && den > 0.0 {
        (0.5 * (cm - cp) / den).clamp(-0.5, 0.5) as f64
    } else {
        0.0
    }
}

/// Coarse-to-fine sum-of-absolute-differences matching with a parabolic
/// sub-pixel fit on each axis.
pub fn block_match_flow(img0: &GrayImage, img1: &GrayImage, config: &BlockMatchConfig) -> Result<BlockMatchResult, PredictionError> {
    if (img0.width, img0.height) != (img1.width, img1.height) {
        return Err(PredictionError::SizeMismatch((img0.width, img0.height), (img1.width, img1.height)));
    }
    let (w, h) = (img0.width, img0.height);
    let r = config.window_radius as i64;
    let mut pyramid = vec![(img0.clone(), img1.clone())];
    for _ in 1..config.levels.max(1) {
        let (a, b) = pyramid.last().expect("non-empty");
        if a.width < 8 || a.height < 8 {
            break;
        }
        pyramid.push((a.downsample(), b.downsample()));
    }

    let mut field: Vec<(i64, i64)> = Vec::new();
    let mut field_w = 0usize;
    for (level, (a, b)) in pyramid.iter().enumerate().rev() {
        let coarsest = level == pyramid.len() - 1;
        let prev = std::mem::take(&mut field);
        let prev_w = field_w;
        field = (0..a.height as i64)
            .into_par_iter()
            .flat_map_iter(|y| {
                let prev = &prev;
                (0..a.width as i64).map(move |x| {
                    let (center, radius) = if coarsest {
                        ((0, 0), config.search_radius as i64)
                    } else {
                        let prev_h = prev.len() / prev_w;
                        let d = prev[(y as usize / 2).min(prev_h - 1) * prev_w + (x as usize / 2).min(prev_w - 1)];
                        ((2 * d.0, 2 * d.1), config.refine_radius as i64)
                    };
                    search(a, b, x, y, center, radius, r).0
                })
            })
            .collect();
        field_w = a.width as usize;
    }

    let mut flow = MultiLayerPrediction::new(w, h, 1);
    let mut low_confidence = vec![false; (w * h) as usize];
    let results: Vec<(Option<FlowVec>, bool)> = (0..h as i64)
        .into_par_iter()
        .flat_map_iter(|y| {
            let field = &field;
            (0..w as i64).map(move |x| {
                if window_variance(img0, x, y, r) < config.min_variance {
                    return (Some(FlowVec::ZERO), true);
                }
                let (dx, dy) = field[(y * w as i64 + x) as usize];
                let c0 = sad(img0, img1, x, y, dx, dy, r);
                let sx = parabolic(sad(img0, img1, x, y, dx - 1, dy, r), c0, sad(img0, img1, x, y, dx + 1, dy, r));
                let sy = parabolic(sad(img0, img1, x, y, dx, dy - 1, r), c0, sad(img0, img1, x, y, dx, dy + 1, r));
                (Some(FlowVec::new(dx as f64 + sx, dy as f64 + sy)), false)
            })
        })
        .collect();
    for (i, (f, low)) in results.into_iter().enumerate() {
        let (x, y) = (i as u32 % w, i as u32 / w);
        flow.set(x, y, 0, f);
        low_confidence[i] = low;
    }
    Ok(BlockMatchResult { flow, low_confidence })
}
