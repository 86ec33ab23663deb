//! Multi-layer flow metrics: EPE, bad-τ, layer count correctness, count-aware
//! bad-τ, category breakdowns and table rendering.
//!
//! A pixel is evaluated once, with all of its annotated layers together. It
//! is τ-accurate when every annotated layer has a prediction within τ of the
//! ground truth; a layer the prediction does not have fails the test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotation::{LayerAnnotation, MaterialClass, SceneAnnotationSet};
use crate::geometry::{FlowVec, Pixel};
use crate::prediction::{single_layer_workaround, MultiLayerPrediction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no errors to average")]
    EmptyInput,
    #[error("no annotated pixels to evaluate")]
    EmptyDataset,
    #[error("prediction has {available} layers, annotation needs layer {needed}")]
    MissingLayer { needed: u32, available: usize },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("scene {scene}: {message}")]
    InvalidInput { scene: String, message: String },
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyInput => "EmptyInput",
            Self::EmptyDataset => "EmptyDataset",
            Self::MissingLayer { .. } => "MissingLayer",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::InvalidInput { .. } => "InvalidInput",
        }
    }
}

/// Error threshold in pixels. `Infinite` accepts any present prediction
/// without touching floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau {
    Finite(f64),
    Infinite,
}

impl Tau {
    /// The non-strict test `err ≤ τ`.
    pub fn accepts(self, err: f64) -> bool {
        match self {
            Tau::Finite(t) => err <= t,
            Tau::Infinite => true,
        }
    }

    fn ascending(a: Tau, b: Tau) -> bool {
        match (a, b) {
            (Tau::Finite(x), Tau::Finite(y)) => x < y,
            (Tau::Finite(_), Tau::Infinite) => true,
            (Tau::Infinite, _) => false,
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Finite(t) => write!(f, "{t}"),
            Tau::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Tau {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if ["inf", "infinity", "∞"].iter().any(|k| s.eq_ignore_ascii_case(k)) {
            return Ok(Tau::Infinite);
        }
        match s.parse::<f64>() {
            Ok(t) if t > 0.0 && t.is_finite() => Ok(Tau::Finite(t)),
            _ => Err(MetricsError::InvalidConfig(format!("τ must be a positive number or inf, got {s:?}"))),
        }
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => t.to_string().parse(),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

pub fn parse_taus(list: &str) -> Result<Vec<Tau>, MetricsError> {
    list.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    First,
    Last,
    #[default]
    All,
}

impl FromStr for Subset {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Subset::First),
            "last" => Ok(Subset::Last),
            "all" => Ok(Subset::All),
            _ => Err(MetricsError::InvalidConfig(format!("unknown subset {s:?}"))),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::First => "first",
            Subset::Last => "last",
            Subset::All => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryFlags {
    pub material: bool,
    pub layer: bool,
    pub behind_transparent: bool,
}

impl Default for CategoryFlags {
    fn default() -> Self {
        Self { material: true, layer: true, behind_transparent: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub taus: Vec<Tau>,
    pub categories: CategoryFlags,
    pub sampling: Sampling,
    pub subset: Subset,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            taus: vec![Tau::Finite(1.0), Tau::Finite(3.0), Tau::Finite(5.0), Tau::Infinite],
            categories: CategoryFlags::default(),
            sampling: Sampling::default(),
            subset: Subset::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.taus.is_empty() {
            return Err(MetricsError::InvalidConfig("at least one τ is required".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| matches!(t, Tau::Finite(v) if !(*v > 0.0 && v.is_finite()))) {
            return Err(MetricsError::InvalidConfig(format!("τ must be positive, got {t}")));
        }
        if !self.taus.windows(2).all(|w| Tau::ascending(w[0], w[1])) {
            return Err(MetricsError::InvalidConfig("τ values must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    All,
    Transparent,
    Reflective,
    Diffuse,
    Layer(u32),
    BehindTransparent,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::All => f.write_str("All"),
            Category::Transparent => f.write_str("Transparent"),
            Category::Reflective => f.write_str("Reflective"),
            Category::Diffuse => f.write_str("Diffuse"),
            Category::Layer(m) => write!(f, "Layer {m}"),
            Category::BehindTransparent => f.write_str("Behind Transparent"),
        }
    }
}

pub fn categorize(a: &LayerAnnotation) -> Vec<Category> {
    let material = match a.material {
        MaterialClass::Transparent => Category::Transparent,
        MaterialClass::Reflective => Category::Reflective,
        MaterialClass::Diffuse => Category::Diffuse,
    };
    let mut out = vec![material, Category::Layer(a.layer)];
    if a.layer >= 2 && a.material != MaterialClass::Transparent {
        out.push(Category::BehindTransparent);
    }
    out
}

fn filtered(set: &SceneAnnotationSet, keep: impl Fn(&LayerAnnotation) -> bool) -> SceneAnnotationSet {
    let out = SceneAnnotationSet { annotations: set.annotations.iter().filter(|a| keep(a)).cloned().collect(), ..set.clone() };
    if out.annotations.is_empty() && !set.annotations.is_empty() {
        log::warn!("scene {}: subset is empty", set.scene_id);
    }
    out
}

pub fn first_layer_subset(set: &SceneAnnotationSet) -> SceneAnnotationSet {
    filtered(set, |a| a.layer == 1)
}

pub fn last_layer_subset(set: &SceneAnnotationSet) -> SceneAnnotationSet {
    filtered(set, |a| a.material != MaterialClass::Transparent)
}

pub fn apply_subset(set: &SceneAnnotationSet, subset: Subset) -> SceneAnnotationSet {
    match subset {
        Subset::First => first_layer_subset(set),
        Subset::Last => last_layer_subset(set),
        Subset::All => set.clone(),
    }
}

pub fn epe(errors: &[f64]) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sorted_sum(errors.to_vec()) / errors.len() as f64)
}

/// Order-independent sum.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Whether `n_pred` layers is plausible when the last annotated layer is
/// `m_k`: a transparent last layer may have anything behind it, an opaque one
/// must be the last predicted layer. `n_pred = 0` is never correct.
pub fn layer_count_correct(n_pred: usize, m_k: u32, t_mk: bool) -> bool {
    let m = m_k as usize;
    n_pred >= 1 && if t_mk { n_pred >= m } else { n_pred == m }
}

/// Max-over-layers τ test. `preds[l]` is the prediction for layer `l + 1`.
/// Annotations without flow are ignored.
pub fn tau_accurate(preds: &[FlowVec], gts: &[&LayerAnnotation], tau: Tau) -> Result<bool, MetricsError> {
    let mut ok = true;
    for a in gts {
        let Some(gt) = a.flow else { continue };
        let p = preds.get(a.layer as usize - 1).ok_or(MetricsError::MissingLayer { needed: a.layer, available: preds.len() })?;
        ok &= tau.accepts(p.distance(&gt));
    }
    Ok(ok)
}

/// Evaluation outcome of one annotated pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelOutcome {
    pub pixel: Pixel,
    pub categories: BTreeSet<Category>,
    /// Per annotated layer; `None` where the prediction lacks that layer.
    pub errors: Vec<Option<f64>>,
    pub n_pred: usize,
    pub count_correct: bool,
}

impl PixelOutcome {
    pub fn tau_accurate(&self, tau: Tau) -> bool {
        self.errors.iter().all(|e| e.is_some_and(|e| tau.accepts(e)))
    }

    pub fn count_aware_accurate(&self, tau: Tau) -> bool {
        self.count_correct && self.tau_accurate(tau)
    }
}

/// Layer-`layer` flow at a sub-pixel position. Bilinear sampling uses the
/// valid neighbours only, with renormalized weights.
fn sample(pred: &MultiLayerPrediction, layer: usize, p: Pixel, mode: Sampling) -> Option<FlowVec> {
    let (w, h) = (pred.width as i64, pred.height as i64);
    match mode {
        Sampling::Nearest => {
            let (x, y) = nearest(pred, p);
            pred.get(x, y, layer)
        }
        Sampling::Bilinear => {
            let (x0, y0) = (p.x.floor(), p.y.floor());
            let (fx, fy) = (p.x - x0, p.y - y0);
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (ox, oy, wt) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
                let (x, y) = (x0 as i64 + ox, y0 as i64 + oy);
                if wt == 0.0 || x < 0 || y < 0 || x >= w || y >= h {
                    continue;
                }
                if let Some(f) = pred.get(x as u32, y as u32, layer) {
                    sw += wt;
                    sx += wt * f.dx;
                    sy += wt * f.dy;
                }
            }
            (sw > 0.0).then(|| FlowVec::new(sx / sw, sy / sw))
        }
    }
}

fn nearest(pred: &MultiLayerPrediction, p: Pixel) -> (u32, u32) {
    let x = (p.x + 0.5).floor().clamp(0.0, pred.width as f64 - 1.0);
    let y = (p.y + 0.5).floor().clamp(0.0, pred.height as f64 - 1.0);
    (x as u32, y as u32)
}

/// Evaluates every annotated pixel of one scene (after subsetting).
/// Annotations at the bitwise-same pixel form one multi-layer pixel.
pub fn evaluate_pixels(
    set: &SceneAnnotationSet,
    pred: &MultiLayerPrediction,
    cfg: &EvalConfig,
) -> Result<Vec<PixelOutcome>, MetricsError> {
    let invalid = |message: String| MetricsError::InvalidInput { scene: set.scene_id.clone(), message };
    if (pred.width, pred.height) != set.resolution {
        return Err(invalid(format!(
            "prediction is {}x{}, annotations are {}x{}",
            pred.width, pred.height, set.resolution.0, set.resolution.1
        )));
    }
    let subset = apply_subset(set, cfg.subset);
    let mut groups: BTreeMap<(u64, u64), Vec<&LayerAnnotation>> = BTreeMap::new();
    for a in subset.annotations.iter().filter(|a| a.flow.is_some()) {
        let p = a.pixel;
        if !(p.x >= -0.5 && p.y >= -0.5 && p.x < pred.width as f64 - 0.5 && p.y < pred.height as f64 - 0.5) {
            return Err(invalid(format!("annotation at ({}, {}) lies outside the image", p.x, p.y)));
        }
        groups.entry((p.x.to_bits(), p.y.to_bits())).or_default().push(a);
    }
    Ok(groups
        .into_values()
        .map(|anns| {
            let pixel = anns[0].pixel;
            let (nx, ny) = nearest(pred, pixel);
            let n_pred = pred.layer_count(nx, ny);
            let m_k = anns.iter().map(|a| a.layer).max().expect("non-empty group");
            let t_mk = anns.iter().any(|a| a.layer == m_k && a.transparent);
            let errors = anns
                .iter()
                .map(|a| {
                    let l = a.layer as usize - 1;
                    if l >= n_pred {
                        return None;
                    }
                    sample(pred, l, pixel, cfg.sampling).map(|f| f.distance(&a.flow.expect("filtered")))
                })
                .collect();
            let mut categories: BTreeSet<Category> = anns.iter().flat_map(|a| categorize(a)).collect();
            categories.insert(Category::All);
            PixelOutcome { pixel, categories, errors, n_pred, count_correct: layer_count_correct(n_pred, m_k, t_mk) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCell {
    pub tau: Tau,
    pub total: u64,
    pub bad: u64,
    pub count_aware_bad: u64,
}

fn percent(n: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| 100.0 * n as f64 / total as f64)
}

impl TauCell {
    pub fn bad_percent(&self) -> Option<f64> {
        percent(self.bad, self.total)
    }

    pub fn count_aware_bad_percent(&self) -> Option<f64> {
        percent(self.count_aware_bad, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: Category,
    pub pixels: u64,
    /// Mean over the per-layer errors that could be measured.
    pub epe: Option<f64>,
    pub epe_samples: u64,
    pub cells: Vec<TauCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subset: Subset,
    pub taus: Vec<Tau>,
    pub rows: Vec<CategoryRow>,
}

#[derive(Default)]
struct Accumulator {
    pixels: u64,
    bad: Vec<u64>,
    count_aware_bad: Vec<u64>,
    errors: Vec<f64>,
}

/// Evaluates a dataset of `(annotations, prediction)` scenes.
pub fn evaluate(scenes: &[(&SceneAnnotationSet, &MultiLayerPrediction)], cfg: &EvalConfig) -> Result<MetricReport, MetricsError> {
    cfg.validate()?;
    let per_scene = scenes.par_iter().map(|(set, pred)| evaluate_pixels(set, pred, cfg)).collect::<Result<Vec<_>, _>>()?;
    let outcomes: Vec<&PixelOutcome> = per_scene.iter().flatten().collect();
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }

    let mut rows = vec![Category::All];
    if cfg.categories.material {
        rows.extend([Category::Transparent, Category::Reflective, Category::Diffuse]);
    }
    if cfg.categories.layer {
        let max_layer = outcomes
            .iter()
            .flat_map(|o| o.categories.iter())
            .filter_map(|c| if let Category::Layer(m) = c { Some(*m) } else { None })
            .max()
            .unwrap_or(1);
        rows.extend((1..=max_layer).map(Category::Layer));
    }
    if cfg.categories.behind_transparent {
        rows.push(Category::BehindTransparent);
    }

    let nt = cfg.taus.len();
    let mut acc: BTreeMap<Category, Accumulator> = rows
        .iter()
        .map(|&c| (c, Accumulator { bad: vec![0; nt], count_aware_bad: vec![0; nt], ..Default::default() }))
        .collect();
    for o in &outcomes {
        for c in &o.categories {
            let Some(a) = acc.get_mut(c) else { continue };
            a.pixels += 1;
            for (k, &tau) in cfg.taus.iter().enumerate() {
                let ok = o.tau_accurate(tau);
                a.bad[k] += u64::from(!ok);
                a.count_aware_bad[k] += u64::from(!(ok && o.count_correct));
            }
            a.errors.extend(o.errors.iter().flatten());
        }
    }

    let rows = rows
        .into_iter()
        .map(|category| {
            let a = acc.remove(&category).expect("row accumulator");
            let epe_samples = a.errors.len() as u64;
            CategoryRow {
                category,
                pixels: a.pixels,
                epe: epe(&a.errors).ok(),
                epe_samples,
                cells: cfg
                    .taus
                    .iter()
                    .enumerate()
                    .map(|(k, &tau)| TauCell { tau, total: a.pixels, bad: a.bad[k], count_aware_bad: a.count_aware_bad[k] })
                    .collect(),
            }
        })
        .collect();
    Ok(MetricReport { subset: cfg.subset, taus: cfg.taus.clone(), rows })
}

fn all_row_cell(
    scenes: &[(&SceneAnnotationSet, &MultiLayerPrediction)],
    tau: Tau,
    cfg: &EvalConfig,
) -> Result<TauCell, MetricsError> {
    let cfg = EvalConfig { taus: vec![tau], categories: CategoryFlags { material: false, layer: false, behind_transparent: false }, ..cfg.clone() };
    Ok(evaluate(scenes, &cfg)?.rows.swap_remove(0).cells.swap_remove(0))
}

/// Percentage of annotated pixels that are not τ-accurate.
pub fn multilayer_bad_tau(
    scenes: &[(&SceneAnnotationSet, &MultiLayerPrediction)],
    tau: Tau,
    cfg: &EvalConfig,
) -> Result<f64, MetricsError> {
    Ok(all_row_cell(scenes, tau, cfg)?.bad_percent().expect("non-empty"))
}

/// Percentage of annotated pixels with a wrong layer count or an inaccurate
/// flow.
pub fn count_aware_bad_tau(
    scenes: &[(&SceneAnnotationSet, &MultiLayerPrediction)],
    tau: Tau,
    cfg: &EvalConfig,
) -> Result<f64, MetricsError> {
    Ok(all_row_cell(scenes, tau, cfg)?.count_aware_bad_percent().expect("non-empty"))
}

/// Replicates layer 1 of `pred` onto the layers that have a ground-truth
/// annotation at each pixel, so a single-layer model is scored as if it had
/// predicted every annotated layer. Pixels without annotations keep one layer.
pub fn workaround_for(pred: &MultiLayerPrediction, sets: &[&SceneAnnotationSet]) -> MultiLayerPrediction {
    let mut needed = vec![1usize; pred.pixel_count()];
    for a in sets.iter().flat_map(|s| s.annotations.iter()) {
        if a.pixel.is_finite() {
            let (x, y) = nearest(pred, a.pixel);
            let i = y as usize * pred.width as usize + x as usize;
            needed[i] = needed[i].max(a.layer as usize);
        }
    }
    let n = needed.iter().copied().max().unwrap_or(1).min(crate::prediction::MAX_PREDICTION_LAYERS);
    let mut out = single_layer_workaround(pred, n);
    let px = pred.pixel_count();
    for (i, &k) in needed.iter().enumerate() {
        for l in k.min(n)..n {
            out.dx[l * px + i] = 0.0;
            out.dy[l * px + i] = 0.0;
            out.valid[l * px + i] = 0;
        }
    }
    out
}

const EMPTY_CELL: &str = "—";

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| EMPTY_CELL.to_string(), |v| format!("{v:.2}"))
}

impl MetricReport {
    pub fn row(&self, category: Category) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    fn headers(&self, bad: &str, count_aware: &str) -> Vec<String> {
        let mut h: Vec<String> = self.taus.iter().map(|t| format!("{bad}{t}")).collect();
        h.extend(self.taus.iter().map(|t| format!("{count_aware}{t}")));
        h
    }

    /// Aligned text table, two decimals, `—` for empty cells.
    pub fn render_text(&self) -> String {
        let mut header = vec!["Category".to_string(), "Pixels".into(), "EPE".into()];
        header.extend(self.headers("bad-", "cbad-"));
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![r.category.to_string(), r.pixels.to_string(), fmt_cell(r.epe)];
            line.extend(r.cells.iter().map(|c| fmt_cell(c.bad_percent())));
            line.extend(r.cells.iter().map(|c| fmt_cell(c.count_aware_bad_percent())));
            table.push(line);
        }
        let ncol = table[0].len();
        let widths: Vec<usize> = (0..ncol).map(|i| table.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("subset: {}\n", self.subset);
        for line in &table {
            let mut s = String::new();
            for (i, cell) in line.iter().enumerate() {
                let pad = widths[i] - cell.chars().count();
                if i == 0 {
                    s.push_str(cell);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str("  ");
                    s.push_str(&" ".repeat(pad));
                    s.push_str(cell);
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        }
        out
    }

    /// CSV with the same cells; empty cells are left blank.
    pub fn render_csv(&self) -> String {
        let mut header = vec!["subset".to_string(), "category".into(), "pixels".into(), "epe".into()];
        header.extend(self.headers("bad_", "count_aware_bad_"));
        let mut out = header.join(",") + "\n";
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
        for r in &self.rows {
            let mut line = vec![self.subset.to_string(), r.category.to_string(), r.pixels.to_string(), cell(r.epe)];
            line.extend(r.cells.iter().map(|c| cell(c.bad_percent())));
            line.extend(r.cells.iter().map(|c| cell(c.count_aware_bad_percent())));
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}
