//! A small deterministic ray tracer for multi-layer ground truth.
//!
//! Ground-truth rays count every air-to-surface crossing of see-through
//! glass as a layer, bend at glass interfaces by Snell's law and stop at the
//! first opaque (diffuse, metal or rough glass) surface. Reflections are
//! never followed for ground truth; a ray that would only reflect (total
//! internal reflection) simply ends.
//!
//! Flow is "visually aligned": the T1 pixel is the one whose layer-ℓ ray
//! actually hits the moved surface point, so refraction is accounted for.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{Frame, LayerAnnotation, MaterialClass, SceneAnnotationSet};
use crate::geometry::{project, FlowVec, GeometryError, Pixel, Point3, Pose};
use crate::scene::{Camera, MaterialKind, Primitive, SceneError, SceneSpec, Shape, TRANSPARENCY_THRESHOLD};

/// Upper bound on recorded layers per ray.
pub const MAX_LAYERS: usize = 8;
/// Central-difference step for the flow Jacobian, pixels.
pub const FD_STEP: f64 = 0.25;
/// Image-space convergence tolerance of the flow solve, pixels.
pub const FLOW_TOLERANCE: f64 = 1e-3;
pub const FLOW_MAX_ITERATIONS: usize = 25;
const T_MIN: f64 = 1e-9;
const RGB_MAX_DEPTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl RenderError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Scene(e) => e.code(),
            Self::Geometry(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("total internal reflection")]
pub struct TotalInternalReflection;

/// Snell refraction of unit `dir` at a surface with unit `normal` (either
/// orientation), where `ior_ratio = n_incident / n_transmitted`.
pub fn refract(dir: &Vector3<f64>, normal: &Vector3<f64>, ior_ratio: f64) -> Result<Vector3<f64>, TotalInternalReflection> {
    let mut n = *normal;
    let mut cos_i = -dir.dot(&n);
    if cos_i < 0.0 {
        n = -n;
        cos_i = -cos_i;
    }
    let sin2_t = ior_ratio * ior_ratio * (1.0 - cos_i * cos_i).max(0.0);
    if sin2_t > 1.0 {
        return Err(TotalInternalReflection);
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    let t = dir * ior_ratio + n * (ior_ratio * cos_i - cos_t);
    Ok(t / t.norm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerHit {
    pub layer: u32,
    pub object_id: u32,
    /// Hit point in the object's rest frame (its T0 placement).
    pub local_point: Point3,
    pub world_point: Point3,
    pub transparent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Escaped,
    /// Stopped at an opaque surface.
    Terminal,
    TotalInternalReflection,
    MaxLayers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracedPath {
    pub hits: Vec<LayerHit>,
    /// Every straight piece of the path, starting with the input ray.
    pub segments: Vec<Ray>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Glass rougher than this is opaque for layering.
    pub transparency_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { transparency_threshold: TRANSPARENCY_THRESHOLD }
    }
}

fn placement(prim: &Primitive, frame: Frame) -> Pose {
    match frame {
        Frame::T0 => Pose::identity(),
        Frame::T1 => prim.motion,
    }
}

#[derive(Debug, Clone, Copy)]
struct SurfaceHit {
    t: f64,
    /// Outward (solids) or `edge_u × edge_v` (quads), world frame.
    normal: Vector3<f64>,
    local: Point3,
}

fn intersect_shape(shape: &Shape, ray: &Ray, t_min: f64) -> Option<(f64, Vector3<f64>)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let c = Point3::from(center);
            let oc = ray.origin - c;
            let b = oc.dot(&ray.dir);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > t_min)?;
            Some((t, (ray.at(t) - c) / radius))
        }
        Shape::Quad { corner, edge_u, edge_v } => {
            let (u, v) = (Vector3::from(edge_u), Vector3::from(edge_v));
            let n = u.cross(&v);
            let denom = ray.dir.dot(&n);
            if denom.abs() < 1e-300 {
                return None;
            }
            let t = (Point3::from(corner) - ray.origin).dot(&n) / denom;
            if !(t > t_min) {
                return None;
            }
            let w = ray.at(t) - Point3::from(corner);
            let (uu, uv, vv) = (u.dot(&u), u.dot(&v), v.dot(&v));
            let (wu, wv) = (w.dot(&u), w.dot(&v));
            let det = uu * vv - uv * uv;
            let a = (vv * wu - uv * wv) / det;
            let b = (uu * wv - uv * wu) / det;
            if !((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)) {
                return None;
            }
            Some((t, n.normalize()))
        }
        Shape::Box { min, max } => {
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut ax_near, mut ax_far) = (0, 0);
            for i in 0..3 {
                let (o, d) = (ray.origin[i], ray.dir[i]);
                if d == 0.0 {
                    if o < min[i] || o > max[i] {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((min[i] - o) / d, (max[i] - o) / d);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    ax_near = i;
                }
                if t1 < t_far {
                    t_far = t1;
                    ax_far = i;
                }
            }
            if t_far < t_near || !(t_far > t_min) {
                return None;
            }
            let axis_normal = |axis: usize, sign: f64| {
                let mut n = Vector3::zeros();
                n[axis] = sign;
                n
            };
            if t_near > t_min {
                Some((t_near, axis_normal(ax_near, -ray.dir[ax_near].signum())))
            } else {
                Some((t_far, axis_normal(ax_far, ray.dir[ax_far].signum())))
            }
        }
    }
}

fn intersect_primitive(prim: &Primitive, frame: Frame, ray: &Ray, t_min: f64) -> Option<SurfaceHit> {
    let place = placement(prim, frame);
    let inv = place.inverse();
    let local_ray = Ray { origin: inv.transform(&ray.origin), dir: inv.rotation * ray.dir };
    let (t, n_local) = intersect_shape(&prim.shape, &local_ray, t_min)?;
    Some(SurfaceHit { t, normal: place.rotation * n_local, local: local_ray.at(t) })
}

fn nearest_hit(scene: &SceneSpec, frame: Frame, ray: &Ray, exclude: Option<usize>) -> Option<(usize, SurfaceHit)> {
    let mut best: Option<(usize, SurfaceHit)> = None;
    for (i, prim) in scene.primitives.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        if let Some(h) = intersect_primitive(prim, frame, ray, T_MIN) {
            if best.as_ref().is_none_or(|(_, b)| h.t < b.t) {
                best = Some((i, h));
            }
        }
    }
    best
}

/// Follows a ground-truth ray through the scene.
pub fn trace_path(scene: &SceneSpec, frame: Frame, ray: Ray, config: &RenderConfig) -> TracedPath {
    let mut hits = Vec::new();
    let mut segments = vec![ray];
    let mut ray = ray;
    let mut exclude = None;
    loop {
        let Some((idx, hit)) = nearest_hit(scene, frame, &ray, exclude) else {
            return TracedPath { hits, segments, termination: Termination::Escaped };
        };
        if hits.len() == MAX_LAYERS {
            return TracedPath { hits, segments, termination: Termination::MaxLayers };
        }
        let prim = &scene.primitives[idx];
        let transparent = prim.material.is_transparent(config.transparency_threshold);
        let point = ray.at(hit.t);
        hits.push(LayerHit {
            layer: hits.len() as u32 + 1,
            object_id: prim.object_id,
            local_point: hit.local,
            world_point: point,
            transparent,
        });
        if !transparent {
            return TracedPath { hits, segments, termination: Termination::Terminal };
        }
        if !prim.shape.is_solid() {
            // A sheet has no thickness, so the ray passes straight through.
            ray = Ray { origin: point, dir: ray.dir };
            exclude = Some(idx);
            segments.push(ray);
            continue;
        }
        let ior = prim.material.ior;
        let Ok(inside_dir) = refract(&ray.dir, &hit.normal, 1.0 / ior) else {
            return TracedPath { hits, segments, termination: Termination::TotalInternalReflection };
        };
        let inside = Ray { origin: point, dir: inside_dir };
        segments.push(inside);
        let Some(exit) = intersect_primitive(prim, frame, &inside, T_MIN) else {
            // Grazing corner hit: treat the solid as infinitely thin here.
            ray = inside;
            exclude = Some(idx);
            continue;
        };
        let exit_point = inside.at(exit.t);
        match refract(&inside_dir, &exit.normal, ior) {
            Ok(out_dir) => {
                ray = Ray { origin: exit_point, dir: out_dir };
                exclude = Some(idx);
                segments.push(ray);
            }
            Err(TotalInternalReflection) => {
                return TracedPath { hits, segments, termination: Termination::TotalInternalReflection };
            }
        }
    }
}

/// Camera ray through `pixel`, in world coordinates.
pub fn primary_ray(camera: &Camera, pixel: Pixel) -> Result<Ray, GeometryError> {
    let n = camera.intrinsics.pixel_to_normalized(pixel)?;
    let d_cam = Vector3::new(n.x, n.y, 1.0).normalize();
    Ok(Ray { origin: camera.center(), dir: camera.pose.rotation.transpose() * d_cam })
}

pub fn trace_layers(scene: &SceneSpec, frame: Frame, pixel: Pixel) -> Vec<LayerHit> {
    trace_layers_with(scene, frame, pixel, &RenderConfig::default())
}

pub fn trace_layers_with(scene: &SceneSpec, frame: Frame, pixel: Pixel, config: &RenderConfig) -> Vec<LayerHit> {
    match primary_ray(scene.camera(frame), pixel) {
        Ok(ray) => trace_path(scene, frame, ray, config).hits,
        Err(_) => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occluded {
    /// The layer-ℓ hit at the T1 pixel belongs to another object or the ray
    /// has fewer layers there.
    LayerMismatch,
    NoConvergence,
    OutOfView,
}

/// T0 → T1 flow of the surface point behind `hit` seen from `pixel`.
pub fn solve_flow(scene: &SceneSpec, pixel: Pixel, hit: &LayerHit) -> Result<FlowVec, Occluded> {
    solve_flow_with(scene, pixel, hit, &RenderConfig::default())
}

pub fn solve_flow_with(scene: &SceneSpec, pixel: Pixel, hit: &LayerHit, config: &RenderConfig) -> Result<FlowVec, Occluded> {
    let prim = scene.primitive(hit.object_id).ok_or(Occluded::LayerMismatch)?;
    let target = prim.motion.transform(&hit.local_point);
    let (cam0, cam1) = (&scene.camera_t0, &scene.camera_t1);
    let layer = hit.layer as usize;

    let residual = |q: Pixel| -> Option<Vector3<f64>> {
        let hits = trace_layers_with(scene, Frame::T1, q, config);
        let h = hits.get(layer - 1).filter(|h| h.object_id == hit.object_id)?;
        Some(h.world_point - target)
    };

    let p1 = project(&cam1.intrinsics, &cam1.pose, &target).map_err(|_| Occluded::OutOfView)?;
    let p0 = project(&cam0.intrinsics, &cam0.pose, &hit.world_point).map_err(|_| Occluded::OutOfView)?;
    // Shift by the refraction-free motion; exact when nothing bends the ray
    // and exactly zero when nothing moves.
    let mut q = Pixel::new(pixel.x + (p1.x - p0.x), pixel.y + (p1.y - p0.y));

    let depth = (target - cam1.center()).norm();
    let e_tol = 10.0 * FLOW_TOLERANCE * depth / cam1.intrinsics.fx.min(cam1.intrinsics.fy);
    let (w, h) = (scene.image_size.0 as f64, scene.image_size.1 as f64);
    let in_view = |q: Pixel| q.x >= -0.5 && q.y >= -0.5 && q.x < w - 0.5 && q.y < h - 0.5;

    let mut lambda = 1e-2;
    let mut e = residual(q).ok_or(Occluded::LayerMismatch)?;
    for _ in 0..FLOW_MAX_ITERATIONS {
        if e.norm() == 0.0 {
            return if in_view(q) { Ok(pixel.flow_to(&q)) } else { Err(Occluded::OutOfView) };
        }
        let col = |dx: f64, dy: f64| -> Option<Vector3<f64>> {
            let a = residual(Pixel::new(q.x + dx, q.y + dy))?;
            let b = residual(Pixel::new(q.x - dx, q.y - dy))?;
            Some((a - b) / (2.0 * FD_STEP))
        };
        let (jx, jy) = match (col(FD_STEP, 0.0), col(0.0, FD_STEP)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Occluded::LayerMismatch),
        };
        let jtj = Matrix2::new(jx.dot(&jx), jx.dot(&jy), jx.dot(&jy), jy.dot(&jy));
        let jte = Vector2::new(jx.dot(&e), jy.dot(&e));
        let gn = jtj.try_inverse().map(|inv| -(inv * jte));
        if let Some(step) = gn {
            if step.norm() < FLOW_TOLERANCE && e.norm() <= e_tol {
                // Take the final Newton step; it is far below tolerance.
                let q_final = Pixel::new(q.x + step.x, q.y + step.y);
                let q_out = if residual(q_final).is_some() { q_final } else { q };
                return if in_view(q_out) { Ok(pixel.flow_to(&q_out)) } else { Err(Occluded::OutOfView) };
            }
        }
        let damped = Matrix2::new(jtj[(0, 0)] * (1.0 + lambda), jtj[(0, 1)], jtj[(1, 0)], jtj[(1, 1)] * (1.0 + lambda));
        let Some(inv) = damped.try_inverse() else {
            lambda *= 10.0;
            continue;
        };
        let step = -(inv * jte);
        let trial = Pixel::new(q.x + step.x, q.y + step.y);
        match residual(trial) {
            Some(e_new) if e_new.norm() < e.norm() => {
                q = trial;
                e = e_new;
                lambda /= 10.0;
            }
            _ => lambda *= 10.0,
        }
    }
    Err(Occluded::NoConvergence)
}

/// Ground truth for one pixel: its T0 layer hits and per-layer flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGroundTruth {
    pub hits: Vec<LayerHit>,
    /// Parallel to `hits`; `None` where the point is occluded at T1.
    pub flows: Vec<Option<FlowVec>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMaps {
    pub width: u32,
    pub height: u32,
    /// Row-major.
    pub pixels: Vec<PixelGroundTruth>,
}

impl GroundTruthMaps {
    pub fn at(&self, x: u32, y: u32) -> &PixelGroundTruth {
        &self.pixels[(y * self.width + x) as usize]
    }

    pub fn max_layers(&self) -> usize {
        self.pixels.iter().map(|p| p.hits.len()).max().unwrap_or(0)
    }

    /// Per-pixel presence of a layer-`layer` hit (1-based).
    pub fn layer_mask(&self, layer: usize) -> Vec<bool> {
        self.pixels.iter().map(|p| p.hits.len() >= layer).collect()
    }

    /// Flow validity per pixel for one layer (1-based).
    pub fn flow_mask(&self, layer: usize) -> Vec<bool> {
        self.pixels.iter().map(|p| p.flows.get(layer - 1).is_some_and(|f| f.is_some())).collect()
    }
}

pub fn render_pixel(scene: &SceneSpec, x: u32, y: u32, config: &RenderConfig) -> PixelGroundTruth {
    let pixel = Pixel::new(x as f64, y as f64);
    let hits = trace_layers_with(scene, Frame::T0, pixel, config);
    let flows = hits.iter().map(|h| solve_flow_with(scene, pixel, h, config).ok()).collect();
    PixelGroundTruth { hits, flows }
}

/// Dense multi-layer ground truth at the scene's image size. Rows are
/// rendered in parallel on the current rayon pool; output does not depend on
/// the number of workers.
pub fn render_gt(scene: &SceneSpec, config: &RenderConfig) -> Result<GroundTruthMaps, RenderError> {
    scene.validate()?;
    let (w, h) = scene.image_size;
    let rows: Vec<Vec<PixelGroundTruth>> =
        (0..h).into_par_iter().map(|y| (0..w).map(|x| render_pixel(scene, x, y, config)).collect()).collect();
    Ok(GroundTruthMaps { width: w, height: h, pixels: rows.into_iter().flatten().collect() })
}

fn material_class(scene: &SceneSpec, hit: &LayerHit) -> MaterialClass {
    if hit.transparent {
        return MaterialClass::Transparent;
    }
    match scene.primitive(hit.object_id).map(|p| p.material.kind) {
        Some(MaterialKind::Metal) => MaterialClass::Reflective,
        _ => MaterialClass::Diffuse,
    }
}

/// One annotation per pixel and layer with valid flow. 3D points are in the
/// T0 camera frame.
pub fn annotations_from_gt(scene: &SceneSpec, maps: &GroundTruthMaps, scene_id: &str) -> SceneAnnotationSet {
    let cam = &scene.camera_t0.pose;
    let mut annotations = Vec::new();
    for (i, px) in maps.pixels.iter().enumerate() {
        let pixel = Pixel::new((i as u32 % maps.width) as f64, (i as u32 / maps.width) as f64);
        for (hit, flow) in px.hits.iter().zip(&px.flows) {
            let Some(flow) = flow else { continue };
            let p = cam.transform(&hit.world_point);
            let material = material_class(scene, hit);
            annotations.push(LayerAnnotation {
                pixel,
                flow: Some(*flow),
                disparity: None,
                point3d: Some([p.x, p.y, p.z]),
                layer: hit.layer,
                material,
                transparent: material == MaterialClass::Transparent,
                tag_id: None,
                corner_index: None,
            });
        }
    }
    SceneAnnotationSet { scene_id: scene_id.to_string(), annotations, rig: None, resolution: (maps.width, maps.height) }
}

/// Linear RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![[0.0; 3]; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[(y * self.width + x) as usize]
    }

    /// Luma, row-major.
    pub fn to_gray(&self) -> Vec<f32> {
        self.data.iter().map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
    }
}

fn checker_factor(size: Option<f64>, local: &Point3) -> f64 {
    match size {
        Some(s) => {
            let k = (local.x / s).floor() + (local.y / s).floor() + (local.z / s).floor();
            if k.rem_euclid(2.0) < 1.0 {
                1.0
            } else {
                0.35
            }
        }
        None => 1.0,
    }
}

fn reflect(d: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    d - n * (2.0 * d.dot(n))
}

fn direct_light(scene: &SceneSpec, frame: Frame, point: &Point3, normal: &Vector3<f64>, config: &RenderConfig) -> [f64; 3] {
    let mut acc = scene.env_color;
    for light in &scene.lights {
        let to = Point3::from(light.position) - point;
        let dist = to.norm();
        if dist == 0.0 {
            continue;
        }
        let l = to / dist;
        let ndl = normal.dot(&l);
        if ndl <= 0.0 {
            continue;
        }
        // Opaque blockers cast shadows; see-through glass does not.
        let shadow_ray = Ray { origin: *point, dir: l };
        let blocked = scene.primitives.iter().any(|p| {
            !p.material.is_transparent(config.transparency_threshold)
                && intersect_primitive(p, frame, &shadow_ray, 1e-6).is_some_and(|h| h.t < dist)
        });
        if !blocked {
            for (a, i) in acc.iter_mut().zip(light.intensity) {
                *a += i * ndl;
            }
        }
    }
    acc
}

fn shade(scene: &SceneSpec, frame: Frame, ray: &Ray, depth: usize, exclude: Option<usize>, config: &RenderConfig) -> [f64; 3] {
    if depth >= RGB_MAX_DEPTH {
        return scene.env_color;
    }
    let Some((idx, hit)) = nearest_hit(scene, frame, ray, exclude) else {
        return scene.env_color;
    };
    let prim = &scene.primitives[idx];
    let m = &prim.material;
    let point = ray.at(hit.t);
    let facing = if hit.normal.dot(&ray.dir) > 0.0 { -hit.normal } else { hit.normal };
    let tex = checker_factor(m.checker, &hit.local);
    let base = m.albedo.map(|a| a * tex);
    let mul = |a: [f64; 3], b: [f64; 3]| [a[0] * b[0], a[1] * b[1], a[2] * b[2]];
    let mix = |a: [f64; 3], b: [f64; 3], t: f64| [a[0] * (1.0 - t) + b[0] * t, a[1] * (1.0 - t) + b[1] * t, a[2] * (1.0 - t) + b[2] * t];

    let reflected = || {
        let r = Ray { origin: point, dir: reflect(&ray.dir, &facing) };
        shade(scene, frame, &r, depth + 1, Some(idx), config)
    };
    match m.kind {
        MaterialKind::Metal => {
            let diffuse = mul(base, direct_light(scene, frame, &point, &facing, config));
            mix(mul(base, reflected()), diffuse, m.roughness)
        }
        MaterialKind::Glass if m.is_transparent(config.transparency_threshold) => {
            let transmitted = if prim.shape.is_solid() {
                refract(&ray.dir, &hit.normal, 1.0 / m.ior).ok().and_then(|inside_dir| {
                    let inside = Ray { origin: point, dir: inside_dir };
                    let exit = intersect_primitive(prim, frame, &inside, T_MIN)?;
                    let out = refract(&inside_dir, &exit.normal, m.ior).ok()?;
                    Some(shade(scene, frame, &Ray { origin: inside.at(exit.t), dir: out }, depth + 1, Some(idx), config))
                })
            } else {
                Some(shade(scene, frame, &Ray { origin: point, dir: ray.dir }, depth + 1, Some(idx), config))
            };
            let refl = reflected();
            match transmitted {
                Some(t) => mix(mul(m.albedo, t), refl, 0.1),
                None => refl,
            }
        }
        _ => mul(base, direct_light(scene, frame, &point, &facing, config)),
    }
}

/// Whitted-style preview render: direct lighting with hard shadows, mirror
/// reflections on metal and refraction through glass. Linear RGB.
pub fn render_rgb(scene: &SceneSpec, frame: Frame, config: &RenderConfig) -> Result<RgbImage, RenderError> {
    scene.validate()?;
    let (w, h) = scene.image_size;
    let cam = scene.camera(frame);
    let rows: Vec<Vec<[f32; 3]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| match primary_ray(cam, Pixel::new(x as f64, y as f64)) {
                    Ok(ray) => shade(scene, frame, &ray, 0, None, config).map(|c| c as f32),
                    Err(_) => [0.0; 3],
                })
                .collect()
        })
        .collect();
    Ok(RgbImage { width: w, height: h, data: rows.into_iter().flatten().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::scene::{toy_two_layer, Light, Material};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera_at(x: f64) -> Camera {
        Camera {
            pose: Pose { rotation: Matrix3::identity(), translation: Vector3::new(-x, 0.0, 0.0) },
            intrinsics: CameraIntrinsics::pinhole(64.0, 64.0, 32.0, 32.0),
        }
    }

    fn wall(id: u32) -> Primitive {
        Primitive {
            object_id: id,
            shape: Shape::Quad { corner: [-4.0, -4.0, 4.0], edge_u: [8.0, 0.0, 0.0], edge_v: [0.0, 8.0, 0.0] },
            material: Material::diffuse([0.5, 0.5, 0.5]),
            motion: Pose::identity(),
        }
    }

    fn scene_with(primitives: Vec<Primitive>, t1: f64) -> SceneSpec {
        SceneSpec {
            primitives,
            lights: vec![],
            env_color: [1.0, 1.0, 1.0],
            camera_t0: camera_at(0.0),
            camera_t1: camera_at(t1),
            image_size: (64, 64),
            camera_candidates: vec![],
            seed: 0,
        }
    }

    #[test]
    fn normal_incidence_is_unchanged() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        for n in [1.0, 1.33, 1.5, 2.4] {
            let t = refract(&d, &Vector3::new(0.0, 0.0, -1.0), 1.0 / n).unwrap();
            assert!((t - d).norm() < 1e-15);
        }
    }

    #[test]
    fn snell_at_45_degrees() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let t = refract(&Vector3::new(s, 0.0, s), &Vector3::new(0.0, 0.0, -1.0), 1.0 / 1.5).unwrap();
        let theta_t = t.x.atan2(t.z).to_degrees();
        let expect = (45f64.to_radians().sin() / 1.5).asin().to_degrees();
        assert!((theta_t - expect).abs() < 1e-12, "{theta_t}");
        assert!((theta_t - 28.1255).abs() < 1e-4);
    }

    #[test]
    fn beyond_critical_angle_is_tir() {
        let a = 60f64.to_radians();
        let d = Vector3::new(a.sin(), 0.0, a.cos());
        assert_eq!(refract(&d, &Vector3::new(0.0, 0.0, 1.0), 1.5), Err(TotalInternalReflection));
    }

    #[test]
    fn diffuse_wall_gives_single_opaque_layer() {
        let scene = scene_with(vec![wall(7)], 0.0);
        let hits = trace_layers(&scene, Frame::T0, Pixel::new(32.0, 32.0));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].layer, 1);
        assert!(!hits[0].transparent);
        assert_eq!(hits[0].object_id, 7);
    }

    #[test]
    fn glass_sheet_over_wall_gives_two_layers() {
        let sheet = Primitive {
            object_id: 1,
            shape: Shape::Quad { corner: [-1.0, -1.0, 2.0], edge_u: [2.0, 0.0, 0.0], edge_v: [0.0, 2.0, 0.0] },
            material: Material::glass(1.5, 0.0),
            motion: Pose::identity(),
        };
        let scene = scene_with(vec![sheet, wall(2)], 0.0);
        let hits = trace_layers(&scene, Frame::T0, Pixel::new(30.0, 35.0));
        assert_eq!(hits.len(), 2);
        assert!(hits[0].transparent && hits[0].layer == 1);
        assert!(!hits[1].transparent && hits[1].layer == 2);
    }

    #[test]
    fn rough_glass_is_terminal() {
        let mut scene = toy_two_layer();
        scene.primitives[0].material.roughness = 0.3;
        let hits = trace_layers(&scene, Frame::T0, Pixel::new(32.0, 32.0));
        assert_eq!(hits.len(), 1);
        assert!(!hits[0].transparent);
    }

    #[test]
    fn metal_stops_the_ray() {
        let mut scene = toy_two_layer();
        scene.primitives[0].material = Material::metal([0.9; 3], 0.0);
        let path = trace_path(&scene, Frame::T0, primary_ray(&scene.camera_t0, Pixel::new(32.0, 32.0)).unwrap(), &RenderConfig::default());
        assert_eq!(path.hits.len(), 1);
        assert_eq!(path.termination, Termination::Terminal);
    }

    #[test]
    fn glass_stack_caps_at_max_layers() {
        let sheets: Vec<Primitive> = (0..12)
            .map(|i| Primitive {
                object_id: i + 1,
                shape: Shape::Quad { corner: [-1.0, -1.0, 1.0 + 0.1 * i as f64], edge_u: [2.0, 0.0, 0.0], edge_v: [0.0, 2.0, 0.0] },
                material: Material::glass(1.5, 0.0),
                motion: Pose::identity(),
            })
            .collect();
        let scene = scene_with(sheets, 0.0);
        let path = trace_path(&scene, Frame::T0, primary_ray(&scene.camera_t0, Pixel::new(32.0, 32.0)).unwrap(), &RenderConfig::default());
        assert_eq!(path.hits.len(), MAX_LAYERS);
        assert_eq!(path.termination, Termination::MaxLayers);
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let mut scene = toy_two_layer();
        scene.camera_t1 = scene.camera_t0;
        let maps = render_gt(&scene, &RenderConfig::default()).unwrap();
        let mut valid = 0;
        for p in &maps.pixels {
            for f in p.flows.iter().flatten() {
                assert_eq!(*f, FlowVec::ZERO);
                valid += 1;
            }
        }
        assert!(valid > 64 * 64);
    }

    #[test]
    fn refraction_free_flow_is_projection_difference() {
        let mut scene = scene_with(vec![wall(1)], 0.07);
        scene.primitives[0].motion = Pose { rotation: crate::geometry::rotation_from_vector(&Vector3::new(0.01, -0.02, 0.015)), translation: Vector3::new(0.02, -0.01, 0.05) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pixel = Pixel::new(rng.random_range(5.0..59.0), rng.random_range(5.0..59.0));
            let hits = trace_layers(&scene, Frame::T0, pixel);
            let f = solve_flow(&scene, pixel, &hits[0]).unwrap();
            let target = scene.primitives[0].motion.transform(&hits[0].local_point);
            let c1 = &scene.camera_t1;
            let expect = project(&c1.intrinsics, &c1.pose, &target).unwrap();
            assert!((pixel.x + f.dx - expect.x).abs() < 1e-9 && (pixel.y + f.dy - expect.y).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_occluder_yields_occlusion() {
        // A small opaque card moves in front of the wall point at T1.
        let card = Primitive {
            object_id: 9,
            shape: Shape::Quad { corner: [-0.3, -0.3, 1.0], edge_u: [0.2, 0.0, 0.0], edge_v: [0.0, 0.6, 0.0] },
            material: Material::diffuse([0.2; 3]),
            motion: Pose { rotation: Matrix3::identity(), translation: Vector3::new(0.3, 0.0, 0.0) },
        };
        let scene = scene_with(vec![card, wall(2)], 0.0);
        let pixel = Pixel::new(34.0, 32.0);
        let hits = trace_layers(&scene, Frame::T0, pixel);
        assert_eq!(hits[0].object_id, 2);
        assert!(solve_flow(&scene, pixel, &hits[0]).is_err());
    }

    #[test]
    fn render_gt_matches_per_pixel_and_masks_nest() {
        let scene = toy_two_layer();
        let cfg = RenderConfig::default();
        let maps = render_gt(&scene, &cfg).unwrap();
        assert!(maps.max_layers() >= 2);
        for y in (0..64).step_by(7) {
            for x in (0..64).step_by(5) {
                assert_eq!(*maps.at(x, y), render_pixel(&scene, x, y, &cfg));
            }
        }
        for l in 2..=maps.max_layers() {
            let (outer, inner) = (maps.layer_mask(l - 1), maps.layer_mask(l));
            assert!(outer.iter().zip(&inner).all(|(o, i)| *o || !*i));
        }
        for p in &maps.pixels {
            let opaque: Vec<_> = p.hits.iter().filter(|h| !h.transparent).collect();
            assert!(opaque.len() <= 1);
            if let Some(o) = opaque.first() {
                assert_eq!(o.layer as usize, p.hits.len());
            }
        }
    }

    #[test]
    fn one_pixel_render_matches_ops() {
        let mut scene = toy_two_layer();
        scene = scene.with_image_size((1, 1));
        let maps = render_gt(&scene, &RenderConfig::default()).unwrap();
        let hits = trace_layers(&scene, Frame::T0, Pixel::new(0.0, 0.0));
        assert_eq!(maps.pixels[0].hits, hits);
    }

    #[test]
    fn ambient_only_gray_scene_is_constant() {
        let scene = scene_with(vec![wall(1)], 0.0);
        let img = render_rgb(&scene, Frame::T0, &RenderConfig::default()).unwrap();
        let first = img.data[0];
        assert!(first[0] > 0.0);
        assert!(img.data.iter().all(|c| *c == first));
    }

    #[test]
    fn brightness_is_linear_in_light() {
        let mut scene = toy_two_layer();
        scene.env_color = [0.0; 3];
        let a = render_rgb(&scene, Frame::T0, &RenderConfig::default()).unwrap();
        scene.lights = vec![Light { intensity: [2.0, 2.0, 2.0], ..scene.lights[0] }];
        let b = render_rgb(&scene, Frame::T0, &RenderConfig::default()).unwrap();
        let mut lit = 0;
        for (p, q) in a.data.iter().zip(&b.data) {
            for c in 0..3 {
                assert!((q[c] - 2.0 * p[c]).abs() <= 1e-6 * q[c].abs().max(1e-30));
                lit += (p[c] > 0.0) as usize;
            }
        }
        assert!(lit > 0);
        assert_eq!(b, render_rgb(&scene, Frame::T0, &RenderConfig::default()).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit(v: [f64; 3]) -> Option<Vector3<f64>> {
            Vector3::from(v).try_normalize(1e-3)
        }

        proptest! {
            #[test]
            fn refraction_preserves_tangential_component(
                d in prop::array::uniform3(-1.0f64..1.0),
                n in prop::array::uniform3(-1.0f64..1.0),
                ratio in 0.3f64..3.0,
            ) {
                let (Some(d), Some(n)) = (unit(d), unit(n)) else { return Ok(()) };
                if let Ok(t) = refract(&d, &n, ratio) {
                    prop_assert!((t.norm() - 1.0).abs() < 1e-12);
                    let sin_i = d.cross(&n).norm();
                    let sin_t = t.cross(&n).norm();
                    prop_assert!((ratio * sin_i - sin_t).abs() < 1e-12);
                    // Coplanar with the incoming ray and the normal.
                    prop_assert!(t.dot(&d.cross(&n)).abs() < 1e-12);
                }
            }
        }
    }
}
