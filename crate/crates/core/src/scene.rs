//! Procedural desk-scale scenes and the randomization pipeline: camera
//! selection, lighting, material swaps and flying objects.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, rotation_from_vector, CameraIntrinsics, Point3, Pose};

/// Glass below this roughness is treated as see-through for ground truth.
pub const TRANSPARENCY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("randomization needs at least one camera candidate")]
    EmptyCandidateSet,
    #[error("invalid randomization config: {0}")]
    InvalidConfig(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

impl SceneError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyCandidateSet => "EmptyCandidateSet",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::InvalidScene(_) => "InvalidScene",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaterialKind {
    Diffuse,
    Metal,
    Glass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub kind: MaterialKind,
    pub albedo: [f64; 3],
    pub roughness: f64,
    #[serde(default = "default_ior")]
    pub ior: f64,
    /// Edge length (m) of a 3D checker pattern, for texture in RGB renders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker: Option<f64>,
}

fn default_ior() -> f64 {
    1.0
}

impl Material {
    pub fn diffuse(albedo: [f64; 3]) -> Self {
        Self { kind: MaterialKind::Diffuse, albedo, roughness: 1.0, ior: 1.0, checker: None }
    }

    pub fn metal(albedo: [f64; 3], roughness: f64) -> Self {
        Self { kind: MaterialKind::Metal, albedo, roughness, ior: 1.0, checker: None }
    }

    pub fn glass(ior: f64, roughness: f64) -> Self {
        Self { kind: MaterialKind::Glass, albedo: [0.95, 0.97, 1.0], roughness, ior, checker: None }
    }

    pub fn with_checker(mut self, size: f64) -> Self {
        self.checker = Some(size);
        self
    }

    /// See-through for layering purposes.
    pub fn is_transparent(&self, threshold: f64) -> bool {
        self.kind == MaterialKind::Glass && self.roughness < threshold
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(SceneError::InvalidScene(format!("albedo {:?} outside [0,1]", self.albedo)));
        }
        if !(0.0..=1.0).contains(&self.roughness) {
            return Err(SceneError::InvalidScene(format!("roughness {} outside [0,1]", self.roughness)));
        }
        if self.kind == MaterialKind::Glass && !(1.0..=3.0).contains(&self.ior) {
            return Err(SceneError::InvalidScene(format!("glass ior {} outside [1,3]", self.ior)));
        }
        if let Some(c) = self.checker {
            if !(c > 0.0 && c.is_finite()) {
                return Err(SceneError::InvalidScene("checker size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Shapes are given in world coordinates at T0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Parallelogram `corner + a·edge_u + b·edge_v`, `a, b ∈ [0,1]`; an
    /// infinitely thin sheet.
    Quad { corner: [f64; 3], edge_u: [f64; 3], edge_v: [f64; 3] },
    /// Axis-aligned at T0.
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    pub fn validate(&self) -> Result<(), SceneError> {
        let finite = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Sphere { center, radius } => {
                if !(finite(center) && *radius > 0.0 && radius.is_finite()) {
                    return Err(SceneError::InvalidScene("sphere radius must be positive".into()));
                }
            }
            Shape::Quad { corner, edge_u, edge_v } => {
                let n = Vector3::from(*edge_u).cross(&Vector3::from(*edge_v));
                if !(finite(corner) && n.norm() > 1e-12) {
                    return Err(SceneError::InvalidScene("quad edges are parallel".into()));
                }
            }
            Shape::Box { min, max } => {
                if !(finite(min) && finite(max) && (0..3).all(|i| min[i] < max[i])) {
                    return Err(SceneError::InvalidScene("box min must be below max".into()));
                }
            }
        }
        Ok(())
    }

    /// A point inside (or on) the shape.
    pub fn centroid(&self) -> Point3 {
        match self {
            Shape::Sphere { center, .. } => Point3::from(*center),
            Shape::Quad { corner, edge_u, edge_v } => {
                Point3::from(*corner) + (Vector3::from(*edge_u) + Vector3::from(*edge_v)) * 0.5
            }
            Shape::Box { min, max } => (Point3::from(*min) + Point3::from(*max)) * 0.5,
        }
    }

    /// Convex solids bound a medium; quads are sheets.
    pub fn is_solid(&self) -> bool {
        !matches!(self, Shape::Quad { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub object_id: u32,
    pub shape: Shape,
    pub material: Material,
    /// World-space rigid motion from T0 to T1.
    #[serde(default = "Pose::identity")]
    pub motion: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: [f64; 3],
    pub intensity: [f64; 3],
}

/// A camera pose (world → camera) with its intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl Camera {
    pub fn center(&self) -> Point3 {
        self.pose.center()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPair {
    pub t0: Camera,
    pub t1: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub lights: Vec<Light>,
    pub env_color: [f64; 3],
    pub camera_t0: Camera,
    pub camera_t1: Camera,
    /// Image size the camera intrinsics refer to.
    pub image_size: (u32, u32),
    /// Viewpoints the randomizer may pick from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub camera_candidates: Vec<CameraPair>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.primitives.is_empty() {
            return Err(SceneError::InvalidScene("scene has no primitives".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(SceneError::InvalidScene("image size must be non-zero".into()));
        }
        for cam in [&self.camera_t0, &self.camera_t1] {
            cam.intrinsics.validate().map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        }
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.object_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SceneError::InvalidScene("object ids must be unique".into()));
        }
        for p in &self.primitives {
            p.shape.validate()?;
            p.material.validate()?;
        }
        Ok(())
    }

    pub fn camera(&self, frame: crate::annotation::Frame) -> &Camera {
        match frame {
            crate::annotation::Frame::T0 => &self.camera_t0,
            crate::annotation::Frame::T1 => &self.camera_t1,
        }
    }

    pub fn primitive(&self, object_id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.object_id == object_id)
    }

    /// Same scene rendered at another resolution. Intrinsics scale per axis.
    pub fn with_image_size(&self, size: (u32, u32)) -> SceneSpec {
        if size == self.image_size {
            return self.clone();
        }
        let sx = size.0 as f64 / self.image_size.0 as f64;
        let sy = size.1 as f64 / self.image_size.1 as f64;
        let scale = |c: &Camera| Camera {
            pose: c.pose,
            intrinsics: CameraIntrinsics { fx: c.intrinsics.fx * sx, fy: c.intrinsics.fy * sy, cx: c.intrinsics.cx * sx, cy: c.intrinsics.cy * sy, dist: c.intrinsics.dist },
        };
        SceneSpec {
            camera_t0: scale(&self.camera_t0),
            camera_t1: scale(&self.camera_t1),
            camera_candidates: self.camera_candidates.iter().map(|c| CameraPair { t0: scale(&c.t0), t1: scale(&c.t1) }).collect(),
            image_size: size,
            ..self.clone()
        }
    }

    /// Canonical JSON text (stable field order, shortest round-trip floats).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// True if `point` (world) projects inside the image and lies in front of
/// the camera.
pub fn frustum_contains(camera: &Camera, image_size: (u32, u32), point: &Point3) -> bool {
    match project(&camera.intrinsics, &camera.pose, point) {
        Ok(px) => px.x >= 0.0 && px.y >= 0.0 && px.x < image_size.0 as f64 && px.y < image_size.1 as f64,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizeConfig {
    pub glass_probability: f64,
    pub metal_probability: f64,
    pub flyers_min: u32,
    pub flyers_max: u32,
    /// Flyer depth range in meters along the optical axis.
    pub z_min: f64,
    pub z_max: f64,
    /// Upper bound on sampled glass roughness.
    pub glass_roughness_max: f64,
    pub light_intensity: [f64; 2],
    pub env_intensity: [f64; 2],
    /// Largest flyer displacement between frames, as a fraction of depth.
    pub max_motion: f64,
}

impl Default for RandomizeConfig {
    fn default() -> Self {
        Self {
            glass_probability: 0.3,
            metal_probability: 0.2,
            flyers_min: 2,
            flyers_max: 5,
            z_min: 0.5,
            z_max: 5.0,
            glass_roughness_max: 0.05,
            light_intensity: [0.5, 2.0],
            env_intensity: [0.05, 0.3],
            max_motion: 0.02,
        }
    }
}

impl RandomizeConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.into()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.glass_probability) || !prob(self.metal_probability) {
            return bad("probabilities must lie in [0,1]");
        }
        if self.glass_probability + self.metal_probability > 1.0 {
            return bad("glass and metal probabilities sum above 1");
        }
        if self.flyers_min > self.flyers_max {
            return bad("flyers_min exceeds flyers_max");
        }
        if !(self.z_min > 0.0 && self.z_min <= self.z_max && self.z_max.is_finite()) {
            return bad("depth range must satisfy 0 < z_min ≤ z_max");
        }
        if !(0.0..TRANSPARENCY_THRESHOLD).contains(&self.glass_roughness_max) {
            return bad("glass roughness bound must stay below the transparency threshold");
        }
        for [lo, hi] in [self.light_intensity, self.env_intensity] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad("intensity ranges must satisfy 0 ≤ lo ≤ hi");
            }
        }
        if !(self.max_motion >= 0.0 && self.max_motion.is_finite()) {
            return bad("max_motion must be non-negative");
        }
        Ok(())
    }
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.2..0.95), rng.random_range(0.2..0.95), rng.random_range(0.2..0.95)]
}

fn sample_glass(rng: &mut ChaCha8Rng, cfg: &RandomizeConfig) -> Material {
    let roughness = if cfg.glass_roughness_max > 0.0 { rng.random_range(0.0..cfg.glass_roughness_max) } else { 0.0 };
    let m = Material { albedo: [rng.random_range(0.8..1.0), rng.random_range(0.8..1.0), rng.random_range(0.8..1.0)], ..Material::glass(rng.random_range(1.3..1.8), roughness) };
    assert!(m.is_transparent(TRANSPARENCY_THRESHOLD), "sampled glass must be transparent");
    m
}

fn sample_metal(rng: &mut ChaCha8Rng) -> Material {
    Material::metal(random_albedo(rng), rng.random_range(0.0..0.5))
}

/// Applies the four randomization steps. Pure in `(base, config, seed)`.
pub fn randomize(base: &SceneSpec, config: &RandomizeConfig, seed: u64) -> Result<SceneSpec, SceneError> {
    config.validate()?;
    if base.camera_candidates.is_empty() {
        return Err(SceneError::EmptyCandidateSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = base.clone();
    out.seed = seed;

    let pick = rng.random_range(0..base.camera_candidates.len());
    out.camera_t0 = base.camera_candidates[pick].t0;
    out.camera_t1 = base.camera_candidates[pick].t1;

    for light in &mut out.lights {
        let scale = rng.random_range(config.light_intensity[0]..=config.light_intensity[1]);
        let tint = [rng.random_range(0.7..=1.0), rng.random_range(0.7..=1.0), rng.random_range(0.7..=1.0)];
        light.intensity = tint.map(|t| t * scale);
    }
    let env = rng.random_range(config.env_intensity[0]..=config.env_intensity[1]);
    out.env_color = [env * rng.random_range(0.8..=1.0), env * rng.random_range(0.8..=1.0), env * rng.random_range(0.8..=1.0)];

    for prim in &mut out.primitives {
        let u: f64 = rng.random();
        if u < config.glass_probability {
            prim.material = Material { checker: None, ..sample_glass(&mut rng, config) };
        } else if u < config.glass_probability + config.metal_probability {
            prim.material = Material { checker: None, ..sample_metal(&mut rng) };
        }
    }

    let cam = out.camera_t0;
    let (w, h) = (out.image_size.0 as f64, out.image_size.1 as f64);
    let k = cam.intrinsics.without_distortion();
    let count = rng.random_range(config.flyers_min..=config.flyers_max);
    let first_id = out.primitives.iter().map(|p| p.object_id).max().map_or(1, |m| m + 1);
    for object_id in first_id..first_id + count {
        let z = rng.random_range(config.z_min..=config.z_max);
        let (px, py) = (rng.random_range(0.1 * w..0.9 * w), rng.random_range(0.1 * h..0.9 * h));
        let center_cam = Vector3::new((px - k.cx) / k.fx * z, (py - k.cy) / k.fy * z, z);
        let center = cam.pose.inverse().transform(&center_cam);
        // Angular size between 2 % and 8 % of the depth.
        let size = z * rng.random_range(0.02..0.08);
        let shape = if rng.random_bool(0.5) {
            Shape::Sphere { center: center.into(), radius: size }
        } else {
            let half = Vector3::new(size, size * rng.random_range(0.5..1.5), size * rng.random_range(0.5..1.5));
            Shape::Box { min: (center - half).into(), max: (center + half).into() }
        };
        let material = match rng.random_range(0..3) {
            0 => sample_glass(&mut rng, config),
            1 => sample_metal(&mut rng),
            _ => Material::diffuse(random_albedo(&mut rng)).with_checker(size * 0.5),
        };
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = rotation_from_vector(&(axis * (config.max_motion * rng.random_range(0.0..1.0))));
        let shift = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            * (config.max_motion * z);
        // Rotate about the flyer's own center, then shift.
        let motion = Pose { rotation: rot, translation: center - rot * center + shift };
        assert!(frustum_contains(&cam, out.image_size, &center), "flyer placed outside the frustum");
        out.primitives.push(Primitive { object_id, shape, material, motion });
    }
    out.validate()?;
    Ok(out)
}

/// The bundled two-layer scene: a glass slab in front of a textured wall,
/// a small metal sphere, and a camera translating 5 cm along x.
pub fn toy_two_layer() -> SceneSpec {
    let k = CameraIntrinsics::pinhole(64.0, 64.0, 32.0, 32.0);
    let cam = |x: f64| Camera { pose: Pose { rotation: nalgebra::Matrix3::identity(), translation: Vector3::new(-x, 0.0, 0.0) }, intrinsics: k };
    let t0 = cam(0.0);
    let t1 = cam(0.05);
    SceneSpec {
        primitives: vec![
            Primitive {
                object_id: 1,
                shape: Shape::Box { min: [-0.6, -0.6, 1.9], max: [0.6, 0.6, 2.1] },
                material: Material::glass(1.5, 0.0),
                motion: Pose::identity(),
            },
            Primitive {
                object_id: 2,
                shape: Shape::Quad { corner: [-4.0, -4.0, 4.0], edge_u: [8.0, 0.0, 0.0], edge_v: [0.0, 8.0, 0.0] },
                material: Material::diffuse([0.8, 0.75, 0.7]).with_checker(0.25),
                motion: Pose::identity(),
            },
            Primitive {
                object_id: 3,
                shape: Shape::Sphere { center: [1.3, 0.9, 3.0], radius: 0.25 },
                material: Material::metal([0.9, 0.85, 0.6], 0.05),
                motion: Pose::identity(),
            },
        ],
        lights: vec![Light { position: [1.0, -1.5, 0.0], intensity: [1.0, 1.0, 1.0] }],
        env_color: [0.15, 0.15, 0.15],
        camera_t0: t0,
        camera_t1: t1,
        image_size: (64, 64),
        camera_candidates: vec![
            CameraPair { t0, t1 },
            CameraPair { t0: cam(-0.05), t1: cam(0.0) },
        ],
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera { pose: Pose::identity(), intrinsics: CameraIntrinsics::pinhole(100.0, 100.0, 50.0, 40.0) }
    }

    #[test]
    fn frustum_basic() {
        assert!(frustum_contains(&cam(), (100, 80), &Point3::new(0.0, 0.0, 2.0)));
        assert!(!frustum_contains(&cam(), (100, 80), &Point3::new(0.0, 0.0, -2.0)));
        assert!(!frustum_contains(&cam(), (100, 80), &Point3::new(5.0, 0.0, 2.0)));
    }

    #[test]
    fn frustum_matches_projection_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Camera { pose: Pose::look_at(Point3::new(0.3, -0.2, -1.0), Point3::new(0.0, 0.0, 2.0), Vector3::new(0.0, -1.0, 0.0)).unwrap(), ..cam() };
        for _ in 0..2000 {
            let p = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..6.0));
            // Independent check: explicit camera-frame transform and pinhole.
            let q = c.pose.rotation * p + c.pose.translation;
            let inside = q.z > 0.0 && {
                let (u, v) = (100.0 * q.x / q.z + 50.0, 100.0 * q.y / q.z + 40.0);
                (0.0..100.0).contains(&u) && (0.0..80.0).contains(&v)
            };
            assert_eq!(frustum_contains(&c, (100, 80), &p), inside, "{p:?}");
        }
    }

    #[test]
    fn randomize_is_deterministic() {
        let base = toy_two_layer();
        let cfg = RandomizeConfig::default();
        let a = randomize(&base, &cfg, 77).unwrap().to_json();
        let b = randomize(&base, &cfg, 77).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, randomize(&base, &cfg, 78).unwrap().to_json());
    }

    #[test]
    fn zero_swap_probability_keeps_materials() {
        let base = toy_two_layer();
        let cfg = RandomizeConfig { glass_probability: 0.0, metal_probability: 0.0, ..Default::default() };
        let out = randomize(&base, &cfg, 5).unwrap();
        for (a, b) in base.primitives.iter().zip(&out.primitives) {
            assert_eq!(a.material, b.material);
        }
    }

    #[test]
    fn flyer_counts_cover_configured_range() {
        let mut base = toy_two_layer();
        base.primitives.truncate(1);
        let cfg = RandomizeConfig { flyers_min: 2, flyers_max: 5, ..Default::default() };
        let mut seen = [0usize; 8];
        for seed in 0..10_000 {
            let out = randomize(&base, &cfg, seed).unwrap();
            let flyers = out.primitives.len() - base.primitives.len();
            seen[flyers] += 1;
            for f in &out.primitives[base.primitives.len()..] {
                assert!(frustum_contains(&out.camera_t0, out.image_size, &f.shape.centroid()));
                if f.material.kind == MaterialKind::Glass {
                    assert!(f.material.is_transparent(TRANSPARENCY_THRESHOLD));
                }
            }
        }
        assert!((2..=5).all(|k| seen[k] > 0), "{seen:?}");
        assert!(seen.iter().enumerate().all(|(k, &n)| (2..=5).contains(&k) || n == 0));
    }

    #[test]
    fn empty_candidates_rejected() {
        let mut base = toy_two_layer();
        base.camera_candidates.clear();
        assert_eq!(randomize(&base, &RandomizeConfig::default(), 1), Err(SceneError::EmptyCandidateSet));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = RandomizeConfig { glass_probability: 1.5, ..Default::default() };
        assert!(matches!(randomize(&toy_two_layer(), &cfg, 1), Err(SceneError::InvalidConfig(_))));
    }

    #[test]
    fn scene_json_round_trip() {
        let s = randomize(&toy_two_layer(), &RandomizeConfig::default(), 3).unwrap();
        let back: SceneSpec = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn bundled_scene_file_matches_builder() {
        let text = include_str!("../data/toy_scene.json");
        let parsed: SceneSpec = serde_json::from_str(text).unwrap();
        assert_eq!(parsed, toy_two_layer());
    }

    #[test]
    fn invalid_shapes() {
        assert!(Shape::Sphere { center: [0.0; 3], radius: 0.0 }.validate().is_err());
        assert!(Shape::Quad { corner: [0.0; 3], edge_u: [1.0, 0.0, 0.0], edge_v: [2.0, 0.0, 0.0] }.validate().is_err());
        assert!(Shape::Box { min: [0.0; 3], max: [1.0, 0.0, 1.0] }.validate().is_err());
    }
}
