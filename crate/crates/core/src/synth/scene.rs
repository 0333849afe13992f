//! Scene model and deterministic scene generation.
//!
//! A scene is a 2-D layered world on the unit square: rigid shapes under
//! per-frame similarity motion (translation, rotation, uniform scale), a
//! global camera similarity, unique depth layers for occlusion, and a
//! category id per object for the semantic stand-in features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 2-D similarity transform `p ↦ σ·R(θ)·p + τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Similarity {
    pub fn new(scale: f64, rotation: f64, translation: [f64; 2]) -> Self {
        let (s, c) = rotation.sin_cos();
        Similarity {
            m: [[scale * c, -scale * s], [scale * s, scale * c]],
            t: translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Similarity {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let ti = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Similarity { m: inv, t: ti }
    }
}

/// Rigid shape in local coordinates centered on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
    /// Square of the given half-size with its (+x, +y) quadrant removed.
    LPolygon { half_size: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Rectangle { half_w, half_h } => p[0].abs() <= half_w && p[1].abs() <= half_h,
            Shape::Disk { radius } => p[0] * p[0] + p[1] * p[1] <= radius * radius,
            Shape::LPolygon { half_size } => {
                p[0].abs() <= half_size
                    && p[1].abs() <= half_size
                    && !(p[0] > 0.0 && p[1] > 0.0)
            }
        }
    }

    /// Circumradius: every point of the shape lies within this distance of
    /// the local origin.
    pub fn extent(&self) -> f64 {
        match *self {
            Shape::Rectangle { half_w, half_h } => (half_w * half_w + half_h * half_h).sqrt(),
            Shape::Disk { radius } => radius,
            Shape::LPolygon { half_size } => half_size * std::f64::consts::SQRT_2,
        }
    }
}

/// Linear-in-time similarity motion. Frame `t` maps a point as
/// `σ(t)·R(θ(t))·p + τ(t)` with σ(t) = scale·(1 + scale_rate·t),
/// θ(t) = rotation + angular_velocity·t, τ(t) = translation + velocity·t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub translation: [f64; 2],
    pub velocity: [f64; 2],
    pub rotation: f64,
    pub angular_velocity: f64,
    pub scale: f64,
    pub scale_rate: f64,
}

impl MotionProgram {
    pub fn stationary(translation: [f64; 2], rotation: f64, scale: f64) -> Self {
        MotionProgram {
            translation,
            velocity: [0.0, 0.0],
            rotation,
            angular_velocity: 0.0,
            scale,
            scale_rate: 0.0,
        }
    }

    pub fn identity() -> Self {
        MotionProgram::stationary([0.0, 0.0], 0.0, 1.0)
    }

    pub fn at(&self, t: f64) -> Similarity {
        Similarity::new(
            self.scale * (1.0 + self.scale_rate * t),
            self.rotation + self.angular_velocity * t,
            [
                self.translation[0] + self.velocity[0] * t,
                self.translation[1] + self.velocity[1] * t,
            ],
        )
    }

    /// True when the pose does not change over time.
    pub fn is_time_invariant(&self) -> bool {
        self.velocity == [0.0, 0.0] && self.angular_velocity == 0.0 && self.scale_rate == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Lower = nearer to the camera. Unique per scene.
    pub depth_layer: u32,
    pub category_id: u32,
    pub motion: MotionProgram,
    pub is_dynamic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub frame_count: usize,
    pub objects: Vec<SceneObject>,
    pub camera: MotionProgram,
    pub seed: u64,
}

impl Scene {
    /// Object id used in id maps and masks: index + 1 (0 = background).
    pub fn object_id(&self, index: usize) -> u16 {
        (index + 1) as u16
    }

    /// Depth value for a layer at normalized image row `v`: nearer layers get
    /// smaller values, plus a vertical gradient mimicking monocular depth.
    pub fn depth_at(&self, layer: u32, v_img: f64, gradient: f64) -> f64 {
        1.0 + layer as f64 + gradient * (v_img - 0.5)
    }

    /// Layer value behind every object.
    pub fn background_layer(&self) -> u32 {
        self.objects.iter().map(|o| o.depth_layer).max().map_or(0, |m| m + 1)
    }

    pub fn dynamic_object_indices(&self) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| self.objects[i].is_dynamic)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Generation("scene needs at least one object".into()));
        }
        let mut layers: Vec<u32> = self.objects.iter().map(|o| o.depth_layer).collect();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != self.objects.len() {
            return Err(Error::Generation("depth layers must be unique".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.is_dynamic && o.motion.is_time_invariant() {
                return Err(Error::Generation(format!(
                    "dynamic object {i} has identity motion"
                )));
            }
            if !o.is_dynamic && !o.motion.is_time_invariant() {
                return Err(Error::Generation(format!(
                    "static object {i} has non-identity motion"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over a canonical byte encoding of every field.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update((self.frame_count as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        let push_motion = |h: &mut Sha256, m: &MotionProgram| {
            for v in [
                m.translation[0],
                m.translation[1],
                m.velocity[0],
                m.velocity[1],
                m.rotation,
                m.angular_velocity,
                m.scale,
                m.scale_rate,
            ] {
                h.update(v.to_le_bytes());
            }
        };
        push_motion(&mut h, &self.camera);
        h.update((self.objects.len() as u64).to_le_bytes());
        for o in &self.objects {
            match o.shape {
                Shape::Rectangle { half_w, half_h } => {
                    h.update([0u8]);
                    h.update(half_w.to_le_bytes());
                    h.update(half_h.to_le_bytes());
                }
                Shape::Disk { radius } => {
                    h.update([1u8]);
                    h.update(radius.to_le_bytes());
                }
                Shape::LPolygon { half_size } => {
                    h.update([2u8]);
                    h.update(half_size.to_le_bytes());
                }
            }
            h.update(o.depth_layer.to_le_bytes());
            h.update(o.category_id.to_le_bytes());
            push_motion(&mut h, &o.motion);
            h.update([o.is_dynamic as u8]);
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn default_width() -> u32 {
    64
}
fn default_height() -> u32 {
    48
}
fn default_frame_count() -> usize {
    24
}
fn default_object_count() -> usize {
    3
}
fn default_dynamic_count() -> usize {
    1
}
fn default_category_count() -> u32 {
    4
}
fn default_same_category_pair_prob() -> f64 {
    0.5
}
fn default_category_mobility_bias() -> f64 {
    0.8
}
fn default_camera_speed() -> f64 {
    0.003
}
fn default_camera_rotation_speed() -> f64 {
    0.002
}
fn default_camera_zoom_rate() -> f64 {
    0.001
}
fn default_object_speed_min() -> f64 {
    0.004
}
fn default_object_speed_max() -> f64 {
    0.012
}
fn default_object_rotation_speed() -> f64 {
    0.01
}
fn default_object_scale_rate() -> f64 {
    0.002
}
fn default_size_min() -> f64 {
    0.10
}
fn default_size_max() -> f64 {
    0.22
}
fn default_min_center_distance() -> f64 {
    0.0
}
fn default_depth_gradient() -> f64 {
    0.2
}
fn default_confidence_noise_frac() -> f64 {
    0.1
}
fn default_confidence_noise_max() -> f64 {
    0.3
}
fn default_semantic_dim() -> usize {
    16
}
fn default_semantic_noise() -> f64 {
    0.05
}
fn default_c_min() -> f32 {
    crate::trackdata::DEFAULT_C_MIN
}
fn default_in_mask_frac() -> f64 {
    crate::trackdata::DEFAULT_IN_MASK_FRAC
}
fn default_grid_size() -> usize {
    12
}
fn default_step() -> usize {
    6
}

/// Generator knobs. Every field has a default, so a TOML config may specify
/// only what it overrides; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub frame_count: usize,
    pub object_count: usize,
    pub dynamic_count: usize,
    pub category_count: u32,
    /// Probability that the scene includes a static and a dynamic object of
    /// the same category (the hard same-semantics case).
    pub same_category_pair_prob: f64,
    /// How strongly categories correlate with mobility: dynamic objects draw
    /// from the "mobile" half of the category space with this probability.
    pub category_mobility_bias: f64,
    pub camera_speed: f64,
    pub camera_rotation_speed: f64,
    pub camera_zoom_rate: f64,
    pub object_speed_min: f64,
    pub object_speed_max: f64,
    pub object_rotation_speed: f64,
    pub object_scale_rate: f64,
    pub size_min: f64,
    pub size_max: f64,
    pub min_center_distance: f64,
    pub depth_gradient: f64,
    pub confidence_noise_frac: f64,
    pub confidence_noise_max: f64,
    pub semantic_dim: usize,
    pub semantic_noise: f64,
    pub c_min: f32,
    pub in_mask_frac: f64,
    pub grid_size: usize,
    pub step: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: default_width(),
            height: default_height(),
            frame_count: default_frame_count(),
            object_count: default_object_count(),
            dynamic_count: default_dynamic_count(),
            category_count: default_category_count(),
            same_category_pair_prob: default_same_category_pair_prob(),
            category_mobility_bias: default_category_mobility_bias(),
            camera_speed: default_camera_speed(),
            camera_rotation_speed: default_camera_rotation_speed(),
            camera_zoom_rate: default_camera_zoom_rate(),
            object_speed_min: default_object_speed_min(),
            object_speed_max: default_object_speed_max(),
            object_rotation_speed: default_object_rotation_speed(),
            object_scale_rate: default_object_scale_rate(),
            size_min: default_size_min(),
            size_max: default_size_max(),
            min_center_distance: default_min_center_distance(),
            depth_gradient: default_depth_gradient(),
            confidence_noise_frac: default_confidence_noise_frac(),
            confidence_noise_max: default_confidence_noise_max(),
            semantic_dim: default_semantic_dim(),
            semantic_noise: default_semantic_noise(),
            c_min: default_c_min(),
            in_mask_frac: default_in_mask_frac(),
            grid_size: default_grid_size(),
            step: default_step(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.frame_count < 8 {
            return Err(Error::Config("frame_count must be >= 8".into()));
        }
        if self.object_count < 1 {
            return Err(Error::Config("object_count must be >= 1".into()));
        }
        if self.dynamic_count > self.object_count {
            return Err(Error::Config("dynamic_count exceeds object_count".into()));
        }
        if self.category_count < 1 {
            return Err(Error::Config("category_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.same_category_pair_prob)
            || !(0.0..=1.0).contains(&self.category_mobility_bias)
            || !(0.0..=1.0).contains(&self.confidence_noise_frac)
        {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        if self.object_speed_min <= 0.0 || self.object_speed_max < self.object_speed_min {
            return Err(Error::Config(
                "object speed range must satisfy 0 < min <= max".into(),
            ));
        }
        if self.size_min <= 0.0 || self.size_max < self.size_min {
            return Err(Error::Config("size range must satisfy 0 < min <= max".into()));
        }
        if self.size_max >= 0.45 {
            return Err(Error::Config("size_max must be < 0.45 so objects can fit".into()));
        }
        if !(0.0..=0.3).contains(&self.confidence_noise_max) {
            return Err(Error::Config("confidence_noise_max must lie in [0,0.3]".into()));
        }
        if self.semantic_dim < 2 {
            return Err(Error::Config("semantic_dim must be >= 2".into()));
        }
        if self.grid_size < 1 || self.step < 1 {
            return Err(Error::Config("grid_size and step must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&(self.c_min as f64)) {
            return Err(Error::Config("c_min must lie in [0,1]".into()));
        }
        if self.in_mask_frac < 0.0 || self.in_mask_frac >= 1.0 {
            return Err(Error::Config("in_mask_frac must lie in [0,1)".into()));
        }
        Ok(())
    }
}

const PLACEMENT_ATTEMPTS: usize = 500;

/// Mobile categories are the lower half of the id space.
pub fn mobile_categories(category_count: u32) -> std::ops::Range<u32> {
    0..category_count.div_ceil(2)
}

/// Deterministic scene sampling. Identical (config, seed) pairs produce
/// byte-identical scenes.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.object_count;

    let mut layers: Vec<u32> = (0..k as u32).collect();
    layers.shuffle(&mut rng);

    // Which objects move: choose dynamic slots uniformly.
    let mut slots: Vec<usize> = (0..k).collect();
    slots.shuffle(&mut rng);
    let dynamic_slots: Vec<usize> = slots[..cfg.dynamic_count].to_vec();
    let is_dynamic = |i: usize| dynamic_slots.contains(&i);

    // Categories with a mobility prior, then optionally force a
    // static/dynamic pair to share one.
    let mobile = mobile_categories(cfg.category_count);
    let immobile = mobile.end..cfg.category_count;
    let mut categories: Vec<u32> = (0..k)
        .map(|i| {
            let favored = if is_dynamic(i) { mobile.clone() } else { immobile.clone() };
            let fallback = if is_dynamic(i) { immobile.clone() } else { mobile.clone() };
            let pool = if favored.is_empty() {
                fallback.clone()
            } else if fallback.is_empty() || rng.random::<f64>() < cfg.category_mobility_bias {
                favored
            } else {
                fallback
            };
            rng.random_range(pool)
        })
        .collect();
    if cfg.dynamic_count >= 1
        && cfg.dynamic_count < k
        && rng.random::<f64>() < cfg.same_category_pair_prob
    {
        let dyn_pick = dynamic_slots[rng.random_range(0..dynamic_slots.len())];
        let statics: Vec<usize> = (0..k).filter(|&i| !is_dynamic(i)).collect();
        let stat_pick = statics[rng.random_range(0..statics.len())];
        let shared = rng.random_range(0..cfg.category_count);
        categories[dyn_pick] = shared;
        categories[stat_pick] = shared;
    }

    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    let mut objects = Vec::with_capacity(k);
    for i in 0..k {
        let size = rng.random_range(cfg.size_min..=cfg.size_max);
        let shape = match rng.random_range(0..3u32) {
            0 => Shape::Rectangle {
                half_w: size,
                half_h: size * rng.random_range(0.5..=1.0),
            },
            1 => Shape::Disk { radius: size },
            _ => Shape::LPolygon { half_size: size },
        };
        let margin = shape.extent();
        if margin >= 0.5 {
            return Err(Error::Generation(format!(
                "object {i} cannot fit: extent {margin:.3} >= 0.5"
            )));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = [
                rng.random_range(margin..=1.0 - margin),
                rng.random_range(margin..=1.0 - margin),
            ];
            let clear = centers.iter().all(|o| {
                let d = ((c[0] - o[0]).powi(2) + (c[1] - o[1]).powi(2)).sqrt();
                d >= cfg.min_center_distance
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {i} with min_center_distance {}",
                cfg.min_center_distance
            ))
        })?;
        centers.push(center);

        let rotation = rng.random_range(0.0..std::f64::consts::TAU);
        let motion = if is_dynamic(i) {
            let speed = rng.random_range(cfg.object_speed_min..=cfg.object_speed_max);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            MotionProgram {
                translation: center,
                velocity: [speed * dir.cos(), speed * dir.sin()],
                rotation,
                angular_velocity: rng
                    .random_range(-cfg.object_rotation_speed..=cfg.object_rotation_speed),
                scale: 1.0,
                scale_rate: rng.random_range(-cfg.object_scale_rate..=cfg.object_scale_rate),
            }
        } else {
            MotionProgram::stationary(center, rotation, 1.0)
        };
        objects.push(SceneObject {
            shape,
            depth_layer: layers[i],
            category_id: categories[i],
            motion,
            is_dynamic: is_dynamic(i),
        });
    }

    let camera = if cfg.camera_speed == 0.0
        && cfg.camera_rotation_speed == 0.0
        && cfg.camera_zoom_rate == 0.0
    {
        MotionProgram::identity()
    } else {
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.0..=cfg.camera_speed);
        MotionProgram {
            translation: [0.0, 0.0],
            velocity: [speed * dir.cos(), speed * dir.sin()],
            rotation: 0.0,
            angular_velocity: rng
                .random_range(-cfg.camera_rotation_speed..=cfg.camera_rotation_speed),
            scale: 1.0,
            scale_rate: rng.random_range(-cfg.camera_zoom_rate..=cfg.camera_zoom_rate),
        }
    };

    let scene = Scene {
        width: cfg.width,
        height: cfg.height,
        frame_count: cfg.frame_count,
        objects,
        camera,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}
