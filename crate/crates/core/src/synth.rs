//! Procedural scenes and exact analytic ray casting.
//!
//! Every end-to-end test renders its ground truth here: depth is the exact
//! ray parameter of the nearest analytic intersection, so the only error in a
//! rendered depth map is floating-point round-off.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec2, Vec3};
use crate::keyframing::{Frame, Trajectory};
use crate::maps::{DepthMap, GrayImage, NormalMap};

const HIT_EPS: f64 = 1e-9;

/// Seeded stationary texture field.
///
/// Feature channels come in (cos, sin) pairs of random Fourier features, so the
/// inner product of two normalized feature vectors depends only on the
/// displacement between the two surface points and is even in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub seed: u64,
    /// Length scale of the texture in meters.
    pub correlation_length: f64,
}

/// Frequencies and phases for one primitive at one channel count.
#[derive(Debug, Clone)]
pub struct TextureBank {
    freqs: Vec<Vec3>,
    phases: Vec<f64>,
    channels: usize,
}

impl TextureBank {
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Unit-norm feature vector at `p`.
    pub fn eval(&self, p: &Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        for (c, (w, phi)) in self.freqs.iter().zip(&self.phases).enumerate() {
            let a = w.dot(p) + phi;
            out[2 * c] = a.cos();
            if 2 * c + 1 < self.channels {
                out[2 * c + 1] = a.sin();
            }
        }
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|x| *x /= n);
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl Texture {
    pub fn new(seed: u64, correlation_length: f64) -> Self {
        Self {
            seed,
            correlation_length,
        }
    }

    /// Feature bank for `channels` channels on primitive `primitive`.
    /// Frequencies are shared by all primitives, phases are per primitive.
    pub fn bank(&self, primitive: usize, channels: usize) -> TextureBank {
        let pairs = channels.div_ceil(2);
        let mut freq_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7465_7874_7572_6531);
        let mut phase_rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(primitive as u64 + 1),
        );
        let scale = 1.0 / self.correlation_length;
        let freqs = (0..pairs)
            .map(|_| {
                Vec3::new(
                    gaussian(&mut freq_rng),
                    gaussian(&mut freq_rng),
                    gaussian(&mut freq_rng),
                ) * scale
            })
            .collect();
        let phases = (0..pairs).map(|_| phase_rng.gen_range(0.0..2.0 * PI)).collect();
        TextureBank {
            freqs,
            phases,
            channels,
        }
    }

    /// Luminance in [0, 1] at `p` on `primitive`.
    pub fn luminance(&self, primitive: usize, p: &Vec3) -> f64 {
        let bank = self.luminance_bank(primitive);
        luminance_from_bank(&bank, p)
    }

    fn luminance_bank(&self, primitive: usize) -> TextureBank {
        Texture::new(self.seed ^ 0x6c75_6d69, self.correlation_length).bank(primitive, LUMA_TERMS)
    }
}

const LUMA_TERMS: usize = 12;

fn luminance_from_bank(bank: &TextureBank, p: &Vec3) -> f64 {
    let s: f64 = bank
        .freqs
        .iter()
        .zip(&bank.phases)
        .map(|(w, phi)| (w.dot(p) + phi).cos())
        .sum::<f64>()
        * (2.0 / bank.freqs.len() as f64).sqrt();
    (0.5 + 0.2 * s).clamp(0.0, 1.0)
}

/// Analytic surface primitive. All surfaces are two-sided.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Infinite plane `normal · x = offset`.
    Plane { normal: Vec3, offset: f64 },
    /// Axis-aligned rectangle at `axis = position`, bounded on the other two axes
    /// (in increasing axis order).
    Rect {
        axis: usize,
        position: f64,
        min: [f64; 2],
        max: [f64; 2],
    },
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

fn other_axes(axis: usize) -> [usize; 2] {
    match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

impl Shape {
    /// Nearest intersection with parameter `t > HIT_EPS` along `origin + t * dir`,
    /// returning `(t, geometric normal)`.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > HIT_EPS).then_some((t, *normal))
            }
            Shape::Rect {
                axis,
                position,
                min,
                max,
            } => {
                let denom = dir[*axis];
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (position - origin[*axis]) / denom;
                if t <= HIT_EPS {
                    return None;
                }
                let [a, b] = other_axes(*axis);
                let pa = origin[a] + t * dir[a];
                let pb = origin[b] + t * dir[b];
                if pa < min[0] || pa > max[0] || pb < min[1] || pb > max[1] {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[*axis] = 1.0;
                Some((t, n))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let half_b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-half_b - sq) / a;
                let t1 = (-half_b + sq) / a;
                let t = if t0 > HIT_EPS {
                    t0
                } else if t1 > HIT_EPS {
                    t1
                } else {
                    return None;
                };
                let p = origin + dir * t;
                Some((t, (p - center) / *radius))
            }
            Shape::Cuboid { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for ax in 0..3 {
                    if dir[ax].abs() < 1e-15 {
                        if origin[ax] < min[ax] || origin[ax] > max[ax] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min[ax] - origin[ax]) / dir[ax];
                    let mut t1 = (max[ax] - origin[ax]) / dir[ax];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        near_axis = ax;
                    }
                    if t1 < t_far {
                        t_far = t1;
                        far_axis = ax;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, ax) = if t_near > HIT_EPS {
                    (t_near, near_axis)
                } else if t_far > HIT_EPS {
                    (t_far, far_axis)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[ax] = 1.0;
                Some((t, n))
            }
        }
    }

    /// Surface area, `None` for unbounded shapes.
    pub fn area(&self) -> Option<f64> {
        match self {
            Shape::Plane { .. } => None,
            Shape::Rect { min, max, .. } => Some((max[0] - min[0]) * (max[1] - min[1])),
            Shape::Sphere { radius, .. } => Some(4.0 * PI * radius * radius),
            Shape::Cuboid { min, max } => {
                let e = max - min;
                Some(2.0 * (e.x * e.y + e.y * e.z + e.x * e.z))
            }
        }
    }

    /// Uniform area sample on the surface.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match self {
            Shape::Plane { .. } => unreachable!("unbounded shapes are not sampled"),
            Shape::Rect {
                axis,
                position,
                min,
                max,
            } => {
                let [a, b] = other_axes(*axis);
                let mut p = Vec3::zeros();
                p[*axis] = *position;
                p[a] = rng.gen_range(min[0]..=max[0]);
                p[b] = rng.gen_range(min[1]..=max[1]);
                p
            }
            Shape::Sphere { center, radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).max(0.0).sqrt();
                center + Vec3::new(r * phi.cos(), r * phi.sin(), z) * *radius
            }
            Shape::Cuboid { min, max } => {
                let e = max - min;
                let faces = [e.y * e.z, e.y * e.z, e.x * e.z, e.x * e.z, e.x * e.y, e.x * e.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let ax = face / 2;
                let mut p = Vec3::new(
                    rng.gen_range(min.x..=max.x),
                    rng.gen_range(min.y..=max.y),
                    rng.gen_range(min.z..=max.z),
                );
                p[ax] = if face % 2 == 0 { min[ax] } else { max[ax] };
                p
            }
        }
    }

    /// Whether `p` lies strictly inside a solid shape (never for planes and rectangles).
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        match self {
            Shape::Plane { .. } | Shape::Rect { .. } => false,
            Shape::Sphere { center, radius } => (p - center).norm() < radius + margin,
            Shape::Cuboid { min, max } => (0..3).all(|a| p[a] > min[a] - margin && p[a] < max[a] + margin),
        }
    }
}

/// Ray/scene intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Unit normal facing against the ray.
    pub normal: Vec3,
    pub primitive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Shape>,
    pub texture: Texture,
    /// Axis-aligned room bounds `(min, max)` when the scene is a room.
    pub room: Option<(Vec3, Vec3)>,
}

impl Scene {
    pub fn new(primitives: Vec<Shape>, texture: Texture) -> Self {
        Self {
            primitives,
            texture,
            room: None,
        }
    }

    /// Nearest hit along `origin + t * dir` (`dir` need not be unit length).
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, usize)> = None;
        for (i, s) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = s.intersect(origin, dir) {
                if best.map_or(true, |(bt, _, _)| t < bt) {
                    best = Some((t, n, i));
                }
            }
        }
        best.map(|(t, n, primitive)| {
            let n = if n.dot(dir) > 0.0 { -n } else { n };
            Hit {
                t,
                point: origin + dir * t,
                normal: n,
                primitive,
            }
        })
    }

    /// Hit for pixel `(u, v)` of a camera; `t` equals the perpendicular depth.
    pub fn raycast_pixel(&self, pose: &Pose, k: &Intrinsics, u: f64, v: f64) -> Option<Hit> {
        let dir = pose.rotation * k.unproject_dir(&Vec2::new(u, v));
        self.raycast(&pose.translation, &dir)
    }

    /// Whether a world point is inside any solid primitive (or outside the room).
    pub fn is_occupied(&self, p: &Vec3, margin: f64) -> bool {
        if let Some((lo, hi)) = &self.room {
            if (0..3).any(|a| p[a] < lo[a] + margin || p[a] > hi[a] - margin) {
                return true;
            }
        }
        self.primitives.iter().any(|s| s.contains(p, margin))
    }

    /// Area-weighted samples over all bounded primitives.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let areas: Vec<f64> = self.primitives.iter().map(|s| s.area().unwrap_or(0.0)).collect();
        let total: f64 = areas.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        if total <= 0.0 {
            return out;
        }
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut idx = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            out.push(self.primitives[idx].sample(&mut rng));
        }
        out
    }

    /// True when `p` is seen unoccluded by the camera, in front of it, inside the
    /// image and no farther than `max_depth`.
    pub fn is_visible(&self, p: &Vec3, pose: &Pose, k: &Intrinsics, max_depth: f64) -> bool {
        let pc = pose.inverse_transform_point(p);
        let proj = crate::geometry::project(&pc, k);
        if !proj.in_front || proj.depth > max_depth || !k.contains(&proj.pixel) {
            return false;
        }
        let dir = (p - pose.translation) / pc.z;
        match self.raycast(&pose.translation, &dir) {
            Some(hit) => hit.t >= pc.z - 1e-6 * pc.z.max(1.0),
            None => true,
        }
    }
}

/// Parameters of a procedural room scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    /// Room extents (x, y, z) in meters; the floor is at z = 0.
    pub room: [f64; 3],
    pub n_boxes: usize,
    pub n_spheres: usize,
    /// Texture correlation length in meters.
    pub texture_length: f64,
    /// Floor-to-ceiling pillars per square meter of floor.
    pub occluder_density: f64,
    /// Radius of the object-free cylinder around the room's vertical axis.
    pub clear_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            room: [5.0, 5.0, 3.0],
            n_boxes: 3,
            n_spheres: 2,
            texture_length: 0.15,
            occluder_density: 0.0,
            clear_radius: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&e| !(e > 0.0)) || !(self.texture_length > 0.0) || self.occluder_density < 0.0 {
            return Err(Error::domain(format!("invalid scene config {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.room[0] / 2.0, self.room[1] / 2.0, self.room[2] / 2.0)
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Room with an open ceiling (floor plus four walls) and seeded non-overlapping objects.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let [lx, ly, lz] = cfg.room;
    let mut prims = vec![
        // floor
        Shape::Rect {
            axis: 2,
            position: 0.0,
            min: [0.0, 0.0],
            max: [lx, ly],
        },
        Shape::Rect {
            axis: 0,
            position: 0.0,
            min: [0.0, 0.0],
            max: [ly, lz],
        },
        Shape::Rect {
            axis: 0,
            position: lx,
            min: [0.0, 0.0],
            max: [ly, lz],
        },
        Shape::Rect {
            axis: 1,
            position: 0.0,
            min: [0.0, 0.0],
            max: [lx, lz],
        },
        Shape::Rect {
            axis: 1,
            position: ly,
            min: [0.0, 0.0],
            max: [lx, lz],
        },
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = cfg.center();
    let n_pillars = (cfg.occluder_density * lx * ly).round() as usize;
    let mut placed: Vec<(Vec3, Vec3)> = Vec::new();
    let mut attempts = 0;

    let mut place = |rng: &mut ChaCha8Rng, size: Vec3, on_floor: bool| -> Result<(Vec3, Vec3)> {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::domain("scene generation: too many rejected placements (overcrowded config)"));
            }
            let margin = 0.05;
            if size.x + 2.0 * margin >= lx || size.y + 2.0 * margin >= ly || size.z > lz {
                continue;
            }
            let x = rng.gen_range(margin..lx - size.x - margin);
            let y = rng.gen_range(margin..ly - size.y - margin);
            let z = if on_floor {
                0.0
            } else {
                rng.gen_range(0.3..(lz - size.z - 0.3).max(0.31))
            };
            let lo = Vec3::new(x, y, z);
            let hi = lo + size;
            // distance from the clear axis to the footprint
            let dx = (center.x - center.x.clamp(lo.x, hi.x)).abs();
            let dy = (center.y - center.y.clamp(lo.y, hi.y)).abs();
            if (dx * dx + dy * dy).sqrt() < cfg.clear_radius {
                continue;
            }
            let overlaps = placed.iter().any(|(a, b)| {
                (0..2).all(|ax| lo[ax] < b[ax] + margin && hi[ax] > a[ax] - margin) && lo.z < b.z && hi.z > a.z
            });
            if overlaps {
                continue;
            }
            placed.push((lo, hi));
            return Ok((lo, hi));
        }
    };

    for _ in 0..n_pillars {
        let w = rng.gen_range(0.12..0.25);
        let (lo, hi) = place(&mut rng, Vec3::new(w, w, lz), true)?;
        prims.push(Shape::Cuboid { min: lo, max: hi });
    }
    for _ in 0..cfg.n_boxes {
        let size = Vec3::new(
            rng.gen_range(0.3..0.8),
            rng.gen_range(0.3..0.8),
            rng.gen_range(0.3..1.0),
        );
        let (lo, hi) = place(&mut rng, size, true)?;
        prims.push(Shape::Cuboid { min: lo, max: hi });
    }
    for _ in 0..cfg.n_spheres {
        let r = rng.gen_range(0.2..0.4);
        let (lo, hi) = place(&mut rng, Vec3::repeat(2.0 * r), false)?;
        prims.push(Shape::Sphere {
            center: (lo + hi) / 2.0,
            radius: r,
        });
    }

    Ok(Scene {
        primitives: prims,
        texture: Texture::new(cfg.seed, cfg.texture_length),
        room: Some((Vec3::zeros(), Vec3::new(lx, ly, lz))),
    })
}

/// Exact rendering of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub image: GrayImage,
    pub depth: DepthMap,
    /// Analytic normals in the camera frame, facing the camera.
    pub normals: NormalMap,
}

pub fn render_depth(scene: &Scene, pose: &Pose, k: &Intrinsics) -> RenderedView {
    let (w, h) = (k.width, k.height);
    let luma: Vec<_> = (0..scene.primitives.len())
        .map(|i| scene.texture.luminance_bank(i))
        .collect();
    let rows: Vec<Vec<Option<(f64, Vec3, f64)>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    scene.raycast_pixel(pose, k, u as f64, v as f64).map(|hit| {
                        let n_cam = pose.rotation.tr_mul(&hit.normal);
                        (hit.t, n_cam, luminance_from_bank(&luma[hit.primitive], &hit.point))
                    })
                })
                .collect()
        })
        .collect();
    let mut depth = DepthMap::empty(w, h);
    let mut normals = NormalMap::empty(w, h);
    let mut image = vec![0.0; w * h];
    for (v, row) in rows.into_iter().enumerate() {
        for (u, px) in row.into_iter().enumerate() {
            let i = v * w + u;
            if let Some((t, n, l)) = px {
                depth.depth[i] = t;
                depth.valid[i] = true;
                normals.normals[i] = n;
                normals.valid[i] = true;
                image[i] = l;
            }
        }
    }
    RenderedView {
        pose: *pose,
        intrinsics: *k,
        image: GrayImage {
            width: w,
            height: h,
            data: image,
        },
        depth,
        normals,
    }
}

/// Fraction of view `a`'s valid pixels whose surface point is also seen unoccluded by view `b`.
pub fn covisibility(scene: &Scene, a: &RenderedView, b: &RenderedView, max_depth: f64) -> f64 {
    let mut seen = 0usize;
    let mut total = 0usize;
    for v in 0..a.depth.height {
        for u in 0..a.depth.width {
            if let Some(d) = a.depth.get(u, v) {
                total += 1;
                let pc = a.intrinsics.unproject_dir(&Vec2::new(u as f64, v as f64)) * d;
                let pw = a.pose.transform_point(&pc);
                if scene.is_visible(&pw, &b.pose, &b.intrinsics, max_depth) {
                    seen += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen as f64 / total as f64
    }
}

/// Samples of the scene surface that at least one of the given cameras sees.
pub fn visible_surface_samples(
    scene: &Scene,
    views: &[(Pose, Intrinsics)],
    n: usize,
    seed: u64,
    max_depth: f64,
) -> Vec<Vec3> {
    scene
        .sample_surface(n, seed)
        .into_par_iter()
        .filter(|p| views.iter().any(|(pose, k)| scene.is_visible(p, pose, k, max_depth)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// Circle around the room's vertical axis, looking outward and slightly down.
    Orbit,
    /// Straight segment across the room center with a fixed viewing direction.
    Line,
    /// Orbit plus seeded pose noise.
    Jitter,
}

impl std::str::FromStr for Motion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Motion::Orbit),
            "line" => Ok(Motion::Line),
            "jitter" => Ok(Motion::Jitter),
            _ => Err(Error::domain(format!("unknown motion '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub motion: Motion,
    /// Orbit radius, or half length of the line.
    pub radius: f64,
    /// Camera height above the floor.
    pub height: f64,
    /// Swept orbit angle in radians.
    pub arc: f64,
    /// Downward pitch in radians.
    pub pitch: f64,
    /// Jitter standard deviations (meters, radians).
    pub jitter_translation: f64,
    pub jitter_rotation: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            motion: Motion::Orbit,
            radius: 0.5,
            height: 1.4,
            arc: 2.0 * PI,
            pitch: 0.35,
            jitter_translation: 0.01,
            jitter_rotation: 0.01,
        }
    }
}

/// Camera path through `scene`. Orbit frames are spaced `arc / n` apart.
pub fn generate_trajectory(
    scene: &Scene,
    k: &Intrinsics,
    n_frames: usize,
    cfg: &TrajectoryConfig,
    seed: u64,
) -> Result<Trajectory> {
    if n_frames == 0 {
        return Err(Error::domain("trajectory needs at least one frame"));
    }
    let center = match &scene.room {
        Some((lo, hi)) => (lo + hi) / 2.0,
        None => Vec3::zeros(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let (eye, forward) = match cfg.motion {
            Motion::Orbit | Motion::Jitter => {
                let a = cfg.arc * i as f64 / n_frames as f64;
                let radial = Vec3::new(a.cos(), a.sin(), 0.0);
                (
                    Vec3::new(center.x, center.y, cfg.height) + radial * cfg.radius,
                    radial,
                )
            }
            Motion::Line => {
                let s = if n_frames == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * i as f64 / (n_frames - 1) as f64
                };
                (
                    Vec3::new(center.x + s * cfg.radius, center.y, cfg.height),
                    Vec3::y(),
                )
            }
        };
        let dir = forward * cfg.pitch.cos() - Vec3::z() * cfg.pitch.sin();
        let mut pose = Pose::look_at(eye, eye + dir, Vec3::z())?;
        if cfg.motion == Motion::Jitter {
            let dt = Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * cfg.jitter_translation;
            let axis = Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng));
            let angle = gaussian(&mut rng) * cfg.jitter_rotation;
            let rot = Pose::from_axis_angle(axis, angle);
            pose = Pose::new(pose.rotation * rot.rotation, pose.translation + dt);
        }
        if scene.is_occupied(&pose.translation, 0.05) {
            return Err(Error::domain(format!(
                "trajectory frame {i} at {:?} leaves the free space of the room",
                pose.translation.as_slice()
            )));
        }
        frames.push(Frame {
            id: i,
            pose,
            intrinsics: *k,
            timestamp: i,
        });
    }
    Trajectory::new(frames)
}
