//! Synthetic scenes with analytic ground truth: shapes, partial inputs with
//! holes, and noisy "completed" views for the optimizer benchmarks.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, Point3, ProjectionModel, View};
use crate::consistency::DepthRange;
use crate::error::{contract, domain, Result};
use crate::metrics::PointCloud;
use crate::raster::{DepthImage, DEFAULT_BACKGROUND};

/// SplitMix64: a 64-bit state advanced by a fixed odd increment and passed
/// through a bijective mixer. Output `k` is a pure function of the seed and
/// `k`, so any implementation reproduces the same streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for one purpose: seeded with `mix(seed ⊕ mix(purpose))`.
    pub fn stream(seed: u64, purpose: u64) -> Self {
        Self::new(mix64(seed ^ mix64(purpose.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// Standard normal by Box-Muller; every call consumes two outputs.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Stream tags for the separate random purposes of a scene.
mod purpose {
    pub const SURFACE: u64 = 1;
    pub const HOLES: u64 = 2;
    pub const NOISE: u64 = 3;
}

/// Analytic shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        #[serde(default)]
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box with edge lengths `size`.
    Box {
        #[serde(default)]
        center: [f64; 3],
        size: [f64; 3],
    },
    Union { parts: Vec<Shape> },
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Self::Sphere { center: [0.0; 3], radius }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Sphere { center, radius } => {
                if !(*radius > 0.0 && radius.is_finite()) || center.iter().any(|c| !c.is_finite()) {
                    return Err(domain("sphere needs a finite center and positive radius"));
                }
            }
            Self::Box { center, size } => {
                if size.iter().any(|s| !(*s > 0.0 && s.is_finite())) || center.iter().any(|c| !c.is_finite()) {
                    return Err(domain("box needs a finite center and positive edge lengths"));
                }
            }
            Self::Union { parts } => {
                if parts.is_empty() {
                    return Err(domain("union of no shapes"));
                }
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Smallest `t > 0` with `origin + t·dir` on the surface.
    pub fn ray_hit(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Self::Sphere { center, radius } => {
                let oc = origin.coords - v3(*center);
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > 0.0)
            }
            Self::Box { center, size } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let lo = center[k] - size[k] / 2.0;
                    let hi = center[k] + size[k] / 2.0;
                    if dir[k] == 0.0 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - origin[k]) / dir[k], (hi - origin[k]) / dir[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    None
                } else if t0 > 0.0 {
                    Some(t0)
                } else if t1 > 0.0 {
                    Some(t1)
                } else {
                    None
                }
            }
            Self::Union { parts } => parts.iter().filter_map(|p| p.ray_hit(origin, dir)).min_by(f64::total_cmp),
        }
    }

    /// Strictly inside the solid.
    pub fn contains(&self, p: &Point3) -> bool {
        match self {
            Self::Sphere { center, radius } => (p.coords - v3(*center)).norm() < *radius,
            Self::Box { center, size } => (0..3).all(|k| (p[k] - center[k]).abs() < size[k] / 2.0),
            Self::Union { parts } => parts.iter().any(|s| s.contains(p)),
        }
    }

    fn primitives(&self) -> Vec<&Shape> {
        match self {
            Self::Union { parts } => parts.iter().flat_map(Shape::primitives).collect(),
            other => vec![other],
        }
    }

    fn area(&self) -> f64 {
        match self {
            Self::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Self::Box { size, .. } => 2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]),
            Self::Union { parts } => parts.iter().map(Shape::area).sum(),
        }
    }

    fn sample_primitive(&self, rng: &mut SplitMix64) -> Point3 {
        match self {
            Self::Sphere { center, radius } => loop {
                let d = Vector3::new(rng.normal(), rng.normal(), rng.normal());
                let n = d.norm();
                if n > 1e-12 {
                    return Point3::from(v3(*center) + d * (radius / n));
                }
            },
            Self::Box { center, size } => {
                let faces = [size[1] * size[2], size[0] * size[2], size[0] * size[1]];
                let r = rng.uniform() * (faces[0] + faces[1] + faces[2]);
                let axis = if r < faces[0] { 0 } else if r < faces[0] + faces[1] { 1 } else { 2 };
                let side = if rng.uniform() < 0.5 { -0.5 } else { 0.5 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis { side } else { rng.uniform() - 0.5 };
                    p[k] = center[k] + p[k] * size[k];
                }
                Point3::new(p[0], p[1], p[2])
            }
            Self::Union { .. } => unreachable!("unions are flattened before sampling"),
        }
    }

    /// `n` points distributed uniformly by area over the surface. Union
    /// samples that fall inside another part are redrawn.
    pub fn sample_surface(&self, n: usize, rng: &mut SplitMix64) -> Vec<Point3> {
        let prims = self.primitives();
        let areas: Vec<f64> = prims.iter().map(|p| p.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 1000 * n.max(1) {
            attempts += 1;
            let mut r = rng.uniform() * total;
            let mut k = 0;
            while k + 1 < prims.len() && r >= areas[k] {
                r -= areas[k];
                k += 1;
            }
            let p = prims[k].sample_primitive(rng);
            let hidden = prims.iter().enumerate().any(|(j, s)| j != k && s.contains(&p));
            if !hidden {
                out.push(p);
            }
        }
        out
    }
}

/// Exact depth image of `shape` by casting the ray through every pixel center.
pub fn ray_cast_view(shape: &Shape, view: &View, resolution: (usize, usize), background_depth: f64) -> DepthImage {
    let (height, width) = resolution;
    let k = &view.intrinsics;
    let rt = view.pose.rotation().transpose();
    let mut img = DepthImage::background(width, height, background_depth);
    for y in 0..height {
        for x in 0..width {
            let (origin, dir) = match k.model {
                ProjectionModel::Perspective => (view.pose.center(), rt * k.depth_ray(x as f64, y as f64)),
                ProjectionModel::Orthographic => {
                    let q = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 0.0);
                    (view.pose.to_world(&q), rt * Vector3::z())
                }
            };
            if let Some(t) = shape.ray_hit(&origin, &dir) {
                if img.is_foreground_value(t) && t < background_depth {
                    img.set(x, y, t);
                }
            }
        }
    }
    img
}

fn default_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Ground-truth surface samples.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fraction of each view's foreground removed from the inputs.
    #[serde(default)]
    pub hole_fraction: f64,
    /// Noise standard deviation of the perturbed views, as a fraction of the
    /// ground-truth depth range.
    #[serde(default)]
    pub noise_fraction: f64,
}

impl SceneSpec {
    /// Sphere of radius 0.5 with 30% holes and noise at 1% of the depth range.
    pub fn perturbed_sphere() -> Self {
        Self { shape: Shape::sphere(0.5), samples: default_samples(), hole_fraction: 0.3, noise_fraction: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(0.0..=0.9).contains(&self.hole_fraction) {
            return Err(domain(format!("hole fraction must lie in [0, 0.9], got {}", self.hole_fraction)));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(domain("noise fraction must be finite and non-negative"));
        }
        if self.samples == 0 {
            return Err(domain("at least one surface sample is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub gt_cloud: PointCloud,
    pub gt_views: Vec<DepthImage>,
    /// Ground truth with holes.
    pub inputs: Vec<DepthImage>,
    /// Ground truth with Gaussian depth noise on every foreground pixel.
    pub perturbed: Vec<DepthImage>,
    pub depth_range: DepthRange,
}

/// Removes exactly `round(fraction · foreground)` pixels from `img` as a
/// union of random disks. Each disk is centred on a remaining foreground
/// pixel; the last disk is trimmed to its nearest pixels to hit the count.
pub fn carve_holes(img: &DepthImage, fraction: f64, rng: &mut SplitMix64) -> DepthImage {
    let mut out = img.clone();
    let mut fg: Vec<usize> = img.foreground().map(|(i, ..)| i).collect();
    let target = (fraction * fg.len() as f64).round() as usize;
    let (w, h) = (img.width(), img.height());
    let scale = (fg.len() as f64).sqrt();
    let mut removed = 0;
    while removed < target {
        let center = fg[rng.below(fg.len())];
        let radius = scale * (0.05 + 0.1 * rng.uniform());
        let (cx, cy) = ((center % w) as f64, (center / w) as f64);
        let r = radius.ceil() as i64;
        let mut disk: Vec<(f64, usize)> = Vec::new();
        for y in (cy as i64 - r).max(0)..=(cy as i64 + r).min(h as i64 - 1) {
            for x in (cx as i64 - r).max(0)..=(cx as i64 + r).min(w as i64 - 1) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let i = y as usize * w + x as usize;
                if d2 <= radius * radius && out.is_foreground(i) {
                    disk.push((d2, i));
                }
            }
        }
        disk.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        disk.truncate(target - removed);
        for &(_, i) in &disk {
            out.data_mut()[i] = img.background_depth();
        }
        removed += disk.len();
        fg.retain(|&i| out.is_foreground(i));
    }
    out
}

/// Builds the ground truth, holed inputs and noisy views of one scene.
pub fn make_scene(spec: &SceneSpec, rig: &CameraRig, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    rig.validate()?;
    let res = (rig.height, rig.width);
    let mut rng = SplitMix64::stream(seed, purpose::SURFACE);
    let gt_cloud = PointCloud::new(spec.shape.sample_surface(spec.samples, &mut rng));
    let gt_views: Vec<DepthImage> =
        rig.views.par_iter().map(|v| ray_cast_view(&spec.shape, v, res, DEFAULT_BACKGROUND)).collect();
    let depth_range =
        DepthRange::from_views(&gt_views).ok_or_else(|| contract("shape is not visible from any rig view"))?;

    let inputs = gt_views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut rng = SplitMix64::stream(seed ^ (k as u64).wrapping_mul(GOLDEN_GAMMA), purpose::HOLES);
            if spec.hole_fraction > 0.0 {
                carve_holes(v, spec.hole_fraction, &mut rng)
            } else {
                v.clone()
            }
        })
        .collect();

    let sigma = spec.noise_fraction * depth_range.span();
    let perturbed = gt_views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let mut rng = SplitMix64::stream(seed ^ (k as u64).wrapping_mul(GOLDEN_GAMMA), purpose::NOISE);
            let mut out = v.clone();
            if sigma > 0.0 {
                let bg = v.background_depth();
                for d in out.data_mut().iter_mut() {
                    if *d != bg {
                        *d += sigma * rng.normal();
                    }
                }
            }
            out
        })
        .collect();

    Ok(SyntheticScene { spec: spec.clone(), seed, gt_cloud, gt_views, inputs, perturbed, depth_range })
}
