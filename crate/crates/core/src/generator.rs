//! Differentiable generators `G(z; X)` that map a shape descriptor to a
//! stack of depth views, and a small radial-basis generator used to drive
//! descriptor optimization end to end.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, Point3, ProjectionModel, View};
use crate::consistency::DepthRange;
use crate::error::{contract, domain, Error, Result};
use crate::raster::{render_depth, DepthImage, DEFAULT_BACKGROUND, FOREGROUND_EPS};

/// Flat latent vector fed to a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShapeDescriptor {
    values: Vec<f64>,
}

impl ShapeDescriptor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(domain(format!("descriptor entry {i} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for ShapeDescriptor {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ShapeDescriptor> for Vec<f64> {
    fn from(z: ShapeDescriptor) -> Self {
        z.values
    }
}

/// Outcome of estimating `z̊` from the input views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorFit {
    pub descriptor: ShapeDescriptor,
    /// The fit had no usable pixels or its normal equations could not be
    /// solved, and `descriptor` is all zeros.
    pub fell_back: bool,
    /// Number of residual pixels in the last solve.
    pub rows: usize,
}

/// A differentiable map from descriptors to depth views.
pub trait Generator: Sync {
    fn descriptor_dim(&self) -> usize;

    /// Renders one depth image per rig view.
    fn forward(&self, z: &ShapeDescriptor, inputs: &[DepthImage]) -> Result<Vec<DepthImage>>;

    /// Vector-Jacobian product: gradient over `z` of `⟨upstream, forward(z)⟩`.
    fn backward(&self, z: &ShapeDescriptor, inputs: &[DepthImage], upstream: &[Vec<f64>]) -> Result<Vec<f64>>;

    /// Initial descriptor estimate for the given input views.
    fn initial_descriptor(&self, inputs: &[DepthImage]) -> Result<DescriptorFit>;
}

pub fn initial_descriptor(generator: &dyn Generator, inputs: &[DepthImage]) -> Result<DescriptorFit> {
    generator.initial_descriptor(inputs)
}

/// Undisplaced surface of the toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseShape {
    /// Fibonacci-lattice samples of a sphere centred at the origin.
    Sphere { radius: f64, samples: usize },
    /// Explicit points, displaced along their direction from the origin.
    Points { points: Vec<[f64; 3]> },
}

impl Default for BaseShape {
    fn default() -> Self {
        Self::Sphere { radius: 0.5, samples: 60_000 }
    }
}

fn default_amplitude() -> f64 {
    0.05
}

fn default_ridge() -> f64 {
    1e-6
}

fn default_background() -> f64 {
    DEFAULT_BACKGROUND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorConfig {
    pub centers: Vec<[f64; 3]>,
    pub bandwidth: f64,
    /// Peak radial displacement of one unit descriptor entry.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub base: BaseShape,
    /// Ridge weight of the initial fit.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_background")]
    pub background_depth: f64,
}

impl ToyGeneratorConfig {
    /// `n` centers spread over a sphere of the given radius.
    pub fn fibonacci(n: usize, radius: f64, bandwidth: f64) -> Self {
        Self {
            centers: fibonacci_sphere(n, radius).iter().map(|p| [p.x, p.y, p.z]).collect(),
            bandwidth,
            amplitude: default_amplitude(),
            base: BaseShape::default(),
            ridge: default_ridge(),
            background_depth: DEFAULT_BACKGROUND,
        }
    }

    /// 32 centers on the default sphere with bandwidth 0.15.
    pub fn standard() -> Self {
        Self::fibonacci(32, 0.5, 0.15)
    }
}

/// Near-uniform points on a sphere centred at the origin.
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Point3::new(radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z)
        })
        .collect()
}

/// Splat footprint radius in pixels.
const SPLAT_RADIUS: f64 = 1.5;
/// Minimum accumulated splat weight for a pixel to count as foreground.
pub const SOFT_COVERAGE: f64 = 0.3;
/// Soft-min temperature as a fraction of the base shape's depth range.
const TEMPERATURE_FRACTION: f64 = 0.01;
const FIT_ITERATIONS: usize = 20;

fn splat_weight(d2: f64) -> f64 {
    let r2 = SPLAT_RADIUS * SPLAT_RADIUS;
    if d2 >= r2 {
        0.0
    } else {
        let s = 1.0 - d2 / r2;
        s * s
    }
}

/// `∂w/∂(Δ²)`.
fn splat_weight_slope(d2: f64) -> f64 {
    let r2 = SPLAT_RADIUS * SPLAT_RADIUS;
    if d2 >= r2 {
        0.0
    } else {
        -2.0 * (1.0 - d2 / r2) / r2
    }
}

/// A displaced point seen from one view together with the derivatives of
/// its pixel coordinates and depth with respect to its displacement.
#[derive(Debug, Clone, Copy)]
struct Projected {
    u: f64,
    v: f64,
    d: f64,
    du: f64,
    dv: f64,
    dd: f64,
}

/// Per-pixel accumulators of one soft render.
struct SoftImage {
    width: usize,
    height: usize,
    min_depth: Vec<f64>,
    mass: Vec<f64>,
    weighted: Vec<f64>,
    coverage: Vec<f64>,
    depth: Vec<f64>,
}

/// Radial-basis displacement of a base surface rendered through a soft
/// z-buffer.
///
/// Point `p_i` moves to `p_i + n_i·Σ_c z_c φ_c(p_i)` where `n_i` is its
/// radial direction and `φ_c` a Gaussian of the configured bandwidth and
/// amplitude around center `c`, cut off at four bandwidths. Each point
/// splats onto the 3×3 pixels around its projection; a pixel's depth is
/// the soft minimum of the splatted depths with temperature set to 1% of
/// the base shape's depth range. The inputs only fix the resolution.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    config: ToyGeneratorConfig,
    rig: CameraRig,
    base: Vec<Point3>,
    normals: Vec<Vector3<f64>>,
    /// CSR layout of the non-zero `φ_c(p_i)`.
    offsets: Vec<usize>,
    influence: Vec<(usize, f64)>,
    temperature: f64,
}

impl ToyGenerator {
    pub fn new(config: ToyGeneratorConfig, rig: CameraRig) -> Result<Self> {
        rig.validate()?;
        if !(config.bandwidth > 0.0 && config.bandwidth.is_finite()) {
            return Err(domain(format!("bandwidth must be positive, got {}", config.bandwidth)));
        }
        if config.centers.is_empty() {
            return Err(domain("toy generator needs at least one center"));
        }
        if !(config.amplitude.is_finite() && config.amplitude != 0.0) {
            return Err(domain("amplitude must be finite and non-zero"));
        }
        if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
            return Err(domain("ridge must be finite and non-negative"));
        }
        if config.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(domain("centers must be finite"));
        }
        let base = match &config.base {
            BaseShape::Sphere { radius, samples } => {
                if !(*radius > 0.0) || *samples == 0 {
                    return Err(domain("sphere base needs a positive radius and samples"));
                }
                fibonacci_sphere(*samples, *radius)
            }
            BaseShape::Points { points } => points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
        };
        let mut normals = Vec::with_capacity(base.len());
        for p in &base {
            let n = p.coords.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(domain("base points must be finite and away from the origin"));
            }
            normals.push(p.coords / n);
        }

        let b = config.bandwidth;
        let cutoff2 = (4.0 * b) * (4.0 * b);
        let centers: Vec<Point3> = config.centers.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect();
        let mut offsets = Vec::with_capacity(base.len() + 1);
        let mut influence = Vec::new();
        offsets.push(0);
        for p in &base {
            for (c, center) in centers.iter().enumerate() {
                let r2 = (p - center).norm_squared();
                if r2 < cutoff2 {
                    influence.push((c, config.amplitude * (-r2 / (2.0 * b * b)).exp()));
                }
            }
            offsets.push(influence.len());
        }

        let hard: Vec<DepthImage> = rig
            .views
            .iter()
            .map(|v| render_depth(&base, v, (rig.height, rig.width), config.background_depth))
            .collect();
        let range = DepthRange::from_views(&hard).ok_or_else(|| domain("base shape is not visible from the rig"))?;
        let temperature = TEMPERATURE_FRACTION * range.span().max(1e-9);

        Ok(Self { config, rig, base, normals, offsets, influence, temperature })
    }

    pub fn config(&self) -> &ToyGeneratorConfig {
        &self.config
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn base_points(&self) -> &[Point3] {
        &self.base
    }

    fn influences(&self, i: usize) -> &[(usize, f64)] {
        &self.influence[self.offsets[i]..self.offsets[i + 1]]
    }

    fn displacement(&self, z: &[f64], i: usize) -> f64 {
        self.influences(i).iter().map(|&(c, phi)| z[c] * phi).sum()
    }

    /// The displaced surface points for descriptor `z`.
    pub fn displaced_points(&self, z: &ShapeDescriptor) -> Result<Vec<Point3>> {
        self.check_descriptor(z)?;
        Ok((0..self.base.len())
            .map(|i| self.base[i] + self.normals[i] * self.displacement(z.values(), i))
            .collect())
    }

    fn check_descriptor(&self, z: &ShapeDescriptor) -> Result<()> {
        if z.len() != self.config.centers.len() {
            return Err(contract(format!(
                "descriptor has {} entries, generator has {} centers",
                z.len(),
                self.config.centers.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &[DepthImage]) -> Result<()> {
        if inputs.is_empty() {
            return Ok(());
        }
        if inputs.len() != self.rig.len() {
            return Err(contract(format!("{} inputs for a {}-view rig", inputs.len(), self.rig.len())));
        }
        if inputs.iter().any(|x| x.width() != self.rig.width || x.height() != self.rig.height) {
            return Err(contract("input resolution differs from the rig"));
        }
        Ok(())
    }

    fn project_all(&self, view: &View, points: &[Point3]) -> Vec<Option<Projected>> {
        let r = view.pose.rotation();
        let k = &view.intrinsics;
        points
            .iter()
            .zip(&self.normals)
            .map(|(p, n)| {
                let q = view.pose.to_camera(p);
                let dq = r * n;
                let (u, v, du, dv) = match k.model {
                    ProjectionModel::Perspective => {
                        if !(q.z > 0.0) {
                            return None;
                        }
                        let iz = 1.0 / q.z;
                        (
                            k.fx * q.x * iz + k.cx,
                            k.fy * q.y * iz + k.cy,
                            k.fx * (dq.x * q.z - q.x * dq.z) * iz * iz,
                            k.fy * (dq.y * q.z - q.y * dq.z) * iz * iz,
                        )
                    }
                    ProjectionModel::Orthographic => (k.fx * q.x + k.cx, k.fy * q.y + k.cy, k.fx * dq.x, k.fy * dq.y),
                };
                let fg = q.z > 0.0 && q.z < self.config.background_depth - FOREGROUND_EPS;
                (fg && u.is_finite() && v.is_finite()).then_some(Projected { u, v, d: q.z, du, dv, dd: dq.z })
            })
            .collect()
    }

    /// Pixels covered by the splat of a point, with their weights and the
    /// offsets `(u − x, v − y)`.
    fn footprint(&self, p: &Projected) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        let (w, h) = (self.rig.width as i64, self.rig.height as i64);
        let (cx, cy) = (p.u.round() as i64, p.v.round() as i64);
        let (u, v) = (p.u, p.v);
        (-1..=1).flat_map(move |dy| {
            (-1..=1).filter_map(move |dx| {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w || y >= h {
                    return None;
                }
                let (ox, oy) = (u - x as f64, v - y as f64);
                let wt = splat_weight(ox * ox + oy * oy);
                (wt > 0.0).then_some(((y * w + x) as usize, wt, ox, oy))
            })
        })
    }

    fn soft_render(&self, projected: &[Option<Projected>]) -> SoftImage {
        let (width, height) = (self.rig.width, self.rig.height);
        let n = width * height;
        let mut min_depth = vec![f64::INFINITY; n];
        for p in projected.iter().flatten() {
            for (i, _, _, _) in self.footprint(p) {
                if p.d < min_depth[i] {
                    min_depth[i] = p.d;
                }
            }
        }
        let mut mass = vec![0.0; n];
        let mut weighted = vec![0.0; n];
        let mut coverage = vec![0.0; n];
        for p in projected.iter().flatten() {
            for (i, w, _, _) in self.footprint(p) {
                let a = w * (-(p.d - min_depth[i]) / self.temperature).exp();
                mass[i] += a;
                weighted[i] += a * p.d;
                coverage[i] += w;
            }
        }
        let depth = (0..n)
            .map(|i| {
                if coverage[i] >= SOFT_COVERAGE {
                    weighted[i] / mass[i]
                } else {
                    self.config.background_depth
                }
            })
            .collect();
        SoftImage { width, height, min_depth, mass, weighted, coverage, depth }
    }

    /// `∂D_pixel/∂δ_i` for every foreground pixel in the splat of point `p`.
    fn pixel_derivatives<'a>(&'a self, img: &'a SoftImage, p: &'a Projected) -> impl Iterator<Item = (usize, f64)> + 'a {
        let tau = self.temperature;
        self.footprint(p).filter_map(move |(i, w, ox, oy)| {
            if img.coverage[i] < SOFT_COVERAGE {
                return None;
            }
            let a_total = img.mass[i];
            let depth = img.weighted[i] / a_total;
            let e = (-(p.d - img.min_depth[i]) / tau).exp();
            let a = w * e;
            let d_depth = (a / a_total) * (1.0 - (p.d - depth) / tau);
            let d_weight = e * (p.d - depth) / a_total;
            let slope = splat_weight_slope(ox * ox + oy * oy);
            let dw = slope * 2.0 * (ox * p.du + oy * p.dv);
            Some((i, d_depth * p.dd + d_weight * dw))
        })
    }

    fn render_view(&self, view: &View, points: &[Point3]) -> (Vec<Option<Projected>>, SoftImage) {
        let projected = self.project_all(view, points);
        let img = self.soft_render(&projected);
        (projected, img)
    }

    fn to_image(&self, img: SoftImage) -> Result<DepthImage> {
        DepthImage::from_data(img.width, img.height, img.depth, self.config.background_depth)
    }

    /// Rows `∂D/∂z` of the pixels selected by `keep`, as a dense
    /// `pixels × centers` matrix in row-major order.
    fn view_jacobian(
        &self,
        projected: &[Option<Projected>],
        img: &SoftImage,
        keep: &[bool],
    ) -> Vec<f64> {
        let c = self.config.centers.len();
        let mut jac = vec![0.0; img.width * img.height * c];
        for (i, p) in projected.iter().enumerate() {
            let Some(p) = p else { continue };
            let infl = self.influences(i);
            if infl.is_empty() {
                continue;
            }
            for (pix, g) in self.pixel_derivatives(img, p) {
                if !keep[pix] {
                    continue;
                }
                let row = &mut jac[pix * c..(pix + 1) * c];
                for &(k, phi) in infl {
                    row[k] += g * phi;
                }
            }
        }
        jac
    }
}

impl Generator for ToyGenerator {
    fn descriptor_dim(&self) -> usize {
        self.config.centers.len()
    }

    fn forward(&self, z: &ShapeDescriptor, inputs: &[DepthImage]) -> Result<Vec<DepthImage>> {
        self.check_inputs(inputs)?;
        let points = self.displaced_points(z)?;
        self.rig
            .views
            .par_iter()
            .map(|view| self.to_image(self.render_view(view, &points).1))
            .collect()
    }

    fn backward(&self, z: &ShapeDescriptor, inputs: &[DepthImage], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_inputs(inputs)?;
        let n_pix = self.rig.width * self.rig.height;
        if upstream.len() != self.rig.len() || upstream.iter().any(|u| u.len() != n_pix) {
            return Err(contract("upstream gradients do not match the rig"));
        }
        let points = self.displaced_points(z)?;
        let per_view: Vec<Vec<f64>> = self
            .rig
            .views
            .par_iter()
            .zip(upstream)
            .map(|(view, up)| {
                let (projected, img) = self.render_view(view, &points);
                let mut g = vec![0.0; self.descriptor_dim()];
                for (i, p) in projected.iter().enumerate() {
                    let Some(p) = p else { continue };
                    let infl = self.influences(i);
                    if infl.is_empty() {
                        continue;
                    }
                    let s: f64 = self.pixel_derivatives(&img, p).map(|(pix, d)| up[pix] * d).sum();
                    if s != 0.0 {
                        for &(c, phi) in infl {
                            g[c] += s * phi;
                        }
                    }
                }
                g
            })
            .collect();
        let mut grad = vec![0.0; self.descriptor_dim()];
        for g in per_view {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Generator("non-finite descriptor gradient".into()));
        }
        Ok(grad)
    }

    /// Ridge-regularized Gauss-Newton fit of the descriptor to the input
    /// foreground depths, starting from zero.
    fn initial_descriptor(&self, inputs: &[DepthImage]) -> Result<DescriptorFit> {
        if inputs.len() != self.rig.len() {
            return Err(contract(format!("{} inputs for a {}-view rig", inputs.len(), self.rig.len())));
        }
        self.check_inputs(inputs)?;
        let c = self.descriptor_dim();
        let lambda = self.config.ridge;
        let fallback = |rows| DescriptorFit { descriptor: ShapeDescriptor::zeros(c), fell_back: true, rows };
        let mut z = DVector::<f64>::zeros(c);
        let mut rows = 0;
        for _ in 0..FIT_ITERATIONS {
            let zd = ShapeDescriptor::new(z.iter().copied().collect())?;
            let points = self.displaced_points(&zd)?;
            let (jtj, jtr, n_rows) = self
                .rig
                .views
                .par_iter()
                .zip(inputs)
                .map(|(view, x)| {
                    let (projected, img) = self.render_view(view, &points);
                    let keep: Vec<bool> = (0..x.len())
                        .map(|i| x.is_foreground(i) && img.coverage[i] >= SOFT_COVERAGE)
                        .collect();
                    let jac = self.view_jacobian(&projected, &img, &keep);
                    let mut jtj = DMatrix::<f64>::zeros(c, c);
                    let mut jtr = DVector::<f64>::zeros(c);
                    let mut n = 0;
                    for pix in (0..keep.len()).filter(|&i| keep[i]) {
                        let row = &jac[pix * c..(pix + 1) * c];
                        let r = x.data()[pix] - img.depth[pix];
                        n += 1;
                        for a in 0..c {
                            if row[a] == 0.0 {
                                continue;
                            }
                            jtr[a] += row[a] * r;
                            for b in 0..c {
                                jtj[(a, b)] += row[a] * row[b];
                            }
                        }
                    }
                    (jtj, jtr, n)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((DMatrix::zeros(c, c), DVector::zeros(c), 0), |acc, v| (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2));
            rows = n_rows;
            if rows == 0 {
                return Ok(fallback(0));
            }
            let lhs = jtj + DMatrix::identity(c, c) * lambda;
            let rhs = jtr - &z * lambda;
            let Some(chol) = lhs.cholesky() else { return Ok(fallback(rows)) };
            let step = chol.solve(&rhs);
            if step.iter().any(|v| !v.is_finite()) {
                return Ok(fallback(rows));
            }
            z += &step;
            if step.norm() <= 1e-12 * (1.0 + z.norm()) {
                break;
            }
        }
        Ok(DescriptorFit { descriptor: ShapeDescriptor::new(z.iter().copied().collect())?, fell_back: false, rows })
    }
}
