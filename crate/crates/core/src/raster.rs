//! Depth images, point splatting and sub-pixel reprojection buffers.
//!
//! Pixel `(x, y)` of an image is centered at continuous coordinates
//! `(u, v) = (x, y)` and covers `[x − ½, x + ½) × [y − ½, y + ½)`.

use serde::{Deserialize, Serialize};

use crate::camera::{Point3, View};
use crate::error::{contract, domain, Result};
use crate::Pixel3;

/// Margin below the background depth under which a pixel counts as foreground.
pub const FOREGROUND_EPS: f64 = 1e-6;

/// Default far-plane depth for rendered views.
pub const DEFAULT_BACKGROUND: f64 = 10.0;

/// Row-major grid of depths with a far-plane background value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    background_depth: f64,
}

impl DepthImage {
    pub fn background(width: usize, height: usize, background_depth: f64) -> Self {
        Self { width, height, data: vec![background_depth; width * height], background_depth }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>, background_depth: f64) -> Result<Self> {
        if data.len() != width * height {
            return Err(contract(format!(
                "depth data has {} entries, expected {width}×{height}",
                data.len()
            )));
        }
        if !(background_depth.is_finite() && background_depth > 0.0) {
            return Err(domain("background depth must be finite and positive"));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite()) {
            return Err(domain(format!("non-finite depth {bad}")));
        }
        Ok(Self { width, height, data, background_depth })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn background_depth(&self) -> f64 {
        self.background_depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn is_foreground_value(&self, d: f64) -> bool {
        d < self.background_depth - FOREGROUND_EPS
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.is_foreground_value(self.data[index])
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&d| self.is_foreground_value(d)).count()
    }

    /// Foreground pixels as `(index, x, y, depth)`.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(move |(_, &d)| self.is_foreground_value(d))
            .map(move |(i, &d)| (i, i % w, i / w, d))
    }

    /// Minimum and maximum foreground depth.
    pub fn depth_bounds(&self) -> Option<(f64, f64)> {
        self.foreground().fold(None, |acc, (_, _, _, d)| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
    }

    pub fn same_shape(&self, other: &DepthImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Splats `points` into a depth image with a hard z-buffer.
///
/// Each point lands on the pixel nearest its projection and the smallest
/// depth wins. Points outside the image, behind the camera or beyond the
/// background plane are dropped.
pub fn render_depth(
    points: &[Point3],
    view: &View,
    resolution: (usize, usize),
    background_depth: f64,
) -> DepthImage {
    let (height, width) = resolution;
    let mut img = DepthImage::background(width, height, background_depth);
    for p in points {
        let Ok(px) = view.project(p) else { continue };
        if !(px.d > 0.0 && img.is_foreground_value(px.d)) {
            continue;
        }
        let (x, y) = (px.u.round(), px.v.round());
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            continue;
        }
        let i = y as usize * width + x as usize;
        if px.d < img.data[i] {
            img.data[i] = px.d;
        }
    }
    img
}

const NO_SOURCE: u32 = u32::MAX;

/// Per-pixel `U×U` grid of optional depth candidates, stored flattened as
/// an `(H·U)×(W·U)` row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionBuffer {
    width: usize,
    height: usize,
    u_factor: usize,
    depths: Vec<f64>,
    sources: Vec<u32>,
}

impl ReprojectionBuffer {
    pub fn empty(width: usize, height: usize, u_factor: usize) -> Self {
        let n = width * height * u_factor * u_factor;
        Self { width, height, u_factor, depths: vec![f64::INFINITY; n], sources: vec![NO_SOURCE; n] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u_factor(&self) -> usize {
        self.u_factor
    }

    fn cell_index(&self, x: usize, y: usize, i: usize, j: usize) -> usize {
        let u = self.u_factor;
        (y * u + j) * (self.width * u) + x * u + i
    }

    /// Candidate in sub-cell `(i, j)` of pixel `(x, y)`; `i` runs along x.
    pub fn candidate(&self, x: usize, y: usize, i: usize, j: usize) -> Option<f64> {
        let d = self.depths[self.cell_index(x, y, i, j)];
        d.is_finite().then_some(d)
    }

    /// Present candidates of pixel `(x, y)` with the source pixel index that
    /// produced them, in sub-cell raster order.
    pub fn candidates(&self, x: usize, y: usize) -> impl Iterator<Item = (f64, Option<usize>)> + '_ {
        let u = self.u_factor;
        (0..u).flat_map(move |j| {
            (0..u).filter_map(move |i| {
                let c = self.cell_index(x, y, i, j);
                let d = self.depths[c];
                d.is_finite().then(|| {
                    let s = self.sources[c];
                    (d, (s != NO_SOURCE).then_some(s as usize))
                })
            })
        })
    }

    /// Number of present candidates.
    pub fn occupancy(&self) -> usize {
        self.depths.iter().filter(|d| d.is_finite()).count()
    }

    pub fn sum(&self) -> f64 {
        self.depths.iter().filter(|d| d.is_finite()).sum()
    }

    /// Offers a candidate; the smaller depth wins a collision.
    fn offer(&mut self, x: usize, y: usize, i: usize, j: usize, depth: f64, source: Option<usize>) {
        let c = self.cell_index(x, y, i, j);
        if depth < self.depths[c] {
            self.depths[c] = depth;
            self.sources[c] = source.map_or(NO_SOURCE, |s| s as u32);
        }
    }

    /// Flattened `(H·U)×(W·U)` image; empty sub-cells hold `background_depth`.
    pub fn to_image(&self, background_depth: f64) -> DepthImage {
        let data = self.depths.iter().map(|&d| if d.is_finite() { d } else { background_depth }).collect();
        DepthImage {
            width: self.width * self.u_factor,
            height: self.height * self.u_factor,
            data,
            background_depth,
        }
    }
}

/// Continuous image coordinate to (pixel, sub-cell), or `None` off-image.
#[inline]
pub(crate) fn subcell(coord: f64, extent: usize, u_factor: usize) -> Option<(usize, usize)> {
    let s = coord + 0.5;
    if !(s >= 0.0 && s < extent as f64) {
        return None;
    }
    let px = s.floor();
    let sub = (((s - px) * u_factor as f64).floor() as usize).min(u_factor - 1);
    Some((px as usize, sub))
}

/// Maps source-view pixels into a target view and the derivative of the
/// reprojected depth with respect to the source depth.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Reprojector {
    source: View,
    target: View,
    /// Third row of `R_t · R_sᵀ`.
    depth_row: nalgebra::Vector3<f64>,
}

impl Reprojector {
    pub(crate) fn new(source: &View, target: &View) -> Self {
        let m = target.pose.rotation() * source.pose.rotation().transpose();
        Self { source: *source, target: *target, depth_row: m.row(2).transpose() }
    }

    /// Target pixel of source pixel `(x, y)` at depth `d`.
    #[inline]
    pub(crate) fn map(&self, x: usize, y: usize, d: f64) -> Option<Pixel3> {
        let p = self.source.back_project(Pixel3::new(x as f64, y as f64, d)).ok()?;
        self.target.project(&p).ok()
    }

    /// `∂d'/∂d`, constant in `d` for a fixed source pixel.
    #[inline]
    pub(crate) fn depth_slope(&self, x: usize, y: usize) -> f64 {
        self.depth_row.dot(&self.source.intrinsics.depth_ray(x as f64, y as f64))
    }
}

/// Pseudo-renders the foreground of `source` into the target view with a
/// `U×U` sub-pixel z-buffer per target pixel.
pub fn reproject_view(
    source: &DepthImage,
    source_view: &View,
    target_view: &View,
    target_size: (usize, usize),
    u_factor: usize,
) -> Result<ReprojectionBuffer> {
    if u_factor == 0 {
        return Err(domain("sub-pixel factor U must be at least 1"));
    }
    let (height, width) = target_size;
    let mut buf = ReprojectionBuffer::empty(width, height, u_factor);
    let rp = Reprojector::new(source_view, target_view);
    for (idx, x, y, d) in source.foreground() {
        let Some(p) = rp.map(x, y, d) else { continue };
        if !(p.d > 0.0) {
            continue;
        }
        let (Some((px, i)), Some((py, j))) = (subcell(p.u, width, u_factor), subcell(p.v, height, u_factor)) else {
            continue;
        };
        buf.offer(px, py, i, j, p.d, Some(idx));
    }
    Ok(buf)
}

/// Replicates every pixel of `target` into all `U×U` sub-cells.
pub fn upsample_target(target: &DepthImage, u_factor: usize) -> Result<ReprojectionBuffer> {
    if u_factor == 0 {
        return Err(domain("sub-pixel factor U must be at least 1"));
    }
    let mut buf = ReprojectionBuffer::empty(target.width, target.height, u_factor);
    for y in 0..target.height {
        for x in 0..target.width {
            let d = target.get(x, y);
            for j in 0..u_factor {
                for i in 0..u_factor {
                    let c = buf.cell_index(x, y, i, j);
                    buf.depths[c] = d;
                }
            }
        }
    }
    Ok(buf)
}

/// Candidate buffer built from input view `X_t` for the `t = s` pairing:
/// foreground pixels fill every sub-cell of their own pixel, background
/// pixels stay empty.
pub(crate) fn input_as_candidates(input: &DepthImage, u_factor: usize) -> ReprojectionBuffer {
    let mut buf = ReprojectionBuffer::empty(input.width, input.height, u_factor);
    for (_, x, y, d) in input.foreground() {
        for j in 0..u_factor {
            for i in 0..u_factor {
                let c = buf.cell_index(x, y, i, j);
                buf.depths[c] = d;
            }
        }
    }
    buf
}
