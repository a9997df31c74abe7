//! Cross-view consistency distances, loss maps and the scalar consistency loss.
//!
//! For every target view `t` and source view `s`, the source is
//! pseudo-rendered into the target's pose, each target pixel takes the
//! closest candidate depth in its `U×U` cell, distances above a fraction of
//! the model's depth range are dropped, and the per-pixel minimum over the
//! `J` nearest source views forms the loss map `M^t`. The loss is the mean
//! of all loss-map entries over `N·H·W`.
//!
//! When `s = t` the candidates come from the partial input view `X_t`
//! instead of a reprojection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{contract, domain, Result};
use crate::raster::{input_as_candidates, reproject_view, DepthImage, ReprojectionBuffer};

/// Per-pixel distances; `None` marks excluded pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyDistanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Option<f64>>,
}

impl ConsistencyDistanceMap {
    pub fn excluded(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![None; width * height] }
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().flatten().copied()
    }

    pub fn present_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_some()).count()
    }
}

/// Pooled per-pixel loss `M^t`; excluded pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LossMap {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(domain(format!("invalid depth range ({min}, {max})")));
        }
        Ok(Self { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    /// Range of foreground depths across `views`.
    pub fn from_views(views: &[DepthImage]) -> Option<Self> {
        let (lo, hi) = views
            .iter()
            .filter_map(DepthImage::depth_bounds)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
        Self::new(lo, hi).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Sub-pixel grid size `U`.
    pub u_factor: usize,
    /// Number of source views pooled per target, `J`.
    pub j_views: usize,
    /// Distances above `outlier_fraction · depth range` are excluded.
    pub outlier_fraction: f64,
    /// Frozen depth range; derived from the views being scored when unset.
    pub depth_range: Option<DepthRange>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { u_factor: 5, j_views: 8, outlier_fraction: 0.025, depth_range: None }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self, n_views: usize) -> Result<()> {
        if self.u_factor == 0 {
            return Err(domain("u_factor must be at least 1"));
        }
        if self.j_views == 0 || self.j_views > n_views {
            return Err(domain(format!("j_views must lie in [1, {n_views}], got {}", self.j_views)));
        }
        if !(self.outlier_fraction > 0.0 && self.outlier_fraction < 1.0) {
            return Err(domain(format!("outlier_fraction must lie in (0, 1), got {}", self.outlier_fraction)));
        }
        if let Some(r) = self.depth_range {
            DepthRange::new(r.min, r.max)?;
        }
        Ok(())
    }

    /// Absolute outlier threshold in scene units.
    pub fn threshold(&self) -> Result<f64> {
        let r = self.depth_range.ok_or_else(|| contract("depth range is not set"))?;
        Ok(self.outlier_fraction * r.span())
    }

    /// Returns a copy whose depth range is fixed, deriving it from `views` if unset.
    pub fn resolved(&self, views: &[DepthImage]) -> Result<Self> {
        let mut cfg = *self;
        if cfg.depth_range.is_none() {
            cfg.depth_range = Some(
                DepthRange::from_views(views)
                    .ok_or_else(|| domain("cannot derive a depth range from views without foreground"))?,
            );
        }
        Ok(cfg)
    }
}

/// Which candidate won a pixel's closest-point pooling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Winner {
    pub candidate: f64,
    /// Source pixel that produced the candidate; `None` for input-view candidates.
    pub source_pixel: Option<usize>,
}

fn check_same_size(buffer: &ReprojectionBuffer, target: &DepthImage) -> Result<()> {
    if buffer.width() != target.width() || buffer.height() != target.height() {
        return Err(contract(format!(
            "buffer is {}×{}, target is {}×{}",
            buffer.width(),
            buffer.height(),
            target.width(),
            target.height()
        )));
    }
    Ok(())
}

fn pool_with_winners(buffer: &ReprojectionBuffer, target: &DepthImage) -> (ConsistencyDistanceMap, Vec<Option<Winner>>) {
    let (w, h) = (target.width(), target.height());
    let mut map = ConsistencyDistanceMap::excluded(w, h);
    let mut winners = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let v = target.get(x, y);
            let mut best: Option<(f64, Winner)> = None;
            for (c, src) in buffer.candidates(x, y) {
                let dist = (c - v).abs();
                if best.is_none_or(|(b, _)| dist < b) {
                    best = Some((dist, Winner { candidate: c, source_pixel: src }));
                }
            }
            if let Some((dist, win)) = best {
                map.data[y * w + x] = Some(dist);
                winners[y * w + x] = Some(win);
            }
        }
    }
    (map, winners)
}

/// Per pixel, the smallest `|candidate − target|` over the pixel's sub-cells.
/// Pixels without candidates are excluded.
pub fn closest_point_pooling(buffer: &ReprojectionBuffer, target: &DepthImage) -> Result<ConsistencyDistanceMap> {
    check_same_size(buffer, target)?;
    Ok(pool_with_winners(buffer, target).0)
}

/// Drops distances strictly above the outlier threshold.
pub fn suppress_outliers(d: &ConsistencyDistanceMap, cfg: &ConsistencyConfig) -> Result<ConsistencyDistanceMap> {
    let threshold = cfg.threshold()?;
    Ok(ConsistencyDistanceMap {
        width: d.width,
        height: d.height,
        data: d.data.iter().map(|v| v.filter(|&x| x <= threshold)).collect(),
    })
}

fn check_views(views: &[DepthImage], inputs: &[DepthImage], rig: &CameraRig) -> Result<()> {
    let n = rig.len();
    if views.len() != n || inputs.len() != n {
        return Err(contract(format!(
            "rig has {n} views but got {} views and {} inputs",
            views.len(),
            inputs.len()
        )));
    }
    for img in views.iter().chain(inputs) {
        if img.width() != rig.width || img.height() != rig.height {
            return Err(contract(format!(
                "image is {}×{}, rig expects {}×{}",
                img.width(),
                img.height(),
                rig.width,
                rig.height
            )));
        }
    }
    Ok(())
}

/// Distance map and winners for one (source, target) pairing.
struct PairResult {
    map: ConsistencyDistanceMap,
    winners: Vec<Option<Winner>>,
}

fn pair(
    s: usize,
    t: usize,
    views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &ConsistencyConfig,
    threshold: f64,
) -> Result<PairResult> {
    let target = &views[t];
    let buffer = if s == t {
        input_as_candidates(&inputs[t], cfg.u_factor)
    } else {
        reproject_view(&views[s], &rig.views[s], &rig.views[t], (rig.height, rig.width), cfg.u_factor)?
    };
    let (mut map, mut winners) = pool_with_winners(&buffer, target);
    for (d, w) in map.data.iter_mut().zip(winners.iter_mut()) {
        if d.is_some_and(|x| x > threshold) {
            *d = None;
            *w = None;
        }
    }
    Ok(PairResult { map, winners })
}

/// Outlier-suppressed consistency distance `D^t_s`.
pub fn pairwise_distance(
    source: usize,
    target: usize,
    views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyDistanceMap> {
    check_views(views, inputs, rig)?;
    let n = rig.len();
    if source >= n || target >= n {
        return Err(contract(format!("view index out of range: s = {source}, t = {target}, N = {n}")));
    }
    cfg.validate(n)?;
    let threshold = cfg.threshold()?;
    Ok(pair(source, target, views, inputs, rig, cfg, threshold)?.map)
}

/// All `N²` distance maps, indexed `[target][source]`.
pub fn all_pairwise_distances(
    views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &ConsistencyConfig,
) -> Result<Vec<Vec<ConsistencyDistanceMap>>> {
    check_views(views, inputs, rig)?;
    let n = rig.len();
    cfg.validate(n)?;
    let threshold = cfg.threshold()?;
    let flat: Vec<ConsistencyDistanceMap> = (0..n * n)
        .into_par_iter()
        .map(|k| pair(k % n, k / n, views, inputs, rig, cfg, threshold).map(|p| p.map))
        .collect::<Result<_>>()?;
    let mut it = flat.into_iter();
    Ok((0..n).map(|_| it.by_ref().take(n).collect()).collect())
}

/// The `J` views whose optical axes are angularly nearest view `target`,
/// nearest first, ties broken by ascending index. The target itself is
/// always first.
pub fn select_views(rig: &CameraRig, target: usize, j_views: usize) -> Result<Vec<usize>> {
    let n = rig.len();
    if target >= n {
        return Err(contract(format!("target {target} out of range for {n} views")));
    }
    if j_views == 0 || j_views > n {
        return Err(contract(format!("J = {j_views} outside [1, {n}]")));
    }
    let dir = rig.views[target].pose.direction();
    let mut order: Vec<(i64, usize)> = (0..n)
        .map(|s| {
            // quantized so rig symmetries compare as exact ties
            let cos = rig.views[s].pose.direction().dot(&dir);
            (-(cos * 1e9).round() as i64, s)
        })
        .collect();
    order.sort_unstable();
    Ok(order.into_iter().take(j_views).map(|(_, s)| s).collect())
}

/// Per-pixel minimum over `maps`; pixels excluded everywhere get 0. Also
/// returns, per pixel, the position in `maps` that attained the minimum
/// (first one on ties).
fn pool_min(maps: &[&ConsistencyDistanceMap]) -> (LossMap, Vec<Option<usize>>) {
    let (w, h) = (maps[0].width, maps[0].height);
    let mut data = vec![0.0; w * h];
    let mut arg = vec![None; w * h];
    for (i, (out, a)) in data.iter_mut().zip(arg.iter_mut()).enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (k, m) in maps.iter().enumerate() {
            if let Some(d) = m.data[i] {
                if best.is_none_or(|(b, _)| d < b) {
                    best = Some((d, k));
                }
            }
        }
        if let Some((d, k)) = best {
            *out = d;
            *a = Some(k);
        }
    }
    (LossMap { width: w, height: h, data }, arg)
}

/// Loss map `M^t`: per-pixel minimum over the `J` selected source maps.
///
/// `distances[s]` is `D^t_s` for the given target.
pub fn consistency_pooling(
    distances: &[ConsistencyDistanceMap],
    rig: &CameraRig,
    target: usize,
    j_views: usize,
) -> Result<LossMap> {
    if distances.len() != rig.len() {
        return Err(contract(format!("expected {} distance maps, got {}", rig.len(), distances.len())));
    }
    let first = &distances[0];
    if distances.iter().any(|d| d.width != first.width || d.height != first.height) {
        return Err(contract("distance maps differ in size"));
    }
    let selected = select_views(rig, target, j_views)?;
    let maps: Vec<&ConsistencyDistanceMap> = selected.iter().map(|&s| &distances[s]).collect();
    Ok(pool_min(&maps).0)
}

/// Like [`consistency_pooling`] but keeps pixels where every selected
/// distance was excluded as `None` instead of 0.
pub fn pooled_distances(
    distances: &[ConsistencyDistanceMap],
    rig: &CameraRig,
    target: usize,
    j_views: usize,
) -> Result<ConsistencyDistanceMap> {
    let loss = consistency_pooling(distances, rig, target, j_views)?;
    let selected = select_views(rig, target, j_views)?;
    let data = (0..loss.data.len())
        .map(|i| selected.iter().any(|&s| distances[s].data[i].is_some()).then_some(loss.data[i]))
        .collect();
    Ok(ConsistencyDistanceMap { width: loss.width, height: loss.height, data })
}

/// Discrete choices behind one loss-map entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub source_view: usize,
    /// `None` when the winning candidate came from the input view.
    pub source_pixel: Option<usize>,
    /// Sign of `candidate − target depth`.
    pub sign: f64,
}

/// Argmins and masks fixed by a forward pass, enough to differentiate the
/// loss with respect to every view pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTape {
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    /// `[target][pixel]`.
    pub assignments: Vec<Vec<Option<Assignment>>>,
}

#[derive(Debug, Clone)]
pub struct ConsistencyForward {
    pub loss: f64,
    pub loss_maps: Vec<LossMap>,
    pub tape: ConsistencyTape,
    /// Configuration with the depth range actually used.
    pub config: ConsistencyConfig,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward pass of the consistency loss, keeping the discrete assignments.
pub fn consistency_forward(
    views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyForward> {
    check_views(views, inputs, rig)?;
    let n = rig.len();
    let cfg = cfg.resolved(views)?;
    cfg.validate(n)?;
    let threshold = cfg.threshold()?;
    let selections: Vec<Vec<usize>> = (0..n).map(|t| select_views(rig, t, cfg.j_views)).collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> =
        selections.iter().enumerate().flat_map(|(t, sel)| sel.iter().map(move |&s| (t, s))).collect();
    let mut pairs: Vec<PairResult> = jobs
        .par_iter()
        .map(|&(t, s)| pair(s, t, views, inputs, rig, &cfg, threshold))
        .collect::<Result<_>>()?;

    let mut loss_maps = Vec::with_capacity(n);
    let mut assignments = Vec::with_capacity(n);
    let mut rest = pairs.as_mut_slice();
    for (t, sel) in selections.iter().enumerate() {
        let (mine, tail) = rest.split_at_mut(sel.len());
        rest = tail;
        let maps: Vec<&ConsistencyDistanceMap> = mine.iter().map(|p| &p.map).collect();
        let (lm, arg) = pool_min(&maps);
        let target = views[t].data();
        let asg = arg
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.map(|k| {
                    let win = mine[k].winners[i].expect("present distance has a winner");
                    Assignment {
                        source_view: sel[k],
                        source_pixel: win.source_pixel,
                        sign: sign(win.candidate - target[i]),
                    }
                })
            })
            .collect();
        loss_maps.push(lm);
        assignments.push(asg);
    }
    let total: f64 = loss_maps.iter().flat_map(|m| m.data.iter()).sum();
    let loss = total / (n * rig.width * rig.height) as f64;
    Ok(ConsistencyForward {
        loss,
        loss_maps,
        tape: ConsistencyTape { n_views: n, width: rig.width, height: rig.height, assignments },
        config: cfg,
    })
}

/// Scalar consistency loss and the per-target loss maps.
pub fn consistency_loss(
    views: &[DepthImage],
    inputs: &[DepthImage],
    rig: &CameraRig,
    cfg: &ConsistencyConfig,
) -> Result<(f64, Vec<LossMap>)> {
    let f = consistency_forward(views, inputs, rig, cfg)?;
    Ok((f.loss, f.loss_maps))
}
