//! Evaluation: view fusion, Chamfer distance and normal estimation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::camera::{CameraRig, Pixel3, Point3};
use crate::energy::{generator_loss, GenNorm};
use crate::error::{contract, domain, Result};
use crate::raster::DepthImage;

/// Points with optional unit normals. A zero normal marks a point whose
/// neighbourhood was too small to estimate one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Point3>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(contract(format!("{} normals for {} points", normals.len(), points.len())));
        }
        if normals.iter().any(|n| *n != Vector3::zeros() && (n.norm() - 1.0).abs() > 1e-6) {
            return Err(domain("normals must be unit length or zero"));
        }
        Ok(Self { points, normals: Some(normals) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenation of two clouds; normals survive only if both have them.
    pub fn union(&self, other: &PointCloud) -> PointCloud {
        let points = self.points.iter().chain(&other.points).copied().collect();
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        PointCloud { points, normals }
    }
}

/// Back-projects every foreground pixel, view by view in row-major order.
pub fn fuse_views(views: &[DepthImage], rig: &CameraRig) -> Result<PointCloud> {
    if views.len() != rig.len() {
        return Err(contract(format!("{} views for a {}-view rig", views.len(), rig.len())));
    }
    let mut points = Vec::with_capacity(views.iter().map(DepthImage::foreground_count).sum());
    for (img, view) in views.iter().zip(&rig.views) {
        for (_, x, y, d) in img.foreground() {
            points.push(view.back_project(Pixel3::new(x as f64, y as f64, d))?);
        }
    }
    Ok(PointCloud::new(points))
}

/// Same mean-per-element norm as the data term, measured against ground truth.
pub fn gt_view_distance(v: &[DepthImage], gt: &[DepthImage], norm: GenNorm) -> Result<f64> {
    generator_loss(v, gt, norm)
}

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Range into the permuted point indices.
    start: usize,
    end: usize,
    axis: usize,
    split: f64,
    left: Option<usize>,
    right: Option<usize>,
}

const LEAF_SIZE: usize = 8;

/// Static kd-tree over a borrowed point set.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point3]) -> Self {
        let mut tree = Self { points, order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { start, end, axis: 0, split: 0.0, left: None, right: None });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i].coords);
            hi = hi.sup(&self.points[i].coords);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let split = pts[self.order[mid]][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node { start, end, axis, split, left: Some(left), right: Some(right) };
        id
    }

    /// Index and squared distance of the nearest point; ties go to the
    /// smaller index.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, q, &mut best);
        Some(best)
    }

    fn nearest_in(&self, id: usize, q: &Point3, best: &mut (usize, f64)) {
        let node = self.nodes[id];
        match (node.left, node.right) {
            (Some(l), Some(r)) => {
                let diff = q[node.axis] - node.split;
                let (near, far) = if diff < 0.0 { (l, r) } else { (r, l) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
            _ => {
                for &i in &self.order[node.start..node.end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
        }
    }

    /// Points within `radius` of `q` as `(index, squared distance)`, nearest
    /// first, ties by index.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_in(0, q, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn within_in(&self, id: usize, q: &Point3, r2: f64, out: &mut Vec<(usize, f64)>) {
        let node = self.nodes[id];
        match (node.left, node.right) {
            (Some(l), Some(r)) => {
                let diff = q[node.axis] - node.split;
                if diff < 0.0 || diff * diff <= r2 {
                    self.within_in(l, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.within_in(r, q, r2, out);
                }
            }
            _ => {
                for &i in &self.order[node.start..node.end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d <= r2 {
                        out.push((i, d));
                    }
                }
            }
        }
    }
}

fn mean_nearest(from: &[Point3], to: &KdTree, squared: bool) -> f64 {
    let sum: f64 = from
        .par_iter()
        .map(|p| {
            let d2 = to.nearest(p).expect("non-empty tree").1;
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / from.len() as f64
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance from `a` to
/// `b` plus the same from `b` to `a`. With `squared` the distances are
/// squared before averaging.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud, squared: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("Chamfer distance of an empty cloud"));
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    Ok(mean_nearest(&a.points, &tb, squared) + mean_nearest(&b.points, &ta, squared))
}

/// PCA normals over the `max_neighbors` nearest points within `radius`
/// (the point itself included), oriented toward the nearest camera center.
pub fn estimate_normals(cloud: &PointCloud, radius: f64, max_neighbors: usize, centers: &[Point3]) -> Result<PointCloud> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(domain(format!("radius must be positive, got {radius}")));
    }
    let tree = KdTree::build(&cloud.points);
    let normals = cloud
        .points
        .par_iter()
        .map(|p| {
            let mut near = tree.within(p, radius);
            near.truncate(max_neighbors);
            if near.len() < 3 {
                return Vector3::zeros();
            }
            let mean = near.iter().map(|&(i, _)| cloud.points[i].coords).sum::<Vector3<f64>>() / near.len() as f64;
            let cov = near.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = cloud.points[i].coords - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let n = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            let Some(cam) = centers
                .iter()
                .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
            else {
                return n.normalize();
            };
            let n = n.normalize();
            if n.dot(&(cam - p)) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect();
    PointCloud::with_normals(cloud.points.clone(), normals)
}

pub const NORMAL_RADIUS: f64 = 0.5;
pub const NORMAL_MAX_NEIGHBORS: usize = 30;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::rig_with_resolution;
    use crate::generator::fibonacci_sphere;
    use crate::raster::{render_depth, DEFAULT_BACKGROUND};

    fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
        let one = |x: &[Point3], y: &[Point3]| {
            x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn lcg_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n).map(|_| Point3::new(next(), next(), next())).collect()
    }

    #[test]
    fn chamfer_hand_values() {
        let a = PointCloud::new(vec![Point3::origin()]);
        let b = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)]);
        assert_eq!(chamfer_distance(&a, &b, false).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&a, &a, false).unwrap(), 0.0);
        let c = PointCloud::new(vec![Point3::new(2.0, 0.0, 0.0)]);
        assert_eq!(chamfer_distance(&a, &c, true).unwrap(), 8.0);
        assert!(chamfer_distance(&a, &PointCloud::default(), false).is_err());
    }

    #[test]
    fn kd_nearest_matches_brute_force() {
        let pts = lcg_points(500, 1);
        let tree = KdTree::build(&pts);
        for q in lcg_points(200, 2) {
            let (i, d) = tree.nearest(&q).unwrap();
            let bd = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            assert_eq!(d, bd);
            assert_eq!((pts[i] - q).norm_squared(), d);
            let r = 0.2;
            let got: Vec<usize> = tree.within(&q, r).iter().map(|x| x.0).collect();
            let mut want: Vec<(usize, f64)> =
                pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).filter(|x| x.1 <= r * r).collect();
            want.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, want.iter().map(|x| x.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn chamfer_matches_brute_force() {
        for k in 0..10 {
            let a = lcg_points(100, 10 + k);
            let b = lcg_points(80, 100 + k);
            let fast = chamfer_distance(&PointCloud::new(a.clone()), &PointCloud::new(b.clone()), false).unwrap();
            assert!((fast - brute_chamfer(&a, &b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn fuse_counts_and_single_pixel() {
        let rig = rig_with_resolution(4, 4);
        let mut views = vec![DepthImage::background(4, 4, DEFAULT_BACKGROUND); 8];
        views[3].set(1, 2, 1.7);
        let cloud = fuse_views(&views, &rig).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], rig.views[3].back_project(Pixel3::new(1.0, 2.0, 1.7)).unwrap());
        assert!(fuse_views(&views[..2], &rig).is_err());
    }

    #[test]
    fn fused_render_lies_on_sphere() {
        let rig = rig_with_resolution(64, 64);
        let pts = fibonacci_sphere(50_000, 0.5);
        let views: Vec<DepthImage> = rig.views.iter().map(|v| render_depth(&pts, v, (64, 64), DEFAULT_BACKGROUND)).collect();
        let cloud = fuse_views(&views, &rig).unwrap();
        assert_eq!(cloud.len(), views.iter().map(DepthImage::foreground_count).sum::<usize>());
        // rounding moves a point at most half a pixel sideways; at depth ≤ 2
        // that is under 2/64 · 0.71 in world units
        let bound = 2.0 / 64.0 * 0.71;
        let ok = cloud.points.iter().filter(|p| (p.coords.norm() - 0.5).abs() <= bound).count();
        assert!(ok as f64 >= 0.99 * cloud.len() as f64);
    }

    #[test]
    fn plane_normals() {
        let pts: Vec<Point3> = (0..100).map(|i| Point3::new((i % 10) as f64 * 0.05, (i / 10) as f64 * 0.05, 0.0)).collect();
        let cloud = estimate_normals(&PointCloud::new(pts), 0.5, 30, &[Point3::new(0.0, 0.0, 5.0)]).unwrap();
        for n in cloud.normals.unwrap() {
            assert!((n - Vector3::z()).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_are_radial() {
        let pts = fibonacci_sphere(4000, 0.5);
        let rig = rig_with_resolution(8, 8);
        let cloud = estimate_normals(&PointCloud::new(pts), NORMAL_RADIUS, NORMAL_MAX_NEIGHBORS, &rig.centers()).unwrap();
        let normals = cloud.normals.unwrap();
        let good = cloud
            .points
            .iter()
            .zip(&normals)
            .filter(|(p, n)| n.dot(&p.coords.normalize()) >= 5f64.to_radians().cos())
            .count();
        assert!(good as f64 >= 0.95 * normals.len() as f64, "{good}");
    }

    #[test]
    fn isolated_point_is_degenerate() {
        let pts = vec![Point3::origin(), Point3::new(10.0, 0.0, 0.0), Point3::new(10.1, 0.0, 0.0), Point3::new(10.0, 0.1, 0.0)];
        let cloud = estimate_normals(&PointCloud::new(pts), 0.5, 30, &[]).unwrap();
        let normals = cloud.normals.unwrap();
        assert_eq!(normals[0], Vector3::zeros());
        assert!((normals[1].norm() - 1.0).abs() < 1e-9);
        assert!(estimate_normals(&PointCloud::default(), 0.0, 30, &[]).is_err());
    }

    #[test]
    fn gt_distance_offset() {
        let a = vec![DepthImage::from_data(2, 1, vec![1.0, 2.0], 10.0).unwrap()];
        let b = vec![DepthImage::from_data(2, 1, vec![1.5, 2.5], 10.0).unwrap()];
        assert_eq!(gt_view_distance(&b, &a, GenNorm::L1).unwrap(), 0.5);
        assert_eq!(gt_view_distance(&a, &a, GenNorm::L2).unwrap(), 0.0);
    }
}
