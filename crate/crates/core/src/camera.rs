//! Camera models, view poses and the pixel <-> scene transforms.
//!
//! Poses map world points into camera space as `q = R·P + t`. Camera space
//! is right-handed with +x to the right, +y down the image and +z along the
//! optical axis, so `q.z` is the depth stored in depth images.
//!
//! Two projection models are provided:
//!
//! * `Perspective`: depth-scaled pinhole, `u = fx·qx/qz + cx`, `v = fy·qy/qz + cy`.
//! * `Orthographic`: affine, `u = fx·qx + cx`, `v = fy·qy + cy`.
//!
//! In both cases the returned pixel carries `d = qz`, and `back_project` is
//! the exact inverse of `project`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// A pixel position with its depth: `(u, v)` in pixels, `d` in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel3 {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl Pixel3 {
    pub fn new(u: f64, v: f64, d: f64) -> Self {
        Self { u, v, d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionModel {
    #[default]
    Perspective,
    Orthographic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub model: ProjectionModel,
}

impl Intrinsics {
    pub fn perspective(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, model: ProjectionModel::Perspective };
        k.validate()?;
        Ok(k)
    }

    pub fn orthographic(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, model: ProjectionModel::Orthographic };
        k.validate()?;
        Ok(k)
    }

    /// Default intrinsics for a `width`×`height` image: focal length equal to
    /// the image width and the principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            model: ProjectionModel::Perspective,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(domain("intrinsics must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(domain(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Camera-space point for pixel `p`, before the pose is undone.
    pub fn unproject(&self, p: Pixel3) -> Result<Vector3<f64>> {
        if !(p.u.is_finite() && p.v.is_finite() && p.d.is_finite()) {
            return Err(domain("pixel coordinates must be finite"));
        }
        match self.model {
            ProjectionModel::Perspective => {
                if p.d <= 0.0 {
                    return Err(domain(format!("non-positive depth {}", p.d)));
                }
                Ok(Vector3::new(
                    (p.u - self.cx) * p.d / self.fx,
                    (p.v - self.cy) * p.d / self.fy,
                    p.d,
                ))
            }
            ProjectionModel::Orthographic => Ok(Vector3::new(
                (p.u - self.cx) / self.fx,
                (p.v - self.cy) / self.fy,
                p.d,
            )),
        }
    }

    /// Pixel for camera-space point `q`.
    pub fn project_camera(&self, q: &Vector3<f64>) -> Result<Pixel3> {
        match self.model {
            ProjectionModel::Perspective => {
                if !(q.z > 0.0) {
                    return Err(Error::BehindCamera(q.z));
                }
                Ok(Pixel3 {
                    u: self.fx * q.x / q.z + self.cx,
                    v: self.fy * q.y / q.z + self.cy,
                    d: q.z,
                })
            }
            ProjectionModel::Orthographic => Ok(Pixel3 {
                u: self.fx * q.x + self.cx,
                v: self.fy * q.y + self.cy,
                d: q.z,
            }),
        }
    }

    /// Camera-space direction `∂q/∂d` at pixel `(u, v)`.
    pub fn depth_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        match self.model {
            ProjectionModel::Perspective => {
                Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
            }
            ProjectionModel::Orthographic => Vector3::z(),
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct ViewPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// Row-major rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for ViewPose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        ViewPose::new(m, Vector3::from(r.translation))
    }
}

impl From<ViewPose> for PoseRepr {
    fn from(p: ViewPose) -> Self {
        let m = p.rotation;
        PoseRepr {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            translation: p.translation.into(),
        }
    }
}

const ROTATION_TOL: f64 = 1e-9;

impl ViewPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(domain("pose must be finite"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.iter().any(|x| x.abs() > ROTATION_TOL) {
            return Err(domain("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(domain("rotation determinant is not 1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`. The image +y axis points away
    /// from `up`; when the viewing direction is parallel to `up`, world +x
    /// is used instead.
    pub fn look_at(eye: &Point3, target: &Point3, up: &Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| domain("eye and target coincide"))?;
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Optical axis in world coordinates.
    pub fn direction(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    pub fn to_world(&self, q: &Vector3<f64>) -> Point3 {
        Point3::from(self.rotation.transpose() * (q - self.translation))
    }

    /// Applies `world_motion` to the scene the pose observes: the returned
    /// pose sees `M·P` where this pose saw `P`.
    pub fn compose_world(&self, motion: &ViewPose) -> Self {
        // q = R P + t with P = Mᵀ(P' - m)  =>  q = R Mᵀ P' + (t - R Mᵀ m)
        let rm = self.rotation * motion.rotation.transpose();
        Self { rotation: rm, translation: self.translation - rm * motion.translation }
    }
}

/// Lifts pixel `p` of a view into world space: `P = Rᵀ(K⁻¹p − t)`.
pub fn back_project(p: Pixel3, pose: &ViewPose, k: &Intrinsics) -> Result<Point3> {
    let q = k.unproject(p)?;
    Ok(pose.to_world(&q))
}

/// Projects world point `p` into a view: `p' = K(R P + t)`.
pub fn project(p: &Point3, pose: &ViewPose, k: &Intrinsics) -> Result<Pixel3> {
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return Err(domain("point must be finite"));
    }
    k.project_camera(&pose.to_camera(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub pose: ViewPose,
    pub intrinsics: Intrinsics,
}

impl View {
    pub fn new(pose: ViewPose, intrinsics: Intrinsics) -> Self {
        Self { pose, intrinsics }
    }

    pub fn back_project(&self, p: Pixel3) -> Result<Point3> {
        back_project(p, &self.pose, &self.intrinsics)
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel3> {
        project(p, &self.pose, &self.intrinsics)
    }
}

/// An ordered set of views sharing one image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<View>,
    pub height: usize,
    pub width: usize,
}

impl CameraRig {
    pub fn new(views: Vec<View>, height: usize, width: usize) -> Result<Self> {
        let rig = Self { views, height, width };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(domain(format!("a rig needs at least 2 views, got {}", self.views.len())));
        }
        if self.width == 0 || self.height == 0 {
            return Err(domain("rig resolution must be positive"));
        }
        for v in &self.views {
            v.intrinsics.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Keeps the first `n` views.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.views.len() {
            return Err(domain(format!("rig has only {} views, asked for {n}", self.views.len())));
        }
        Self::new(self.views[..n].to_vec(), self.height, self.width)
    }

    /// Same rig observing the scene after `motion` is applied to it.
    pub fn moved(&self, motion: &ViewPose) -> Self {
        Self {
            views: self
                .views
                .iter()
                .map(|v| View::new(v.pose.compose_world(motion), v.intrinsics))
                .collect(),
            height: self.height,
            width: self.width,
        }
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.views.iter().map(|v| v.pose.center()).collect()
    }
}

pub const DEFAULT_RIG_DISTANCE: f64 = 2.0;
pub const DEFAULT_RESOLUTION: usize = 256;

/// Eight cameras on the corners of a cube inscribed in a sphere of radius
/// `distance`, all looking at the origin.
///
/// Views are ordered lexicographically over the corner signs of (x, y, z)
/// with `-` before `+`.
pub fn cube_corner_rig(distance: f64, resolution: (usize, usize), k: Intrinsics) -> Result<CameraRig> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(domain(format!("rig distance must be positive, got {distance}")));
    }
    k.validate()?;
    let s = distance / 3f64.sqrt();
    let mut views = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let eye = Point3::new(sx * s, sy * s, sz * s);
                let pose = ViewPose::look_at(&eye, &Point3::origin(), &Vector3::z())?;
                views.push(View::new(pose, k));
            }
        }
    }
    CameraRig::new(views, resolution.0, resolution.1)
}

/// The default rig: distance 2, 256×256, f = 256, principal point at the
/// image center.
pub fn default_rig() -> CameraRig {
    rig_with_resolution(DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)
}

/// Cube-corner rig at the default distance whose intrinsics are scaled to a
/// `height`×`width` image so the field of view stays that of the default.
pub fn rig_with_resolution(height: usize, width: usize) -> CameraRig {
    let k = Intrinsics::default_for(width, height);
    cube_corner_rig(DEFAULT_RIG_DISTANCE, (height, width), k).expect("default rig is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_k() -> Intrinsics {
        Intrinsics::perspective(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn principal_axis_pixel_back_projects_on_axis() {
        let p = back_project(Pixel3::new(0.0, 0.0, 2.0), &ViewPose::identity(), &unit_k()).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn translation_offsets_back_projection() {
        let pose = ViewPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let p = back_project(Pixel3::new(0.0, 0.0, 2.0), &pose, &unit_k()).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn project_hand_computed() {
        let pose = ViewPose::identity();
        let p = project(&Point3::new(0.0, 0.0, 2.0), &pose, &unit_k()).unwrap();
        assert_eq!(p, Pixel3::new(0.0, 0.0, 2.0));

        let k = Intrinsics::perspective(2.0, 2.0, 128.0, 0.0).unwrap();
        let p = project(&Point3::new(1.0, 0.0, 2.0), &pose, &k).unwrap();
        assert_relative_eq!(p.u, 129.0);
        assert_relative_eq!(p.d, 2.0);
    }

    #[test]
    fn behind_camera_and_bad_depth_are_errors() {
        let pose = ViewPose::identity();
        assert!(matches!(
            project(&Point3::new(0.0, 0.0, -1.0), &pose, &unit_k()),
            Err(Error::BehindCamera(_))
        ));
        assert!(matches!(
            back_project(Pixel3::new(0.0, 0.0, 0.0), &pose, &unit_k()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            back_project(Pixel3::new(f64::NAN, 0.0, 1.0), &pose, &unit_k()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn orthographic_accepts_any_depth_sign() {
        let k = Intrinsics::orthographic(10.0, 10.0, 5.0, 5.0).unwrap();
        let pose = ViewPose::identity();
        let p = back_project(Pixel3::new(6.0, 5.0, -0.5), &pose, &k).unwrap();
        assert_relative_eq!(p.x, 0.1);
        let back = project(&p, &pose, &k).unwrap();
        assert_relative_eq!(back.u, 6.0);
        assert_relative_eq!(back.d, -0.5);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(ViewPose::new(m, Vector3::zeros()).is_err());
        let m = Matrix3::identity() * 1.001;
        assert!(ViewPose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn cube_rig_geometry() {
        let rig = default_rig();
        assert_eq!(rig.len(), 8);
        for v in &rig.views {
            assert_relative_eq!(v.pose.center().coords.norm(), 2.0, epsilon = 1e-12);
            let p = v.project(&Point3::origin()).unwrap();
            assert_relative_eq!(p.u, v.intrinsics.cx, epsilon = 1e-9);
            assert_relative_eq!(p.v, v.intrinsics.cy, epsilon = 1e-9);
            assert_relative_eq!(p.d, 2.0, epsilon = 1e-9);
        }
        // corner i and corner 7 - i are opposite
        for i in 0..8 {
            let a = rig.views[i].pose.direction();
            let b = rig.views[7 - i].pose.direction();
            assert_relative_eq!(a.dot(&b), -1.0, epsilon = 1e-12);
        }
        // closed under coordinate sign flips
        let centers = rig.centers();
        for c in &centers {
            for axis in 0..3 {
                let mut f = *c;
                f[axis] = -f[axis];
                assert!(centers.iter().any(|o| (o - f).norm() < 1e-12));
            }
        }
        // lexicographic order: first corner is (-,-,-), last (+,+,+)
        assert!(centers[0].iter().all(|x| *x < 0.0));
        assert!(centers[7].iter().all(|x| *x > 0.0));
        assert!(centers[1].z > 0.0 && centers[1].x < 0.0);
    }

    #[test]
    fn look_at_along_up_uses_x_fallback() {
        let pose = ViewPose::look_at(&Point3::new(0.0, 0.0, 3.0), &Point3::origin(), &Vector3::z()).unwrap();
        let p = project(&Point3::origin(), &pose, &unit_k()).unwrap();
        assert_relative_eq!(p.d, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rig_rejects_bad_distance() {
        assert!(cube_corner_rig(0.0, (4, 4), Intrinsics::default_for(4, 4)).is_err());
    }

    #[test]
    fn pose_json_roundtrip_is_row_major() {
        let rig = default_rig();
        let s = serde_json::to_string(&rig.views[3].pose).unwrap();
        let back: ViewPose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rig.views[3].pose);
        let raw: serde_json::Value = serde_json::from_str(&s).unwrap();
        let r = rig.views[3].pose.rotation();
        assert_eq!(raw["rotation"][0][1].as_f64().unwrap(), r[(0, 1)]);
    }
}
