//! Rigid transforms, pinhole intrinsics, projection and pose error metrics.
//!
//! Conventions used throughout the crate:
//! - map frame: x east, y north, z up (metres);
//! - camera frame: x right, y down, z forward;
//! - a [`Pose`] maps world to camera, `x_cam = R * x_world + t`;
//! - pixel centres sit on integer coordinates, so column `i` covers `[i - 0.5, i + 0.5)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Metres per degree of latitude in the local tangent-plane approximation.
pub const METERS_PER_DEG_LAT: f64 = 110_540.0;
/// Metres per degree of longitude at the equator.
pub const METERS_PER_DEG_LON: f64 = 111_320.0;

const BEHIND_CAMERA_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point is behind the camera (z_cam = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("gravity direction is degenerate")]
    DegenerateGravity,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid sensor prior: {0}")]
    InvalidPrior(String),
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose and checks orthonormality and handedness within `1e-9`.
    pub fn try_new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let pose = Self::new(rotation, translation);
        pose.validate(1e-9)?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    /// Pose with the given world-to-camera rotation whose optical centre is `center`.
    pub fn from_center(rotation: Mat3, center: Vec3) -> Self {
        Self::new(rotation, -(rotation * center))
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis expressed in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn transform(&self, point_world: &Vec3) -> Vec3 {
        self.rotation * point_world + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn validate(&self, tol: f64) -> Result<(), GeomError> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(GeomError::InvalidPose("non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).norm();
        if ortho > tol {
            return Err(GeomError::InvalidPose(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(GeomError::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    /// Row-major rotation followed by translation, the on-disk pose encoding.
    pub fn to_rt(&self) -> ([f64; 9], [f64; 3]) {
        let r = &self.rotation;
        (
            [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            [self.translation.x, self.translation.y, self.translation.z],
        )
    }

    pub fn from_rt(r: &[f64; 9], t: &[f64; 3]) -> Self {
        Self::new(Mat3::from_row_slice(r), Vec3::new(t[0], t[1], t[2]))
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Square pixels, principal point at the image centre.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeomError::InvalidIntrinsics("empty image".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Whether a continuous pixel position falls on the image, i.e. rounds to a valid pixel.
    pub fn contains(&self, px: &Vec2) -> bool {
        px.x >= -0.5 && px.y >= -0.5 && px.x < self.width as f64 - 0.5 && px.y < self.height as f64 - 0.5
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera-frame direction through `px` with unit z component.
    pub fn ray(&self, px: &Vec2) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point without a depth check.
    pub fn project_camera(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Where the device claims to be.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorPosition {
    LatLon { lat: f64, lon: f64 },
    Metric { x: f64, y: f64 },
}

/// Anchor of the local tangent plane used to turn GPS fixes into map metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoOrigin {
    pub lat0: f64,
    pub lon0: f64,
}

impl GeoOrigin {
    pub fn to_metric(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = (lon - self.lon0) * self.lat0.to_radians().cos() * METERS_PER_DEG_LON;
        let y = (lat - self.lat0) * METERS_PER_DEG_LAT;
        (x, y)
    }
}

/// Noisy pose information reported by the capturing device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPrior {
    pub position: PriorPosition,
    /// Degrees clockwise from map north, in `[0, 360)`.
    pub compass_heading: f64,
    /// Direction gravity pulls, in the camera frame.
    pub gravity_dir: Vec3,
    /// Barometric/GPS altitude for aerial devices.
    pub altitude_m: Option<f64>,
}

impl SensorPrior {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.compass_heading >= 0.0 && self.compass_heading < 360.0) {
            return Err(GeomError::InvalidPrior(format!(
                "compass heading {} outside [0, 360)",
                self.compass_heading
            )));
        }
        let n = self.gravity_dir.norm();
        if n < 1e-6 {
            return Err(GeomError::DegenerateGravity);
        }
        if (n - 1.0).abs() > 1e-6 {
            return Err(GeomError::InvalidPrior(format!("|gravity| = {n}, expected 1")));
        }
        Ok(())
    }

    pub fn metric_xy(&self, origin: Option<&GeoOrigin>) -> Result<(f64, f64), GeomError> {
        match self.position {
            PriorPosition::Metric { x, y } => Ok((x, y)),
            PriorPosition::LatLon { lat, lon } => origin
                .map(|o| o.to_metric(lat, lon))
                .ok_or_else(|| GeomError::InvalidPrior("lat/lon prior without a geo origin".into())),
        }
    }
}

/// Normalises an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

pub fn project(point_world: &Vec3, pose: &Pose, k: &Intrinsics) -> Result<Vec2, GeomError> {
    let p = pose.transform(point_world);
    if p.z <= BEHIND_CAMERA_EPS {
        return Err(GeomError::BehindCamera(p.z));
    }
    Ok(k.project_camera(&p))
}

/// Lifts a pixel with camera-space z `depth` back into the world.
pub fn backproject(px: &Vec2, depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vec3, GeomError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeomError::InvalidDepth(depth));
    }
    let cam = k.ray(px) * depth;
    Ok(pose.rotation.transpose() * (cam - pose.translation))
}

/// Rotation about world +z (counter-clockwise seen from above).
pub fn rot_z(angle_rad: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle_rad).into_inner()
}

/// Compass azimuth of a world direction, degrees clockwise from north.
pub fn azimuth_deg(dir: &Vec3) -> f64 {
    wrap_degrees(dir.x.atan2(dir.y).to_degrees())
}

/// Heading of a camera-to-world rotation: azimuth of the optical axis, or of the
/// image-up axis when the camera looks straight up or down.
fn heading_of(cam_to_world: &Mat3) -> f64 {
    let forward = cam_to_world.column(2).into_owned();
    if forward.xy().norm() > 1e-6 {
        azimuth_deg(&forward)
    } else {
        azimuth_deg(&(-cam_to_world.column(1).into_owned()))
    }
}

/// World-to-camera rotation from a device gravity reading and compass heading.
///
/// Roll and pitch come from the minimal rotation taking the measured gravity
/// onto world `-z`; a yaw about world `z` then turns the camera so its heading
/// equals `compass_heading`.
pub fn rotation_from_gravity_compass(prior: &SensorPrior) -> Result<Mat3, GeomError> {
    let g = prior.gravity_dir;
    let n = g.norm();
    if !(n.is_finite() && n > 1e-6) {
        return Err(GeomError::DegenerateGravity);
    }
    let g = g / n;
    let down = -Vec3::z();
    let level = match Rotation3::rotation_between(&g, &down) {
        Some(r) => r.into_inner(),
        // Gravity along +z_cam in world terms is exactly antiparallel: the camera looks
        // straight down. Any half-turn about an axis orthogonal to g works.
        None => Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::x()), std::f64::consts::PI).into_inner(),
    };
    let current = heading_of(&level);
    let yaw = -(prior.compass_heading - current).to_radians();
    let cam_to_world = rot_z(yaw) * level;
    Ok(orthonormalize(&cam_to_world).transpose())
}

/// Projects a near-rotation onto SO(3) via SVD.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Rotation angle of `r` in radians, numerically stable at both ends of `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos2 = (r.trace() - 1.0).clamp(-2.0, 2.0);
    let sin2 = skew.norm().min(2.0);
    sin2.atan2(cos2)
}

/// Pose error as (camera-centre distance in metres, rotation angle in degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation: f64,
    pub rotation_deg: f64,
}

pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let translation = (est.center() - gt.center()).norm();
    let rel = est.rotation * gt.rotation.transpose();
    PoseError {
        translation,
        rotation_deg: rotation_angle(&rel).to_degrees(),
    }
}

/// Exponential map of so(3).
pub fn exp_so3(omega: &Vec3) -> Mat3 {
    Rotation3::new(*omega).into_inner()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn k_default() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480)
    }

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        exp_so3(&(axis.normalize() * angle))
    }

    #[test]
    fn project_principal_point() {
        let px = project(&Vec3::new(0.0, 0.0, 1.0), &Pose::identity(), &k_default()).unwrap();
        assert_eq!(px, Vec2::new(320.0, 240.0));
    }

    #[test]
    fn project_behind_camera() {
        let err = project(&Vec3::new(0.0, 0.0, -1.0), &Pose::identity(), &k_default()).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera(_)));
    }

    #[test]
    fn project_off_axis() {
        let px = project(&Vec3::new(0.5, -0.25, 2.0), &Pose::identity(), &k_default()).unwrap();
        assert!(close(px.x, 345.0, 1e-12) && close(px.y, 227.5, 1e-12));
    }

    #[test]
    fn backproject_examples() {
        let k = k_default();
        let p = backproject(&Vec2::new(320.0, 240.0), 2.0, &Pose::identity(), &k).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        let p = backproject(&Vec2::new(345.0, 227.5), 2.0, &Pose::identity(), &k).unwrap();
        assert!((p - Vec3::new(0.5, -0.25, 2.0)).norm() < 1e-12);
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                backproject(&Vec2::new(1.0, 1.0), bad, &Pose::identity(), &k),
                Err(GeomError::InvalidDepth(_))
            ));
        }
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = k_default();
        for _ in 0..1000 {
            let pose = Pose::from_center(
                random_rotation(&mut rng),
                Vec3::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                ),
            );
            let z = rng.gen_range(0.1..100.0);
            let cam = Vec3::new(rng.gen_range(-1.0..1.0) * z, rng.gen_range(-1.0..1.0) * z, z);
            let world = pose.inverse().transform(&cam);
            let px = project(&world, &pose, &k).unwrap();
            let back = backproject(&px, z, &pose, &k).unwrap();
            assert!((back - world).norm() < 1e-9 * (1.0 + world.norm()), "{back} vs {world}");
        }
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = Pose::new(
                random_rotation(&mut rng),
                Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 10.0,
            );
            let id = p.compose(&p.inverse());
            assert!((id.rotation - Mat3::identity()).amax() < 1e-9);
            assert!(id.translation.amax() < 1e-9);
        }
    }

    fn level_prior(heading: f64) -> SensorPrior {
        SensorPrior {
            position: PriorPosition::Metric { x: 0.0, y: 0.0 },
            compass_heading: heading,
            gravity_dir: Vec3::new(0.0, 1.0, 0.0),
            altitude_m: None,
        }
    }

    #[test]
    fn level_camera_north_and_east() {
        let r = rotation_from_gravity_compass(&level_prior(0.0)).unwrap();
        let fwd = Pose::new(r, Vec3::zeros()).forward();
        assert!((fwd - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
        let r = rotation_from_gravity_compass(&level_prior(90.0)).unwrap();
        let fwd = Pose::new(r, Vec3::zeros()).forward();
        assert!((fwd - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        // Camera y (down) must map to world -z for a level camera.
        let down = r.transpose() * Vec3::y();
        assert!((down + Vec3::z()).norm() < 1e-9);
    }

    #[test]
    fn nadir_camera_is_supported() {
        let mut prior = level_prior(30.0);
        prior.gravity_dir = Vec3::z();
        let r = rotation_from_gravity_compass(&prior).unwrap();
        Pose::new(r, Vec3::zeros()).validate(1e-9).unwrap();
        assert!((r * -Vec3::z() - Vec3::z()).norm() < 1e-9);
        let up = r.transpose() * -Vec3::y();
        assert!((azimuth_deg(&up) - 30.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_gravity() {
        let mut prior = level_prior(0.0);
        prior.gravity_dir = Vec3::new(1e-8, 0.0, 0.0);
        assert_eq!(rotation_from_gravity_compass(&prior), Err(GeomError::DegenerateGravity));
    }

    #[test]
    fn pose_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = Pose::from_center(random_rotation(&mut rng), Vec3::new(1.0, 2.0, 3.0));
        let e = pose_error(&gt, &gt);
        assert_eq!((e.translation, e.rotation_deg), (0.0, 0.0));

        let moved = Pose::from_center(gt.rotation, gt.center() + Vec3::new(0.3, 0.0, 0.0));
        let e = pose_error(&moved, &gt);
        assert!(close(e.translation, 0.3, 1e-12) && e.rotation_deg < 1e-12);

        let half_turn = Pose::new(exp_so3(&(Vec3::z() * std::f64::consts::PI)), Vec3::zeros());
        let flipped = half_turn.compose(&gt);
        let e = pose_error(&flipped, &gt);
        assert!(close(e.rotation_deg, 180.0, 1e-9), "{}", e.rotation_deg);
    }

    #[test]
    fn rotation_angle_small_is_precise() {
        let r = exp_so3(&Vec3::new(1e-10, 0.0, 0.0));
        assert!(close(rotation_angle(&r), 1e-10, 1e-20));
    }

    #[test]
    fn gps_tangent_plane() {
        let o = GeoOrigin { lat0: 0.0, lon0: 0.0 };
        let (x, y) = o.to_metric(0.001, 0.002);
        assert!(close(x, 222.64, 1e-6) && close(y, 110.54, 1e-6));
    }

    #[test]
    fn intrinsics_validation() {
        k_default().validate().unwrap();
        assert!(Intrinsics::new(-1.0, 1.0, 10.0, 10.0, 20, 20).validate().is_err());
        assert!(Intrinsics::new(1.0, 1.0, 30.0, 10.0, 20, 20).validate().is_err());
    }
}
