//! Rigid transforms, pinhole cameras and the LiDAR-to-image chain.
//!
//! Frames follow the usual driving conventions: the ego frame is x forward,
//! y left, z up; camera frames are z along the optical axis, x right, y down.
//! Pixel coordinates are continuous; pixel `(i, j)` covers
//! `[i, i + 1) x [j, j + 1)`, so mask lookup is a floor.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::LidarPoint;

pub type Vec3 = Vector3<f64>;

/// Orthonormality tolerance for rotation blocks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default near plane in meters.
pub const DEFAULT_Z_MIN: f64 = 0.1;

/// A proper rigid motion `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 (to [`ROTATION_TOLERANCE`]) or non-finite entries.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Parses a row-major homogeneous 4x4 matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::invalid("homogeneous row must be (0, 0, 0, 1)"));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.to_row_major())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        let err = orthonormality_error(&self.rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Matrix product `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > ROTATION_TOLERANCE {
            rotation = orthonormalize(&rotation);
        }
        Self {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = <[f64; 16]>::deserialize(d)?;
        RigidTransform::from_row_major(&m).map_err(serde::de::Error::custom)
    }
}

/// Pinhole intrinsics plus the `cam <- ego` extrinsic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraModelRepr", into = "CameraModelRepr")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: RigidTransform,
}

#[derive(Serialize, Deserialize)]
struct CameraModelRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    extrinsic: RigidTransform,
}

impl TryFrom<CameraModelRepr> for CameraModel {
    type Error = Error;
    fn try_from(r: CameraModelRepr) -> Result<Self> {
        CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, r.extrinsic)
    }
}

impl From<CameraModel> for CameraModelRepr {
    fn from(c: CameraModel) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            extrinsic: c.extrinsic,
        }
    }
}

/// Continuous image coordinates and camera-frame depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Integer pixel containing `(u, v)`.
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        extrinsic: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        extrinsic.validate()?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// A level camera mounted at `position` (ego frame), looking along
    /// ego heading `yaw`, with horizontal field of view `hfov` radians and
    /// square pixels.
    pub fn looking_along(yaw: f64, position: Vec3, hfov: f64, width: u32, height: u32) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows are the camera axes expressed in ego coordinates
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let extrinsic = RigidTransform::new(rotation, -(rotation * position))?;
        let fx = width as f64 / 2.0 / (hfov / 2.0).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height, extrinsic)
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera center in the ego frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.inverse().translation
    }

    /// Projects a camera-frame point; `None` when at or behind the near
    /// plane or outside the image.
    pub fn project_camera_frame(&self, p_cam: &Vec3, z_min: f64) -> Option<Projection> {
        if !(p_cam.z > z_min) {
            return None;
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Projection {
            u,
            v,
            depth: p_cam.z,
        })
    }

    /// Inverse of projection with known depth, returning an ego-frame point.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let p_cam = Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        );
        self.extrinsic.inverse().apply(&p_cam)
    }

    /// Unit ray direction (ego frame) through continuous pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.extrinsic.rotation.transpose() * d_cam).normalize()
    }
}

/// Projects an ego-frame point into one camera.
pub fn project_point(p_ego: &Vec3, cam: &CameraModel, z_min: f64) -> Option<Projection> {
    cam.project_camera_frame(&cam.extrinsic.apply(p_ego), z_min)
}

/// One camera observation of a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit {
    pub camera: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelHit {
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

/// LiDAR mounting plus the surround camera ring.
///
/// Camera order is the ring order: camera `j + 1` sits clockwise (seen from
/// above) of camera `j`, so their shared seam is the right border of `j`
/// and the left border of `j + 1`. The last camera wraps to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigRepr", into = "RigRepr")]
pub struct CalibrationRig {
    pub lidar_to_ego: RigidTransform,
    pub cameras: Vec<CameraModel>,
}

#[derive(Serialize, Deserialize)]
struct RigRepr {
    lidar_to_ego: RigidTransform,
    cameras: Vec<CameraModel>,
}

impl TryFrom<RigRepr> for CalibrationRig {
    type Error = Error;
    fn try_from(r: RigRepr) -> Result<Self> {
        CalibrationRig::new(r.lidar_to_ego, r.cameras)
    }
}

impl From<CalibrationRig> for RigRepr {
    fn from(r: CalibrationRig) -> Self {
        Self {
            lidar_to_ego: r.lidar_to_ego,
            cameras: r.cameras,
        }
    }
}

impl CalibrationRig {
    pub fn new(lidar_to_ego: RigidTransform, cameras: Vec<CameraModel>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("rig needs at least one camera"));
        }
        lidar_to_ego.validate()?;
        Ok(Self {
            lidar_to_ego,
            cameras,
        })
    }

    /// `count` level cameras spaced evenly clockwise starting at the ego
    /// heading, mounted on a circle of `radius` around `(0, 0, height)`.
    pub fn surround(
        lidar_to_ego: RigidTransform,
        count: usize,
        hfov: f64,
        width: u32,
        height: u32,
        radius: f64,
        mount_height: f64,
    ) -> Result<Self> {
        let cameras = (0..count)
            .map(|j| {
                let yaw = -(j as f64) * std::f64::consts::TAU / count as f64;
                let pos = Vec3::new(radius * yaw.cos(), radius * yaw.sin(), mount_height);
                CameraModel::looking_along(yaw, pos, hfov, width, height)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lidar_to_ego, cameras)
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    /// Ring neighbour on the right (clockwise) side of camera `j`.
    pub fn right_neighbor(&self, j: usize) -> usize {
        (j + 1) % self.cameras.len()
    }
}

/// All camera hits of every ego-frame point, in camera index order.
pub fn project_cloud(points: &[LidarPoint], rig: &CalibrationRig, z_min: f64) -> Vec<Vec<PixelHit>> {
    points
        .iter()
        .map(|p| {
            let pos = p.position();
            rig.cameras
                .iter()
                .enumerate()
                .filter_map(|(j, cam)| {
                    project_point(&pos, cam, z_min).map(|h| PixelHit {
                        camera: j,
                        u: h.u,
                        v: h.v,
                        depth: h.depth,
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    fn test_camera() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity()).unwrap()
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = RigidTransform::from_axis_angle(&Vec3::new(0.3, -0.2, 0.9), 0.7, Vec3::new(1.0, 2.0, -3.0));
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let id = t.compose(&t.inverse());
        assert!((id.to_homogeneous() - Matrix4::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn two_quarter_yaws_make_half_turn() {
        let q = RigidTransform::from_yaw(FRAC_PI_2, Vec3::zeros());
        let half = q.compose(&q);
        assert!(close(&half.apply(&Vec3::x()), &Vec3::new(-1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn apply_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let shift = RigidTransform::from_translation(Vec3::x());
        assert_eq!(shift.apply(&Vec3::zeros()), Vec3::x());
        let yaw = RigidTransform::from_yaw(FRAC_PI_2, Vec3::zeros());
        assert!(close(&yaw.apply(&Vec3::x()), &Vec3::y(), 1e-15));
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = RigidTransform::identity().to_row_major();
        m[0] = 2.0;
        assert!(RigidTransform::from_row_major(&m).is_err());
        let mut m = RigidTransform::identity().to_row_major();
        m[0] = -1.0; // reflection
        assert!(RigidTransform::from_row_major(&m).is_err());
        let mut m = RigidTransform::identity().to_row_major();
        m[3] = f64::NAN;
        assert!(RigidTransform::from_row_major(&m).is_err());
    }

    #[test]
    fn compose_reorthonormalizes_drift() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 5e-10;
        let drifted = RigidTransform {
            rotation: r,
            translation: Vec3::zeros(),
        };
        let mut acc = RigidTransform::identity();
        for _ in 0..10 {
            acc = acc.compose(&drifted);
        }
        assert!(acc.is_valid());
    }

    #[test]
    fn optical_axis_and_pinhole() {
        let cam = test_camera();
        let hit = project_point(&Vec3::new(0.0, 0.0, 5.0), &cam, DEFAULT_Z_MIN).unwrap();
        assert_eq!((hit.u, hit.v, hit.depth), (50.0, 50.0, 5.0));
        let hit = project_point(&Vec3::new(1.0, 0.0, 5.0), &cam, DEFAULT_Z_MIN).unwrap();
        assert_eq!((hit.u, hit.v), (70.0, 50.0));
        assert!(project_point(&Vec3::new(0.0, 0.0, -1.0), &cam, DEFAULT_Z_MIN).is_none());
    }

    #[test]
    fn near_plane_and_bounds() {
        let cam = test_camera();
        assert!(project_point(&Vec3::new(0.0, 0.0, 0.1), &cam, DEFAULT_Z_MIN).is_none());
        // u = 100 exactly is the excluded right edge
        assert!(project_point(&Vec3::new(2.5, 0.0, 5.0), &cam, DEFAULT_Z_MIN).is_none());
        let left = project_point(&Vec3::new(-2.5, -2.5, 5.0), &cam, DEFAULT_Z_MIN).unwrap();
        assert_eq!(left.pixel(), (0, 0));
    }

    #[test]
    fn scale_consistency() {
        let cam = test_camera();
        let p = Vec3::new(0.4, -0.3, 3.0);
        let a = project_point(&p, &cam, DEFAULT_Z_MIN).unwrap();
        let b = project_point(&(2.0 * p), &cam, DEFAULT_Z_MIN).unwrap();
        assert!((a.u - b.u).abs() < 1e-12 && (a.v - b.v).abs() < 1e-12);
        assert!((b.depth - 2.0 * a.depth).abs() < 1e-12);
    }

    #[test]
    fn looking_along_axes() {
        let cam = CameraModel::looking_along(0.0, Vec3::zeros(), FRAC_PI_2, 100, 100).unwrap();
        // ego +x is the optical axis, ego +y (left) is image left, ego +z is image up
        let hit = project_point(&Vec3::new(10.0, 0.0, 0.0), &cam, DEFAULT_Z_MIN).unwrap();
        assert_eq!((hit.u, hit.v, hit.depth), (50.0, 50.0, 10.0));
        let left = project_point(&Vec3::new(10.0, 1.0, 1.0), &cam, DEFAULT_Z_MIN).unwrap();
        assert!(left.u < 50.0 && left.v < 50.0);
    }

    #[test]
    fn empty_cloud() {
        let rig = CalibrationRig::new(RigidTransform::identity(), vec![test_camera()]).unwrap();
        assert!(project_cloud(&[], &rig, DEFAULT_Z_MIN).is_empty());
    }

    #[test]
    fn two_opposed_cameras() {
        // 90 degree cameras facing +x and -x
        let rig =
            CalibrationRig::surround(RigidTransform::identity(), 2, FRAC_PI_2, 100, 100, 0.0, 0.0).unwrap();
        let pts = [LidarPoint::new(10.0, 0.0, 0.0, 0.0)];
        let hits = project_cloud(&pts, &rig, DEFAULT_Z_MIN);
        assert_eq!(hits[0].len(), 1);
        assert_eq!(hits[0][0].camera, 0);
    }

    #[test]
    fn overlap_wedge_gives_two_hits() {
        // cameras at yaw 0 and -60 degrees with 90 degree FOV overlap in
        // the yaw interval (-45, -15) degrees; -30 is the bisector
        let rig = CalibrationRig::surround(
            RigidTransform::identity(),
            6,
            FRAC_PI_2,
            200,
            100,
            0.0,
            0.0,
        )
        .unwrap();
        let yaw = (-30.0f64).to_radians();
        let pts = [LidarPoint::new(10.0 * yaw.cos(), 10.0 * yaw.sin(), 0.0, 0.0)];
        let hits = project_cloud(&pts, &rig, DEFAULT_Z_MIN);
        let cams: Vec<_> = hits[0].iter().map(|h| h.camera).collect();
        assert_eq!(cams, vec![0, 1]);
    }

    #[test]
    fn back_projection_round_trip() {
        let rig = CalibrationRig::surround(
            RigidTransform::identity(),
            6,
            70f64.to_radians(),
            800,
            450,
            0.8,
            1.6,
        )
        .unwrap();
        let p = Vec3::new(12.0, -4.0, 0.7);
        for (j, cam) in rig.cameras.iter().enumerate() {
            if let Some(h) = project_point(&p, cam, DEFAULT_Z_MIN) {
                let back = cam.back_project(h.u, h.v, h.depth);
                assert!(close(&back, &p, 1e-9), "camera {j}");
            }
        }
    }
}
