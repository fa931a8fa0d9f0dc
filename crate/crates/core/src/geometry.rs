//! Pinhole camera model, rigid transforms, and depth back-projection.
//!
//! All geometry runs in f64. Depth value 0.0 encodes an invalid/missing
//! measurement and is excluded from every downstream computation. Pixel
//! centers sit at integer coordinates (u, v).

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth {0} (must be finite and > 0)")]
    InvalidDepth(f64),
    #[error("pixel ({0}, {1}) outside image bounds {2}x{3}")]
    OutOfBounds(u32, u32, u32, u32),
    #[error("point projects behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("projected pixel ({0:.3}, {1:.3}) outside the view")]
    OutOfView(f64, f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rigid pose: {0}")]
    InvalidPose(String),
}

/// Pinhole intrinsics: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }
}

/// A 3D point expressed in the camera frame of some view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint(pub Vector3<f64>);

/// A 3D point expressed in the shared world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint(pub Vector3<f64>);

impl WorldPoint {
    #[inline]
    pub fn coords(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

const POSE_ORTHO_TOL: f64 = 1e-6;

/// Camera-to-world rigid transform stored as a 4x4 homogeneous matrix.
///
/// The rotation block must be orthonormal with determinant +1 within 1e-6
/// and the last row exactly (0, 0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    matrix: Matrix4<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { matrix: Matrix4::identity() }
    }

    /// Validates the rigid-pose invariants before accepting the matrix.
    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self, GeometryError> {
        orthonormality_error(&matrix).and_then(|err| {
            if err > POSE_ORTHO_TOL {
                Err(GeometryError::InvalidPose(format!(
                    "rotation block not orthonormal (max deviation {err:.3e})"
                )))
            } else {
                Ok(())
            }
        })?;
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if (det - 1.0).abs() > POSE_ORTHO_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det} != +1"
            )));
        }
        if matrix.row(3) != Matrix4::identity().row(3) {
            return Err(GeometryError::InvalidPose(
                "last row must be exactly (0, 0, 0, 1)".into(),
            ));
        }
        Ok(Self { matrix })
    }

    pub fn from_rotation_translation(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    #[inline]
    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera position in world coordinates.
    #[inline]
    pub fn camera_center(&self) -> WorldPoint {
        WorldPoint(self.translation())
    }
}

/// Max deviation of R^T R from identity; None is never returned, the Result
/// keeps the NaN case an error instead of a silent pass.
fn orthonormality_error(matrix: &Matrix4<f64>) -> Result<f64, GeometryError> {
    let r = matrix.fixed_view::<3, 3>(0, 0);
    let gram = r.transpose() * r;
    let mut max_dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (gram[(i, j)] - target).abs();
            if !dev.is_finite() {
                return Err(GeometryError::InvalidPose("non-finite rotation entry".into()));
            }
            max_dev = max_dev.max(dev);
        }
    }
    Ok(max_dev)
}

/// Per-pixel depth in meters; 0.0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (width as usize) * (height as usize));
        debug_assert!(data.iter().all(|d| d.is_finite() && *d >= 0.0));
        Self { width, height, data }
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![0.0; (width as usize) * (height as usize)])
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[(v as usize) * (self.width as usize) + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, d: f64) {
        self.data[(v as usize) * (self.width as usize) + u as usize] = d;
    }

    #[inline]
    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        self.get(u, v) > 0.0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// Interleaved RGB, 8 bits per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    data: Vec<u8>,
}

impl ColorImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width as usize) * (height as usize) * 3);
        Self { width, height, data }
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![0; (width as usize) * (height as usize) * 3])
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> [u8; 3] {
        let i = ((v as usize) * (self.width as usize) + u as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, rgb: [u8; 3]) {
        let i = ((v as usize) * (self.width as usize) + u as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// One RGB-D observation: color, depth, intrinsics, and camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub frame_index: u32,
    pub color: ColorImage,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
}

impl CameraFrame {
    pub fn new(
        frame_index: u32,
        color: ColorImage,
        depth: DepthMap,
        intrinsics: Intrinsics,
        pose: RigidPose,
    ) -> Self {
        assert_eq!(color.width, depth.width, "color/depth width mismatch");
        assert_eq!(color.height, depth.height, "color/depth height mismatch");
        assert_eq!(intrinsics.width, color.width);
        assert_eq!(intrinsics.height, color.height);
        Self { frame_index, color, depth, intrinsics, pose }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }
}

/// Lifts pixel (u, v) with depth d to camera space via the inverse pinhole
/// model: ((u - cx) d / fx, (v - cy) d / fy, d).
pub fn backproject(u: u32, v: u32, d: f64, k: &Intrinsics) -> Result<CameraPoint, GeometryError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(GeometryError::InvalidDepth(d));
    }
    if u >= k.width || v >= k.height {
        return Err(GeometryError::OutOfBounds(u, v, k.width, k.height));
    }
    Ok(CameraPoint(Vector3::new(
        (u as f64 - k.cx) * d / k.fx,
        (v as f64 - k.cy) * d / k.fy,
        d,
    )))
}

/// Maps a camera-frame point into world space: R p + t.
#[inline]
pub fn to_world(p: CameraPoint, pose: &RigidPose) -> WorldPoint {
    WorldPoint(pose.rotation() * p.0 + pose.translation())
}

/// Projects a world point into a camera: applies the inverse pose, then the
/// pinhole model. Returns continuous pixel coordinates and camera depth.
pub fn project(
    p: WorldPoint,
    pose: &RigidPose,
    k: &Intrinsics,
) -> Result<(f64, f64, f64), GeometryError> {
    // R^T (p - t) inverts a rigid camera-to-world transform.
    let cam = pose.rotation().transpose() * (p.0 - pose.translation());
    if cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(cam.z));
    }
    let u = cam.x / cam.z * k.fx + k.cx;
    let v = cam.y / cam.z * k.fy + k.cy;
    if u < 0.0 || u >= k.width as f64 || v < 0.0 || v >= k.height as f64 {
        return Err(GeometryError::OutOfView(u, v));
    }
    Ok((u, v, cam.z))
}

/// Back-projects every valid-depth pixel sampled at `stride` into world
/// space, keeping the source pixel coordinate for provenance.
pub fn frame_to_world_points(frame: &CameraFrame, stride: u32) -> Vec<((u32, u32), WorldPoint)> {
    assert!(stride >= 1, "stride must be >= 1");
    let mut out = Vec::new();
    let rot = frame.pose.rotation();
    let t = frame.pose.translation();
    let k = &frame.intrinsics;
    let mut v = 0;
    while v < frame.height() {
        let mut u = 0;
        while u < frame.width() {
            let d = frame.depth.get(u, v);
            if d > 0.0 {
                let cam = Vector3::new(
                    (u as f64 - k.cx) * d / k.fx,
                    (v as f64 - k.cy) * d / k.fy,
                    d,
                );
                out.push(((u, v), WorldPoint(rot * cam + t)));
            }
            u += stride;
        }
        v += stride;
    }
    out
}

/// Linearized pixel index used for deterministic ordering and tie-breaks.
#[inline]
pub fn pixel_index(u: u32, v: u32, width: u32) -> u64 {
    (v as u64) * (width as u64) + u as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn backproject_principal_point_is_optical_axis() {
        let k = test_intrinsics();
        let p = backproject(320, 240, 2.0, &k).unwrap();
        assert_eq!(p.0, Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn backproject_pinhole_formula() {
        let k = test_intrinsics();
        let p = backproject(420, 240, 1.0, &k).unwrap();
        assert_eq!(p.0, Vector3::new(0.2, 0.0, 1.0));
    }

    #[test]
    fn backproject_rejects_zero_depth() {
        let k = test_intrinsics();
        assert_eq!(backproject(100, 50, 0.0, &k), Err(GeometryError::InvalidDepth(0.0)));
        assert!(matches!(
            backproject(100, 50, f64::NAN, &k),
            Err(GeometryError::InvalidDepth(_))
        ));
    }

    #[test]
    fn backproject_rejects_out_of_bounds() {
        let k = test_intrinsics();
        assert!(matches!(
            backproject(640, 0, 1.0, &k),
            Err(GeometryError::OutOfBounds(..))
        ));
    }

    #[test]
    fn to_world_identity_and_translation() {
        let p = CameraPoint(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(to_world(p, &RigidPose::identity()).0, Vector3::new(1.0, 2.0, 3.0));

        let pose = RigidPose::from_rotation_translation(
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let q = to_world(CameraPoint(Vector3::zeros()), &pose);
        assert_eq!(q.0, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn to_world_rotation_about_z() {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let pose =
            RigidPose::from_rotation_translation(rot.into_inner(), Vector3::zeros()).unwrap();
        let q = to_world(CameraPoint(Vector3::new(1.0, 0.0, 0.0)), &pose);
        assert!((q.0 - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn project_inverts_backprojection() {
        let k = test_intrinsics();
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 0.3);
        let pose = RigidPose::from_rotation_translation(
            rot.into_inner(),
            Vector3::new(0.5, -0.2, 1.0),
        )
        .unwrap();
        for &(u, v, d) in &[(10u32, 20u32, 0.7), (320, 240, 2.0), (600, 400, 5.5)] {
            let w = to_world(backproject(u, v, d, &k).unwrap(), &pose);
            let (pu, pv, pd) = project(w, &pose, &k).unwrap();
            assert!((pu - u as f64).abs() < 1e-6);
            assert!((pv - v as f64).abs() < 1e-6);
            assert!((pd - d).abs() < 1e-6);
        }
    }

    #[test]
    fn project_behind_camera() {
        let k = test_intrinsics();
        let res = project(WorldPoint(Vector3::new(0.0, 0.0, -1.0)), &RigidPose::identity(), &k);
        assert!(matches!(res, Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn project_forward_formula() {
        let k = test_intrinsics();
        let (u, v, d) =
            project(WorldPoint(Vector3::new(0.2, 0.0, 1.0)), &RigidPose::identity(), &k).unwrap();
        assert!((u - 420.0).abs() < 1e-12);
        assert!((v - 240.0).abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_points_empty_on_invalid_depth() {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let frame = CameraFrame::new(
            0,
            ColorImage::zeros(4, 4),
            DepthMap::zeros(4, 4),
            k,
            RigidPose::identity(),
        );
        assert!(frame_to_world_points(&frame, 1).is_empty());
    }

    #[test]
    fn frame_points_elementwise() {
        let k = Intrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let depth = DepthMap::new(4, 4, vec![1.0; 16]);
        let frame =
            CameraFrame::new(0, ColorImage::zeros(4, 4), depth, k, RigidPose::identity());
        let pts = frame_to_world_points(&frame, 1);
        assert_eq!(pts.len(), 16);
        for ((u, v), w) in pts {
            let expected = backproject(u, v, 1.0, &k).unwrap();
            assert_eq!(w.0, expected.0);
        }
    }

    #[test]
    fn pose_rejects_non_orthonormal() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(RigidPose::from_matrix(m), Err(GeometryError::InvalidPose(_))));
    }

    #[test]
    fn pose_rejects_reflection() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0; // det = -1, still orthonormal
        assert!(matches!(RigidPose::from_matrix(m), Err(GeometryError::InvalidPose(_))));
    }

    #[test]
    fn pose_rejects_bad_last_row() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1e-12;
        assert!(matches!(RigidPose::from_matrix(m), Err(GeometryError::InvalidPose(_))));
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(Intrinsics::new(0.0, 500.0, 320.0, 240.0, 640, 480).is_err());
        assert!(Intrinsics::new(500.0, 500.0, 640.0, 240.0, 640, 480).is_err());
        assert!(Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).is_ok());
    }
}
