//! Pinhole camera model and the world / camera / screen conversions.
//!
//! Screen-aligned points are `(x, y, z)` where `(x, y)` are pixel coordinates
//! (pixel centers at integer coordinates) and `z` is the camera-frame depth in
//! meters. The camera frame follows the usual computer-vision convention:
//! `+x` right, `+y` down, `+z` forward.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the camera plane than this are rejected by projection.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point is not finite".into()));
        }
        Ok(())
    }
}

/// A screen-aligned 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl ScreenPoint {
    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Intrinsics plus a rigid world-to-camera pose `X_c = R X_w + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRepr", into = "CameraRepr")]
pub struct CameraModel {
    intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if !(off <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (max |R^T R - I| = {off:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation is not finite".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera at the world origin looking down `+z`.
    pub fn identity(intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing roughly toward
    /// the top of the image.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector is parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Same pose, different intrinsics.
    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, self.rotation, self.translation)
    }

    pub fn world_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn camera_to_world(&self, camera: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (camera - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Transforms a world point into the camera frame and projects it to
    /// `(x px, y px, z m)`.
    pub fn project_world_to_screen(&self, world: &Vector3<f64>) -> Result<ScreenPoint> {
        self.project_camera_point(&self.world_to_camera(world))
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, cam: &Vector3<f64>) -> Result<ScreenPoint> {
        let z = cam.z;
        if !(z > MIN_DEPTH) {
            return Err(Error::NonPositiveDepth { depth: z });
        }
        let k = &self.intrinsics;
        Ok(ScreenPoint {
            x: k.fx * cam.x / z + k.cx,
            y: k.fy * cam.y / z + k.cy,
            z,
        })
    }

    /// Inverse of [`Self::project_camera_point`]: lifts a screen-aligned point
    /// back into the camera frame.
    pub fn unproject_screen_to_camera(&self, x: f64, y: f64, z: f64) -> Result<Vector3<f64>> {
        if !(z > 0.0) {
            return Err(Error::NonPositiveDepth { depth: z });
        }
        let k = &self.intrinsics;
        Ok(Vector3::new(z * (x - k.cx) / k.fx, z * (y - k.cy) / k.fy, z))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<CameraRepr> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRepr) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        CameraModel::new(
            Intrinsics::new(r.fx, r.fy, r.cx, r.cy)?,
            rot,
            Vector3::from(r.translation),
        )
    }
}

impl From<CameraModel> for CameraRepr {
    fn from(c: CameraModel) -> Self {
        let k = c.intrinsics;
        CameraRepr {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| c.rotation[(i, j)])),
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}
