use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::Rigid;

/// Pinhole camera. Camera frame: x right, y down, z forward. Pixel centers
/// sit at half-integer coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Columns are the camera axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub center: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Orbit placement around the origin, as used by the render service.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    /// Radians; 0 looks at the face (+z) side.
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl Default for Orbit {
    fn default() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            distance: 2.2,
        }
    }
}

pub const DEFAULT_FOV_Y: f64 = 0.7;
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 4.0;

impl Camera {
    /// Camera on an orbit around the origin looking at it, world +y up.
    pub fn orbit(orbit: Orbit, width: usize, height: usize, fov_y: f64) -> Result<Self> {
        if !(orbit.distance > 0.0) || !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::invalid("camera: distance and fov must be positive"));
        }
        let (se, ce) = orbit.elevation.sin_cos();
        let (sa, ca) = orbit.azimuth.sin_cos();
        let center = Vector3::new(ce * sa, se, ce * ca) * orbit.distance;
        let forward = -center.normalize();
        let mut up = Vector3::y();
        if forward.cross(&up).norm() < 1e-9 {
            up = Vector3::z();
        }
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let rot = Matrix3::from_columns(&[right, down, forward]);
        let cam = Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: mat_to_rows(&rot),
            center: [center.x, center.y, center.z],
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera: focal lengths must be positive"));
        }
        if !(self.near < self.far && self.near >= 0.0) {
            return Err(Error::invalid(format!("camera: need 0 <= near < far, got {} / {}", self.near, self.far)));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn world_from_camera(&self) -> Rigid {
        Rigid::new(self.rotation_matrix(), self.center())
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }

    /// Origin and unit direction of the ray through a pixel center.
    pub fn generate_ray(&self, row: usize, col: usize) -> Result<(Vector3<f64>, Vector3<f64>)> {
        if row >= self.height || col >= self.width {
            return Err(Error::invalid(format!(
                "pixel ({row}, {col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(self.ray_through(row as f64 + 0.5, col as f64 + 0.5))
    }

    /// Ray through continuous image coordinates (`v` down, `u` right).
    pub fn ray_through(&self, v: f64, u: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.center(), (self.rotation_matrix() * d).normalize())
    }

    /// Continuous `(row, col)` image coordinates of a world point; `None`
    /// behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let q = self.rotation_matrix().transpose() * (p - self.center());
        if q.z <= 0.0 {
            return None;
        }
        Some((self.fy * q.y / q.z + self.cy, self.fx * q.x / q.z + self.cx))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

fn mat_to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}
