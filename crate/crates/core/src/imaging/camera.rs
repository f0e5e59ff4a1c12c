//! Pinhole cameras and primary rays.
//!
//! Conventions used throughout the crate: camera space is `+x` right, `+y`
//! down, `+z` forward; pixel `(px, py)` has its center at `(px + 0.5, py + 0.5)`
//! in continuous image coordinates.

use nalgebra::{Matrix3, Vector3};

use crate::error::{ensure, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

impl PinholeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        intrinsics: [f64; 4],
        rotation: Matrix3<f64>,
        translation: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx: intrinsics[0],
            fy: intrinsics[1],
            cx: intrinsics[2],
            cy: intrinsics[3],
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        width: usize,
        height: usize,
        fov_y_deg: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        ensure!(right.norm() > 1e-9, "look_at: up vector is parallel to the view direction");
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self::new(
            width,
            height,
            [f, f, width as f64 / 2.0, height as f64 / 2.0],
            rotation,
            eye,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "camera has zero image size");
        ensure!(
            self.fx.is_finite() && self.fy.is_finite() && self.fx != 0.0 && self.fy != 0.0,
            "camera focal lengths must be finite and non-zero"
        );
        ensure!(self.cx.is_finite() && self.cy.is_finite(), "camera principal point must be finite");
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        ensure!(orth <= 1e-9, "camera rotation is not orthonormal (error {orth:e})");
        let det = r.determinant();
        ensure!((det - 1.0).abs() <= 1e-9, "camera rotation determinant is {det}, expected +1");
        ensure!(self.translation.iter().all(|v| v.is_finite()), "camera translation must be finite");
        ensure!(
            self.near > 0.0 && self.near < self.far && self.far.is_finite(),
            "camera needs 0 < near < far (got near={}, far={})",
            self.near,
            self.far
        );
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Primary ray through the center of pixel `(px, py)`.
    pub fn generate_ray(&self, px: usize, py: usize) -> Result<Ray> {
        ensure!(
            px < self.width && py < self.height,
            "pixel ({px}, {py}) outside {}x{} image",
            self.width,
            self.height
        );
        Ok(self.ray_through(px as f64 + 0.5, py as f64 + 0.5))
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let local = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray::new(self.translation, self.rotation * local)
    }

    /// Rays for every pixel in row-major order.
    pub fn all_rays(&self) -> Vec<Ray> {
        let mut rays = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                rays.push(self.ray_through(px as f64 + 0.5, py as f64 + 0.5));
            }
        }
        rays
    }

    /// Projects a world point to continuous image coordinates and camera depth.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let q = self.rotation.transpose() * (p - self.translation);
        if q.z <= 0.0 {
            return None;
        }
        Some((self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy, q.z))
    }

    /// Distance along the viewing ray toward `p` at which it is reached.
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        (p - self.translation).norm()
    }
}

/// Rotation of `angle` radians about the world y axis.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(fx: f64, cx: f64, rotation: Matrix3<f64>) -> PinholeCamera {
        PinholeCamera::new(4, 4, [fx, fx, cx, cx], rotation, Vec3::zeros(), 0.1, 10.0).unwrap()
    }

    #[test]
    fn principal_ray_is_forward() {
        let c = cam(2.0, 1.5, Matrix3::identity());
        let r = c.generate_ray(1, 1).unwrap();
        assert!((r.direction - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert_eq!(r.origin, Vec3::zeros());
    }

    #[test]
    fn unit_focal_offset_pixel() {
        // pixel center (1, 0) needs px + 0.5 = 1 with cx = 0, so use the
        // continuous form directly.
        let c = cam(1.0, 0.0, Matrix3::identity());
        let r = c.ray_through(1.0, 0.0);
        let s = 1.0 / 2f64.sqrt();
        assert!((r.direction - Vec3::new(s, 0.0, s)).norm() < 1e-15);
    }

    #[test]
    fn rotated_principal_ray() {
        let c = cam(2.0, 1.5, rotation_y(std::f64::consts::FRAC_PI_2));
        let r = c.generate_ray(1, 1).unwrap();
        assert!((r.direction - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn out_of_range_pixel() {
        let c = cam(2.0, 2.0, Matrix3::identity());
        assert!(c.generate_ray(4, 0).is_err());
        assert!(c.generate_ray(0, 4).is_err());
    }

    #[test]
    fn rejects_bad_pose_and_depths() {
        let mut bad = Matrix3::identity();
        bad[(0, 0)] = -1.0;
        assert!(PinholeCamera::new(4, 4, [1.0, 1.0, 2.0, 2.0], bad, Vec3::zeros(), 0.1, 1.0).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(PinholeCamera::new(4, 4, [1.0, 1.0, 2.0, 2.0], skew, Vec3::zeros(), 0.1, 1.0).is_err());
        let id = Matrix3::identity();
        assert!(PinholeCamera::new(4, 4, [1.0, 1.0, 2.0, 2.0], id, Vec3::zeros(), 1.0, 1.0).is_err());
        assert!(PinholeCamera::new(4, 4, [1.0, 1.0, 2.0, 2.0], id, Vec3::zeros(), 0.0, 1.0).is_err());
    }

    #[test]
    fn projection_inverts_ray() {
        let c = PinholeCamera::look_at(
            16,
            12,
            50.0,
            Vec3::new(2.0, -1.0, 3.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            0.5,
            8.0,
        )
        .unwrap();
        let r = c.generate_ray(5, 7).unwrap();
        let (u, v, z) = c.project(&r.at(2.5)).unwrap();
        assert!((u - 5.5).abs() < 1e-12 && (v - 7.5).abs() < 1e-12);
        assert!(z > 0.0);
        assert!(c.project(&r.at(-1.0)).is_none());
    }

    proptest! {
        #[test]
        fn rays_are_unit(
            yaw in -3.2f64..3.2, pitch in -1.4f64..1.4, f in 0.5f64..200.0,
            px in 0usize..32, py in 0usize..24,
        ) {
            let eye = Vec3::new(yaw.cos() * pitch.cos(), pitch.sin(), yaw.sin() * pitch.cos()) * 3.0;
            let c = PinholeCamera::look_at(32, 24, 10.0 + f / 4.0, eye, Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), 0.1, 9.0).unwrap();
            let r = c.generate_ray(px, py).unwrap();
            prop_assert!((r.direction.norm() - 1.0).abs() <= 1e-12);
        }
    }
}
