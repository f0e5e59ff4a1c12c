//! Analytic scenes made of constant-density spheres and boxes, and an
//! independent fixed-step evaluator of the relit volume-rendering integral.
//! The evaluator is the ground-truth generator for synthetic datasets.

use serde::{Deserialize, Serialize};

use super::camera::{PinholeCamera, Ray, Vec3};
use super::image::ImageBuffer;
use crate::error::{ensure, Result};
use crate::field::ShLighting;

/// Default number of quadrature steps for [`render_oracle`].
pub const ORACLE_STEPS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        albedo: [f64; 3],
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        density: f64,
        albedo: [f64; 3],
    },
}

impl Primitive {
    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() <= *radius,
            Primitive::Box {
                center, half_extents, ..
            } => (0..3).all(|i| (p[i] - center[i]).abs() <= half_extents[i]),
        }
    }

    /// Outward surface normal associated with a point in or near the primitive:
    /// radial for spheres, the dominant face normal for boxes.
    pub fn normal_at(&self, p: &Vec3) -> Vec3 {
        match self {
            Primitive::Sphere { center, .. } => {
                let q = p - Vec3::from(*center);
                if q.norm() > 0.0 {
                    q.normalize()
                } else {
                    Vec3::new(0.0, 0.0, 1.0)
                }
            }
            Primitive::Box {
                center, half_extents, ..
            } => {
                let q = p - Vec3::from(*center);
                let mut axis = 0;
                let mut best = f64::NEG_INFINITY;
                for i in 0..3 {
                    let r = q[i].abs() / half_extents[i];
                    if r > best {
                        best = r;
                        axis = i;
                    }
                }
                let mut n = Vec3::zeros();
                n[axis] = if q[axis] >= 0.0 { 1.0 } else { -1.0 };
                n
            }
        }
    }

    /// Entry distance of `ray` into the primitive within `[t_min, t_max]`.
    pub fn entry(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let (t0, t1) = match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vec3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                (-b - s, -b + s)
            }
            Primitive::Box {
                center, half_extents, ..
            } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let lo = center[i] - half_extents[i];
                    let hi = center[i] + half_extents[i];
                    let o = ray.origin[i];
                    let d = ray.direction[i];
                    if d.abs() < 1e-300 {
                        if o < lo || o > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o) / d, (hi - o) / d);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                (t0, t1)
            }
        };
        if t1 < t_min || t0 > t_max {
            return None;
        }
        Some(t0.max(t_min))
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.density() >= 0.0 && self.density().is_finite(), "primitive density must be finite and >= 0");
        ensure!(
            self.albedo().iter().all(|a| (0.0..=1.0).contains(a)),
            "primitive albedo channels must lie in [0, 1]"
        );
        match self {
            Primitive::Sphere { radius, .. } => ensure!(*radius > 0.0, "sphere radius must be positive"),
            Primitive::Box { half_extents, .. } => {
                ensure!(half_extents.iter().all(|h| *h > 0.0), "box half extents must be positive")
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background: [f64; 3],
}

/// Density, albedo and normal of the analytic scene at one point.
#[derive(Clone, Copy, Debug)]
pub struct ScenePoint {
    pub density: f64,
    pub albedo: [f64; 3],
    pub normal: Vec3,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        ensure!(
            self.background.iter().all(|a| (0.0..=1.0).contains(a)),
            "background channels must lie in [0, 1]"
        );
        Ok(())
    }

    /// Overlapping primitives add densities; albedo and normal are
    /// density-weighted averages.
    pub fn evaluate(&self, p: &Vec3) -> ScenePoint {
        let mut density = 0.0;
        let mut albedo = [0.0; 3];
        let mut normal = Vec3::zeros();
        for prim in self.primitives.iter().filter(|q| q.contains(p)) {
            let d = prim.density();
            density += d;
            let a = prim.albedo();
            for c in 0..3 {
                albedo[c] += d * a[c];
            }
            normal += prim.normal_at(p) * d;
        }
        if density > 0.0 {
            for a in &mut albedo {
                *a /= density;
            }
            normal = normal.try_normalize(0.0).unwrap_or_else(|| Vec3::new(0.0, 0.0, 1.0));
        }
        ScenePoint {
            density,
            albedo,
            normal,
        }
    }

    /// First surface crossing along the ray, with the index of the primitive
    /// that is entered. Zero-density primitives are ignored.
    pub fn first_hit(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.density() > 0.0)
            .filter_map(|(i, p)| p.entry(ray, t_min, t_max).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Radiance along one ray by midpoint quadrature with `n_steps` steps
    /// between `near` and `far`.
    pub fn integrate_ray(&self, ray: &Ray, near: f64, far: f64, lighting: &ShLighting, n_steps: usize) -> [f64; 3] {
        let dt = (far - near) / n_steps as f64;
        let mut transmittance = 1.0;
        let mut color = [0.0; 3];
        for k in 0..n_steps {
            let p = ray.at(near + (k as f64 + 0.5) * dt);
            let s = self.evaluate(&p);
            if s.density <= 0.0 {
                continue;
            }
            let alpha = 1.0 - (-s.density * dt).exp();
            let irradiance = lighting.irradiance(&s.normal);
            for c in 0..3 {
                color[c] += transmittance * alpha * s.albedo[c] * irradiance[c];
            }
            transmittance *= 1.0 - alpha;
        }
        for c in 0..3 {
            color[c] += transmittance * self.background[c];
        }
        color
    }
}

/// Renders the analytic scene through `camera` under `lighting`.
pub fn render_oracle(scene: &SceneSpec, camera: &PinholeCamera, lighting: &ShLighting, n_steps: usize) -> Result<ImageBuffer> {
    scene.validate()?;
    ensure!(n_steps >= 64, "oracle needs at least 64 quadrature steps, got {n_steps}");
    let mut data = Vec::with_capacity(camera.width * camera.height * 3);
    for ray in camera.all_rays() {
        data.extend_from_slice(&scene.integrate_ray(&ray, camera.near, camera.far, lighting, n_steps));
    }
    ImageBuffer::from_data(camera.width, camera.height, data)
}
