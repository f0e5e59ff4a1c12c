//! Synthetic posed datasets: oracle renders of an analytic scene from a ring
//! of cameras, per-image radiometric perturbations and exact overlap masks.
//!
//! ```toml
//! seed = 3
//!
//! [scene]
//! primitives = [{ kind = "sphere", center = [0, 0, 0], radius = 0.8, density = 40, albedo = [0.8, 0.4, 0.3] }]
//!
//! [ring]
//! views = 8
//! radius = 3.0
//! elevation = 0.6
//! fov_deg = 40
//! width = 64
//! height = 64
//! near = 1.5
//! far = 4.5
//!
//! [[lightings]]
//! ambient = [0.7, 0.7, 0.7]
//! direction = [0.3, 1.0, -0.5]
//! strength = [0.3, 0.3, 0.3]
//!
//! [[perturbations]]
//! gain = [1.1, 0.9, 1.0]
//! bias = [0.02, 0.0, -0.03]
//! gamma = [1.0, 1.1, 0.9]
//! ```
//!
//! Lightings and perturbations are assigned to views cyclically. With
//! `random_perturbation` each view instead draws gain, bias and gamma
//! uniformly from the given ranges.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{PinholeCamera, Vec3};
use super::image::{save_image, save_mask, ImageBuffer, Mask};
use super::manifest::{Dataset, DatasetManifest, ManifestImage, ManifestOverlap, OverlapPair};
use super::perturb_colors;
use super::scene::{render_oracle, SceneSpec, ORACLE_STEPS};
use crate::error::{ensure, Error, Result};
use crate::field::ShLighting;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub views: usize,
    pub radius: f64,
    /// Camera height above the target.
    #[serde(default)]
    pub elevation: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub target: [f64; 3],
    /// Angle of the first camera around the ring.
    #[serde(default)]
    pub phase_deg: f64,
}

impl RingSpec {
    /// Camera `i` of `n` evenly spaced around the vertical axis through the
    /// target, looking at it with world `+y` up.
    pub fn camera(&self, i: usize, n: usize) -> Result<PinholeCamera> {
        let a = self.phase_deg.to_radians() + i as f64 / n as f64 * std::f64::consts::TAU;
        let t = Vec3::from(self.target);
        let eye = t + Vec3::new(self.radius * a.sin(), self.elevation, -self.radius * a.cos());
        PinholeCamera::look_at(self.width, self.height, self.fov_deg, eye, t, Vec3::new(0.0, 1.0, 0.0), self.near, self.far)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LightingSpec {
    Coefficients {
        coefficients: Vec<f64>,
    },
    Directional {
        ambient: [f64; 3],
        direction: [f64; 3],
        strength: [f64; 3],
    },
}

impl LightingSpec {
    pub fn lighting(&self) -> Result<ShLighting> {
        match self {
            LightingSpec::Coefficients { coefficients } => ShLighting::from_slice(coefficients),
            LightingSpec::Directional {
                ambient,
                direction,
                strength,
            } => ShLighting::ambient_directional(*ambient, &Vec3::from(*direction), *strength),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    #[serde(default = "ones")]
    pub gain: [f64; 3],
    #[serde(default)]
    pub bias: [f64; 3],
    #[serde(default = "ones")]
    pub gamma: [f64; 3],
}

fn ones() -> [f64; 3] {
    [1.0; 3]
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            gain: ones(),
            bias: [0.0; 3],
            gamma: ones(),
        }
    }
}

impl Perturbation {
    pub fn apply(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        perturb_colors(image, self.gain, self.bias, self.gamma)
    }
}

/// `[lo, hi]` ranges for random per-view perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRange {
    pub gain: [f64; 2],
    pub bias: [f64; 2],
    pub gamma: [f64; 2],
}

impl PerturbationRange {
    fn draw(&self, rng: &mut impl Rng) -> Perturbation {
        let mut u = |r: [f64; 2]| -> [f64; 3] {
            [0; 3].map(|_| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) })
        };
        Perturbation {
            gain: u(self.gain),
            bias: u(self.bias),
            gamma: u(self.gamma),
        }
    }
}

fn default_oracle_steps() -> usize {
    ORACLE_STEPS
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    pub scene: SceneSpec,
    pub ring: RingSpec,
    #[serde(default)]
    pub lightings: Vec<LightingSpec>,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    #[serde(default)]
    pub random_perturbation: Option<PerturbationRange>,
    #[serde(default = "default_oracle_steps")]
    pub oracle_steps: usize,
    /// Store each view's lighting in the manifest.
    #[serde(default = "default_true")]
    pub record_lighting: bool,
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("<synth spec>", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        ensure!(self.ring.views >= 1, "ring needs at least one view");
        ensure!(self.ring.radius > 0.0, "ring radius must be positive");
        ensure!(self.oracle_steps >= 64, "oracle_steps must be at least 64");
        for l in &self.lightings {
            l.lighting()?;
        }
        Ok(())
    }
}

/// A generated dataset before it is written to disk.
#[derive(Clone, Debug)]
pub struct SynthData {
    /// Oracle renders before perturbation.
    pub clean: Vec<ImageBuffer>,
    /// Perturbed images, the training inputs.
    pub images: Vec<ImageBuffer>,
    pub cameras: Vec<PinholeCamera>,
    pub lightings: Vec<ShLighting>,
    /// Index into the spec's lighting list used by each view.
    pub lighting_index: Vec<usize>,
    pub perturbations: Vec<Perturbation>,
    pub overlaps: Vec<OverlapPair>,
    pub seed: u64,
    record_lighting: bool,
}

impl SynthData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            images: self.images.clone(),
            cameras: self.cameras.clone(),
            lightings: self
                .lightings
                .iter()
                .map(|l| self.record_lighting.then(|| l.clone()))
                .collect(),
            overlaps: self.overlaps.clone(),
            seed: self.seed,
        }
    }

    /// Writes `view_###.png`, `clean_###.png`, overlap masks and
    /// `manifest.toml` into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut images = Vec::new();
        for (i, (img, clean)) in self.images.iter().zip(&self.clean).enumerate() {
            let name = PathBuf::from(format!("view_{i:03}.png"));
            save_image(img, dir.join(&name))?;
            save_image(clean, dir.join(format!("clean_{i:03}.png")))?;
            images.push(ManifestImage {
                path: name,
                camera: self.cameras[i].clone(),
                lighting: self.record_lighting.then(|| self.lightings[i].clone()),
            });
        }
        let mut overlaps = Vec::new();
        for o in &self.overlaps {
            let mi = PathBuf::from(format!("overlap_{:03}_{:03}.png", o.i, o.j));
            let mj = PathBuf::from(format!("overlap_{:03}_{:03}.png", o.j, o.i));
            save_mask(&o.mask_i, dir.join(&mi))?;
            save_mask(o.mask_for_j(), dir.join(&mj))?;
            overlaps.push(ManifestOverlap {
                i: o.i,
                j: o.j,
                mask: mi,
                mask_j: Some(mj),
            });
        }
        let manifest = DatasetManifest {
            images,
            overlaps,
            seed: self.seed,
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.toml");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// Renders the spec. `views` overrides the ring's view count.
pub fn synthesize(spec: &SynthSpec, views: Option<usize>) -> Result<SynthData> {
    spec.validate()?;
    let n = views.unwrap_or(spec.ring.views);
    ensure!(n >= 1, "need at least one view");
    let cameras = (0..n).map(|i| spec.ring.camera(i, n)).collect::<Result<Vec<_>>>()?;
    let table = if spec.lightings.is_empty() {
        vec![ShLighting::dc_cancel()]
    } else {
        spec.lightings.iter().map(LightingSpec::lighting).collect::<Result<Vec<_>>>()?
    };
    let lighting_index: Vec<usize> = (0..n).map(|i| i % table.len()).collect();
    let lightings: Vec<ShLighting> = lighting_index.iter().map(|k| table[*k].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perturbations: Vec<Perturbation> = (0..n)
        .map(|i| match (&spec.random_perturbation, spec.perturbations.is_empty()) {
            (Some(r), _) => r.draw(&mut rng),
            (None, true) => Perturbation::default(),
            (None, false) => spec.perturbations[i % spec.perturbations.len()],
        })
        .collect();
    let clean = cameras
        .par_iter()
        .zip(&lightings)
        .map(|(c, l)| render_oracle(&spec.scene, c, l, spec.oracle_steps))
        .collect::<Result<Vec<_>>>()?;
    let images = clean
        .iter()
        .zip(&perturbations)
        .map(|(img, p)| p.apply(img))
        .collect::<Result<Vec<_>>>()?;
    let overlaps = overlap_masks(&spec.scene, &cameras);
    Ok(SynthData {
        clean,
        images,
        cameras,
        lightings,
        lighting_index,
        perturbations,
        overlaps,
        seed: spec.seed,
        record_lighting: spec.record_lighting,
    })
}

/// First surface point seen through every pixel, `None` for background.
pub fn surface_points(scene: &SceneSpec, camera: &PinholeCamera) -> Vec<Option<Vec3>> {
    camera
        .all_rays()
        .iter()
        .map(|r| scene.first_hit(r, camera.near, camera.far).map(|(t, _)| r.at(t)))
        .collect()
}

/// Pixel of `camera` at which `p` is directly visible, if any.
fn visible_pixel(scene: &SceneSpec, camera: &PinholeCamera, hits: &[Option<Vec3>], p: &Vec3) -> Option<usize> {
    let (u, v, _) = camera.project(p)?;
    if !(u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64) {
        return None;
    }
    let d = camera.distance_to(p);
    if d < camera.near || d > camera.far {
        return None;
    }
    let ray = super::camera::Ray::new(camera.center(), p - camera.center());
    let (t, _) = scene.first_hit(&ray, camera.near, camera.far)?;
    if (t - d).abs() > 1e-6 * (1.0 + d) {
        return None;
    }
    let k = v as usize * camera.width + u as usize;
    hits[k].map(|_| k)
}

/// Overlap masks for every unordered pair with a non-empty overlap. A
/// pixel of one view is in the overlap iff the surface point it sees is
/// unoccluded inside the other view's frustum and lands on a non-background
/// pixel there.
pub fn overlap_masks(scene: &SceneSpec, cameras: &[PinholeCamera]) -> Vec<OverlapPair> {
    let hits: Vec<Vec<Option<Vec3>>> = cameras.par_iter().map(|c| surface_points(scene, c)).collect();
    let seen_from = |a: usize, b: usize| -> Mask {
        let cam = &cameras[a];
        Mask::from_fn(cam.width, cam.height, |x, y| {
            hits[a][y * cam.width + x].is_some_and(|p| visible_pixel(scene, &cameras[b], &hits[b], &p).is_some())
        })
    };
    let pairs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|i| (i + 1..cameras.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .filter_map(|&(i, j)| {
            let mi = seen_from(i, j);
            let mj = seen_from(j, i);
            (mi.area() > 0 && mj.area() > 0).then_some(OverlapPair {
                i,
                j,
                mask_i: mi,
                mask_j: Some(mj),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SPEC: &str = r#"
seed = 5
oracle_steps = 128

[scene]
primitives = [
  { kind = "sphere", center = [0, 0, 0], radius = 0.7, density = 40, albedo = [0.8, 0.5, 0.3] },
]

[ring]
views = 8
radius = 3.0
elevation = 0.5
fov_deg = 35
width = 16
height = 16
near = 1.0
far = 5.0

[[lightings]]
ambient = [0.7, 0.7, 0.7]
direction = [0.3, 1.0, -0.5]
strength = [0.3, 0.3, 0.3]

[[perturbations]]
gain = [1.2, 1.0, 0.9]
bias = [0.05, 0.0, 0.0]
"#;

    #[test]
    fn parses_and_renders() {
        let spec = SynthSpec::parse(SPEC).unwrap();
        let d = synthesize(&spec, None).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.images[0] != d.clean[0]);
        assert_eq!(d.perturbations[3].gain, [1.2, 1.0, 0.9]);
        // centre pixel sees the sphere
        let c = d.clean[0].get(8, 8);
        assert!(c[0] > 0.3, "{c:?}");
        assert_eq!(d.clean[0].get(0, 0), [0.0; 3]);
    }

    #[test]
    fn single_view_has_no_overlaps() {
        let spec = SynthSpec::parse(SPEC).unwrap();
        let d = synthesize(&spec, Some(1)).unwrap();
        assert!(d.overlaps.is_empty());
    }

    #[test]
    fn identical_cameras_overlap_everywhere() {
        let scene = SceneSpec {
            primitives: vec![super::super::Primitive::Box {
                center: [0.0, 0.0, 0.0],
                half_extents: [5.0, 5.0, 0.5],
                density: 10.0,
                albedo: [0.5; 3],
            }],
            background: [0.0; 3],
        };
        let c = PinholeCamera::look_at(8, 6, 30.0, Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), 0.5, 6.0).unwrap();
        let o = overlap_masks(&scene, &[c.clone(), c]);
        assert_eq!(o.len(), 1);
        assert_eq!(o[0].mask_i.area(), 48);
        assert_eq!(o[0].mask_for_j().area(), 48);
    }

    #[test]
    fn ring_neighbours_overlap_and_masks_match_geometry() {
        let spec = SynthSpec::parse(SPEC).unwrap();
        let d = synthesize(&spec, None).unwrap();
        for i in 0..8 {
            let j = (i + 1) % 8;
            let (a, b) = (i.min(j), i.max(j));
            let o = d.overlaps.iter().find(|o| o.i == a && o.j == b).expect("adjacent pair");
            assert!(o.mask_i.area() > 0);
        }
        // independent check: a masked point faces both cameras
        let o = &d.overlaps[0];
        let hits = surface_points(&spec.scene, &d.cameras[o.i]);
        for y in 0..16 {
            for x in 0..16 {
                if o.mask_i.get(x, y) {
                    let p = hits[y * 16 + x].unwrap();
                    let n = p.normalize();
                    assert!(n.dot(&(d.cameras[o.j].center() - p)) > -1e-9);
                    assert!(n.dot(&(d.cameras[o.i].center() - p)) > -1e-9);
                }
            }
        }
    }

    #[test]
    fn write_and_reload() {
        let spec = SynthSpec::parse(SPEC).unwrap();
        let d = synthesize(&spec, Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = d.write(dir.path()).unwrap();
        let back = DatasetManifest::load(&path).unwrap().load_dataset().unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.overlaps.len(), d.overlaps.len());
        assert_eq!(back.lightings[0].as_ref(), Some(&d.lightings[0]));
        for (a, b) in back.images[1].data().iter().zip(d.images[1].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.overlaps[0].mask_i, d.overlaps[0].mask_i);
    }

    #[test]
    fn random_perturbations_are_seeded() {
        let mut spec = SynthSpec::parse(SPEC).unwrap();
        spec.random_perturbation = Some(PerturbationRange {
            gain: [0.8, 1.2],
            bias: [-0.05, 0.05],
            gamma: [0.9, 1.1],
        });
        let a = synthesize(&spec, Some(2)).unwrap();
        let b = synthesize(&spec, Some(2)).unwrap();
        assert_eq!(a.perturbations, b.perturbations);
        assert!(a.perturbations[0] != a.perturbations[1]);
    }
}
