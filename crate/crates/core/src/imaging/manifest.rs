//! Dataset manifests: a TOML file listing posed images, optional known
//! lighting, and overlap masks between image pairs.
//!
//! ```toml
//! seed = 7
//!
//! [[images]]
//! path = "view_000.png"
//! width = 64
//! height = 64
//! intrinsics = [88.0, 88.0, 32.0, 32.0]          # fx, fy, cx, cy
//! pose = [1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, -3]    # rotation row-major, then translation
//! near = 1.5
//! far = 4.5
//! lighting = [...]                                 # optional, 27 values, 9 rows x RGB
//!
//! [[overlaps]]
//! i = 0
//! j = 1
//! mask = "overlap_000_001.png"                    # pixels of image i
//! mask_j = "overlap_001_000.png"                  # optional, pixels of image j
//! ```
//!
//! Relative paths resolve against the manifest's directory. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::camera::{PinholeCamera, Vec3};
use super::image::{load_image, load_mask, ImageBuffer, Mask};
use crate::error::{Error, Result};
use crate::field::ShLighting;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    overlaps: Vec<RawOverlap>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    path: PathBuf,
    width: usize,
    height: usize,
    intrinsics: [f64; 4],
    pose: Vec<f64>,
    near: f64,
    far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lighting: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverlap {
    i: usize,
    j: usize,
    mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_j: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestImage {
    pub path: PathBuf,
    pub camera: PinholeCamera,
    pub lighting: Option<ShLighting>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestOverlap {
    pub i: usize,
    pub j: usize,
    /// Overlap region in image `i`.
    pub mask: PathBuf,
    /// Overlap region in image `j`; when absent `mask` is used for both
    /// (co-registered images sharing one pixel grid).
    pub mask_j: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ManifestImage>,
    pub overlaps: Vec<ManifestOverlap>,
    pub seed: u64,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

/// Overlap between two images with masks loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapPair {
    pub i: usize,
    pub j: usize,
    pub mask_i: Mask,
    pub mask_j: Option<Mask>,
}

impl OverlapPair {
    /// Mask to apply to image `j`.
    pub fn mask_for_j(&self) -> &Mask {
        self.mask_j.as_ref().unwrap_or(&self.mask_i)
    }
}

/// A manifest with every image and mask loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<ImageBuffer>,
    pub cameras: Vec<PinholeCamera>,
    pub lightings: Vec<Option<ShLighting>>,
    pub overlaps: Vec<OverlapPair>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn pose_to_numbers(camera: &PinholeCamera) -> Vec<f64> {
    let r = &camera.rotation;
    let mut v: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
    v.extend(camera.translation.iter());
    v
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::Shape(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        let mut images = Vec::with_capacity(raw.images.len());
        for (k, img) in raw.images.into_iter().enumerate() {
            if img.pose.len() != 12 {
                return Err(Error::invalid(format!("image {k}: pose needs 12 numbers, got {}", img.pose.len())));
            }
            let p = &img.pose;
            let rotation = Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]);
            let camera = PinholeCamera::new(
                img.width,
                img.height,
                img.intrinsics,
                rotation,
                Vec3::new(p[9], p[10], p[11]),
                img.near,
                img.far,
            )
            .map_err(|e| Error::invalid(format!("image {k}: {e}")))?;
            let lighting = match img.lighting {
                Some(v) => Some(ShLighting::from_slice(&v).map_err(|e| Error::invalid(format!("image {k}: {e}")))?),
                None => None,
            };
            images.push(ManifestImage {
                path: img.path,
                camera,
                lighting,
            });
        }
        let n = images.len();
        let mut overlaps = Vec::with_capacity(raw.overlaps.len());
        for o in raw.overlaps {
            if o.i >= n || o.j >= n || o.i == o.j {
                return Err(Error::invalid(format!(
                    "overlap ({}, {}) is invalid for {} images",
                    o.i, o.j, n
                )));
            }
            overlaps.push(ManifestOverlap {
                i: o.i,
                j: o.j,
                mask: o.mask,
                mask_j: o.mask_j,
            });
        }
        Ok(Self {
            images,
            overlaps,
            seed: raw.seed,
            base_dir: base_dir.into(),
        })
    }

    pub fn to_toml(&self) -> String {
        let raw = RawManifest {
            seed: self.seed,
            images: self
                .images
                .iter()
                .map(|m| RawImage {
                    path: m.path.clone(),
                    width: m.camera.width,
                    height: m.camera.height,
                    intrinsics: [m.camera.fx, m.camera.fy, m.camera.cx, m.camera.cy],
                    pose: pose_to_numbers(&m.camera),
                    near: m.camera.near,
                    far: m.camera.far,
                    lighting: m.lighting.as_ref().map(|l| l.as_slice().to_vec()),
                })
                .collect(),
            overlaps: self
                .overlaps
                .iter()
                .map(|o| RawOverlap {
                    i: o.i,
                    j: o.j,
                    mask: o.mask.clone(),
                    mask_j: o.mask_j.clone(),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cameras(&self) -> Vec<PinholeCamera> {
        self.images.iter().map(|m| m.camera.clone()).collect()
    }

    /// Loads every image and mask, checking dimensions against the cameras.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut images = Vec::with_capacity(self.images.len());
        for m in &self.images {
            let path = self.resolve(&m.path);
            let img = load_image(&path)?;
            if img.width() != m.camera.width || img.height() != m.camera.height {
                return Err(Error::format(
                    path,
                    format!(
                        "image is {}x{} but its camera is {}x{}",
                        img.width(),
                        img.height(),
                        m.camera.width,
                        m.camera.height
                    ),
                ));
            }
            images.push(img);
        }
        let overlaps = self.load_overlaps(&images)?;
        Ok(Dataset {
            images,
            cameras: self.cameras(),
            lightings: self.images.iter().map(|m| m.lighting.clone()).collect(),
            overlaps,
            seed: self.seed,
        })
    }

    pub fn load_overlaps(&self, images: &[ImageBuffer]) -> Result<Vec<OverlapPair>> {
        let mut out = Vec::with_capacity(self.overlaps.len());
        for o in &self.overlaps {
            let load_checked = |p: &Path, img: &ImageBuffer| -> Result<Mask> {
                let path = self.resolve(p);
                let mask = load_mask(&path)?;
                if !mask.matches(img) {
                    return Err(Error::format(
                        path,
                        format!(
                            "mask is {}x{} but image is {}x{}",
                            mask.width(),
                            mask.height(),
                            img.width(),
                            img.height()
                        ),
                    ));
                }
                Ok(mask)
            };
            let mask_i = load_checked(&o.mask, &images[o.i])?;
            let mask_j = match &o.mask_j {
                Some(p) => Some(load_checked(p, &images[o.j])?),
                None => {
                    if !mask_i.matches(&images[o.j]) {
                        return Err(Error::format(
                            self.resolve(&o.mask),
                            "shared overlap mask does not match image j dimensions",
                        ));
                    }
                    None
                }
            };
            out.push(OverlapPair {
                i: o.i,
                j: o.j,
                mask_i,
                mask_j,
            });
        }
        Ok(out)
    }
}
