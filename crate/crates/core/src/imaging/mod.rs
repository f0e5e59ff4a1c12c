//! Images, cameras, manifests and synthetic ground truth.

mod camera;
mod image;
mod manifest;
mod scene;
mod synth;

pub use camera::{rotation_y, PinholeCamera, Ray, Vec3};
pub use image::{load_image, load_mask, quantize, save_image, save_mask, ImageBuffer, Mask};
pub use manifest::{pose_to_numbers, Dataset, DatasetManifest, ManifestImage, ManifestOverlap, OverlapPair};
pub use scene::{render_oracle, Primitive, ScenePoint, SceneSpec, ORACLE_STEPS};
pub use synth::{overlap_masks, surface_points, synthesize, LightingSpec, Perturbation, PerturbationRange, RingSpec, SynthData, SynthSpec};

use crate::error::{ensure, Result};

/// Synthetic radiometric distortion: `clamp(gain * v^gamma + bias, 0, 1)` per channel.
pub fn perturb_colors(image: &ImageBuffer, gain: [f64; 3], bias: [f64; 3], gamma: [f64; 3]) -> Result<ImageBuffer> {
    ensure!(gain.iter().all(|g| *g > 0.0), "gain must be positive per channel, got {gain:?}");
    ensure!(gamma.iter().all(|g| *g > 0.0), "gamma must be positive per channel, got {gamma:?}");
    let mut out = image.clone();
    for px in out.data_mut().chunks_mut(3) {
        for c in 0..3 {
            let v = px[c].max(0.0);
            let v = if gamma[c] == 1.0 { v } else { v.powf(gamma[c]) };
            px[c] = (gain[c] * v + bias[c]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
