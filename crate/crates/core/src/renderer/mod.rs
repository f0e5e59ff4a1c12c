//! Ray sampling, alpha compositing, normal aggregation and relit rendering.
//!
//! The same math runs in two forms: plain `f64` functions used for image
//! rendering and tests, and tape-recorded batches used for training. Both
//! share [`SampledBatch`] for the sample depths.

mod ops;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{Tape, Var};
use crate::error::{ensure, Result};
use crate::field::{sh_basis_unchecked, MlpFieldView, SceneField, ShLighting, SH_COUNT};
use crate::imaging::{ImageBuffer, PinholeCamera, Ray, Vec3};

pub(crate) use ops::weights_and_exit;

pub const DEFAULT_N_DEPTH: usize = 64;

/// Below this norm the aggregated normal falls back to `-d`.
pub const NORMAL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// Composite of albedo only.
    Lambertian,
    /// Cumulative albedo shaded by SH lighting at the aggregated normal.
    Relit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_depth: usize,
    pub seed: u64,
    pub mode: RenderMode,
    pub background: [f64; 3],
    /// Jitter samples within strata. When false, stratum midpoints are used.
    pub stratified: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_depth: DEFAULT_N_DEPTH,
            seed: 0,
            mode: RenderMode::Relit,
            background: [0.0; 3],
            stratified: true,
        }
    }
}

/// One depth per stratum, `t_i` uniform in
/// `[near + (i-1)(far-near)/N, near + i(far-near)/N)`.
pub fn stratified_sample(near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    stratified_sample_with(near, far, n, || rng.gen::<f64>())
}

/// [`stratified_sample`] with an explicit `[0, 1)` source.
pub fn stratified_sample_with(near: f64, far: f64, n: usize, mut u: impl FnMut() -> f64) -> Result<Vec<f64>> {
    ensure!(near.is_finite() && far.is_finite() && near < far, "invalid depth range [{near}, {far}]");
    ensure!(n >= 2, "need at least 2 samples per ray, got {n}");
    let step = (far - near) / n as f64;
    Ok((0..n).map(|i| near + (i as f64 + u()) * step).collect())
}

/// Midpoints of the strata.
pub fn midpoint_samples(near: f64, far: f64, n: usize) -> Result<Vec<f64>> {
    stratified_sample_with(near, far, n, || 0.5)
}

/// `delta_i = t_{i+1} - t_i`, with the last one reaching `far`.
pub fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = t.last() {
        d.push(far - last);
    }
    d
}

fn check_inputs(sigma: &[f64], delta: &[f64]) -> Result<()> {
    ensure!(sigma.len() == delta.len(), "{} densities for {} deltas", sigma.len(), delta.len());
    ensure!(sigma.iter().all(|s| *s >= 0.0), "negative density");
    ensure!(delta.iter().all(|d| *d >= 0.0), "negative sample spacing");
    Ok(())
}

/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_inputs(sigma, delta)?;
    let mut acc = 0.0f64;
    Ok(sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let t = (-acc).exp();
            acc += s * d;
            t
        })
        .collect())
}

/// Compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))`.
pub fn composite_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_inputs(sigma, delta)?;
    Ok(weights_and_exit(sigma, delta, sigma.len().max(1)).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    /// `sum_i w_i value_i`, one entry per value channel.
    pub value: Vec<f64>,
    pub weights: Vec<f64>,
    /// `sum_i w_i`.
    pub opacity: f64,
}

impl Composite {
    /// `value + (1 - opacity) background`.
    pub fn over(&self, background: &[f64]) -> Vec<f64> {
        self.value
            .iter()
            .zip(background)
            .map(|(v, b)| v + (1.0 - self.opacity) * b)
            .collect()
    }
}

/// Composites `values` (`sigma.len()` rows of `channels` entries).
pub fn composite(sigma: &[f64], values: &[f64], channels: usize, delta: &[f64]) -> Result<Composite> {
    ensure!(values.len() == sigma.len() * channels, "value list does not match sample count");
    let weights = composite_weights(sigma, delta)?;
    let mut value = vec![0.0; channels];
    for (w, v) in weights.iter().zip(values.chunks(channels.max(1))) {
        value.iter_mut().zip(v).for_each(|(acc, x)| *acc += w * x);
    }
    Ok(Composite {
        opacity: weights.iter().sum(),
        value,
        weights,
    })
}

/// Depths, spacings and points along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl RaySamples {
    pub fn new(ray: &Ray, t: Vec<f64>, far: f64) -> Self {
        let delta = deltas(&t, far);
        let points = t.iter().map(|ti| ray.at(*ti)).collect();
        Self { t, delta, points }
    }
}

/// Composite of field albedo with compositing weights, plus the weights.
pub fn cumulative_albedo(field: &dyn SceneField, samples: &RaySamples) -> Result<Composite> {
    let q = field.query(&samples.points);
    let sigma: Vec<f64> = q.iter().map(|(s, _)| *s).collect();
    let albedo: Vec<f64> = q.iter().flat_map(|(_, a)| *a).collect();
    composite(&sigma, &albedo, 3, &samples.delta)
}

/// `normalize(sum_i w_i (-grad sigma_i))`, or `-direction` when degenerate.
pub fn aggregate_normal_from(weights: &[f64], gradients: &[Vec3], direction: &Vec3) -> Vec3 {
    let raw: Vec3 = weights.iter().zip(gradients).map(|(w, g)| -g * *w).sum();
    let norm = raw.norm();
    if norm < NORMAL_EPS || !norm.is_finite() {
        -direction.normalize()
    } else {
        raw / norm
    }
}

pub fn aggregate_normal(field: &dyn SceneField, samples: &RaySamples, direction: &Vec3) -> Result<Vec3> {
    let q = field.query(&samples.points);
    let sigma: Vec<f64> = q.iter().map(|(s, _)| *s).collect();
    let w = composite_weights(&sigma, &samples.delta)?;
    let g = field.density_gradients(&samples.points);
    Ok(aggregate_normal_from(&w, &g, direction))
}

/// Everything computed for one rendered pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelRender {
    pub color: [f64; 3],
    pub albedo: [f64; 3],
    pub normal: Vec3,
    pub opacity: f64,
}

/// Per-pixel random stream: identical for a given `(seed, index)`
/// regardless of which other pixels are rendered.
pub fn pixel_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn pixel_depths(near: f64, far: f64, opts: &RenderOptions, stream: u64) -> Result<Vec<f64>> {
    if opts.stratified {
        stratified_sample(near, far, opts.n_depth, &mut pixel_rng(opts.seed, stream))
    } else {
        midpoint_samples(near, far, opts.n_depth)
    }
}

/// Renders rays sharing one field query. `depths` holds `n_depth` entries
/// per ray.
fn render_rays(
    field: &dyn SceneField,
    rays: &[(Ray, f64, &ShLighting)],
    depths: &[f64],
    opts: &RenderOptions,
) -> Result<Vec<PixelRender>> {
    let n = opts.n_depth;
    let mut points = Vec::with_capacity(depths.len());
    let mut delta = Vec::with_capacity(depths.len());
    for (r, (ray, far, _)) in rays.iter().enumerate() {
        let t = &depths[r * n..(r + 1) * n];
        points.extend(t.iter().map(|ti| ray.at(*ti)));
        delta.extend(deltas(t, *far));
    }
    let q = field.query(&points);
    let grads = match opts.mode {
        RenderMode::Relit => Some(field.density_gradients(&points)),
        RenderMode::Lambertian => None,
    };
    rays.iter()
        .enumerate()
        .map(|(r, (ray, _, lighting))| {
            let range = r * n..(r + 1) * n;
            let sigma: Vec<f64> = q[range.clone()].iter().map(|(s, _)| *s).collect();
            let albedo: Vec<f64> = q[range.clone()].iter().flat_map(|(_, a)| *a).collect();
            let c = composite(&sigma, &albedo, 3, &delta[range.clone()])?;
            let a = [c.value[0], c.value[1], c.value[2]];
            let normal = match &grads {
                Some(g) => aggregate_normal_from(&c.weights, &g[range], &ray.direction),
                None => -ray.direction,
            };
            let lit = match opts.mode {
                RenderMode::Relit => {
                    let irr = lighting.irradiance_from_basis(&sh_basis_unchecked(&normal));
                    [a[0] * irr[0], a[1] * irr[1], a[2] * irr[2]]
                }
                RenderMode::Lambertian => a,
            };
            let residual = 1.0 - c.opacity;
            Ok(PixelRender {
                color: std::array::from_fn(|k| lit[k] + residual * opts.background[k]),
                albedo: a,
                normal,
                opacity: c.opacity,
            })
        })
        .collect()
}

/// Renders one ray. `stream` selects the random stream (the pixel index for
/// image rendering).
pub fn render_pixel_details(
    field: &dyn SceneField,
    lighting: &ShLighting,
    ray: &Ray,
    near: f64,
    far: f64,
    opts: &RenderOptions,
    stream: u64,
) -> Result<PixelRender> {
    let depths = pixel_depths(near, far, opts, stream)?;
    Ok(render_rays(field, &[(*ray, far, lighting)], &depths, opts)?.remove(0))
}

pub fn render_pixel(
    field: &dyn SceneField,
    lighting: &ShLighting,
    ray: &Ray,
    near: f64,
    far: f64,
    opts: &RenderOptions,
    stream: u64,
) -> Result<[f64; 3]> {
    Ok(render_pixel_details(field, lighting, ray, near, far, opts, stream)?.color)
}

const PIXELS_PER_TASK: usize = 64;

/// Per-pixel details for a whole camera, row-major.
pub fn render_image_details(
    field: &dyn SceneField,
    lighting: &ShLighting,
    camera: &PinholeCamera,
    opts: &RenderOptions,
) -> Result<Vec<PixelRender>> {
    ensure!(opts.n_depth >= 2, "n_depth must be at least 2");
    camera.validate()?;
    let rays = camera.all_rays();
    let chunks: Vec<Result<Vec<PixelRender>>> = rays
        .par_chunks(PIXELS_PER_TASK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut depths = Vec::with_capacity(chunk.len() * opts.n_depth);
            for i in 0..chunk.len() {
                let idx = (ci * PIXELS_PER_TASK + i) as u64;
                depths.extend(pixel_depths(camera.near, camera.far, opts, idx)?);
            }
            let jobs: Vec<_> = chunk.iter().map(|r| (*r, camera.far, lighting)).collect();
            render_rays(field, &jobs, &depths, opts)
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn render_image(
    field: &dyn SceneField,
    lighting: &ShLighting,
    camera: &PinholeCamera,
    opts: &RenderOptions,
) -> Result<ImageBuffer> {
    let px = render_image_details(field, lighting, camera, opts)?;
    ImageBuffer::from_data(camera.width, camera.height, px.iter().flat_map(|p| p.color).collect())
}

/// Untaped rendering of a sampled batch; `lights[i]` lights image `i`.
pub fn render_batch(
    field: &dyn SceneField,
    batch: &SampledBatch,
    lights: &[ShLighting],
    mode: RenderMode,
    background: [f64; 3],
) -> Result<Vec<PixelRender>> {
    for r in &batch.rays {
        ensure!(r.image < lights.len(), "ray image {} has no lighting", r.image);
    }
    let jobs: Vec<_> = batch.rays.iter().map(|r| (r.ray, r.far, &lights[r.image])).collect();
    let opts = RenderOptions {
        n_depth: batch.n,
        mode,
        background,
        ..Default::default()
    };
    render_rays(field, &jobs, &batch.t, &opts)
}

// ---------------------------------------------------------------------------
// Taped rendering

/// Densities, albedos and (optionally) density gradients for a list of
/// points, recorded on a tape.
pub struct RecordedSamples {
    /// `(n, 1)`.
    pub sigma: Var,
    /// `(n, 3)`.
    pub albedo: Var,
    pub gradients: Option<Vec<Vec3>>,
}

/// A field that can record its queries for reverse-mode differentiation.
pub trait DifferentiableField {
    fn record(&self, tape: &mut Tape, points: &[Vec3], need_gradients: bool) -> Result<RecordedSamples>;
}

impl DifferentiableField for MlpFieldView<'_> {
    fn record(&self, tape: &mut Tape, points: &[Vec3], need_gradients: bool) -> Result<RecordedSamples> {
        let t = self.field.record(tape, self.store, points)?;
        let gradients = need_gradients.then(|| self.field.density_gradients_from_tape(tape, self.store, &t, points));
        Ok(RecordedSamples {
            sigma: t.sigma,
            albedo: t.albedo,
            gradients,
        })
    }
}

/// A ray with its depth range and lighting-table index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRay {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
    pub image: usize,
}

/// Rays with `n` sample depths each.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub rays: Vec<BatchRay>,
    pub n: usize,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl SampledBatch {
    pub fn stratified(rays: Vec<BatchRay>, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Vec::with_capacity(rays.len() * n);
        for r in &rays {
            t.extend(stratified_sample(r.near, r.far, n, rng)?);
        }
        Self::from_depths(rays, n, t)
    }

    pub fn from_depths(rays: Vec<BatchRay>, n: usize, t: Vec<f64>) -> Result<Self> {
        ensure!(n >= 2, "need at least 2 samples per ray");
        ensure!(t.len() == rays.len() * n, "depth list does not match ray count");
        let mut delta = Vec::with_capacity(t.len());
        for (r, ray) in rays.iter().enumerate() {
            delta.extend(deltas(&t[r * n..(r + 1) * n], ray.far));
        }
        Ok(Self { rays, n, t, delta })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.t
            .iter()
            .enumerate()
            .map(|(i, t)| self.rays[i / self.n].ray.at(*t))
            .collect()
    }
}

/// Output of [`render_batch_taped`].
pub struct TapedRender {
    /// `(rays, 3)` pixel colors.
    pub color: Var,
    /// Stop-gradient normals used for shading.
    pub normals: Vec<Vec3>,
}

/// Records rendering of a batch. `lights[i]` is the `(9, 3)` lighting
/// variable for image `i`. `normals_override` replaces the aggregated normals.
pub fn render_batch_taped(
    tape: &mut Tape,
    field: &dyn DifferentiableField,
    batch: &SampledBatch,
    lights: &[Var],
    mode: RenderMode,
    background: [f64; 3],
    normals_override: Option<&[Vec3]>,
) -> Result<TapedRender> {
    let points = batch.points();
    let need_grads = mode == RenderMode::Relit && normals_override.is_none();
    let rec = field.record(tape, &points, need_grads)?;
    let delta = Arc::new(batch.delta.clone());
    let w = ops::composite_weights(tape, rec.sigma, delta, batch.n);
    let a = ops::ray_weighted_sum(tape, w, rec.albedo, batch.n);
    let normals: Vec<Vec3> = match (normals_override, &rec.gradients) {
        (Some(n), _) => {
            ensure!(n.len() == batch.len(), "normal override length mismatch");
            n.to_vec()
        }
        (None, Some(g)) => {
            let wv = tape.value(w);
            batch
                .rays
                .iter()
                .enumerate()
                .map(|(r, br)| {
                    let range = r * batch.n..(r + 1) * batch.n;
                    aggregate_normal_from(&wv[range.clone()], &g[range], &br.ray.direction)
                })
                .collect()
        }
        (None, None) => batch.rays.iter().map(|r| -r.ray.direction).collect(),
    };
    let lit = match mode {
        RenderMode::Relit => {
            for r in &batch.rays {
                ensure!(r.image < lights.len(), "ray image {} has no lighting", r.image);
            }
            let basis: Vec<f64> = normals.iter().flat_map(sh_basis_unchecked).collect();
            debug_assert_eq!(basis.len(), batch.len() * SH_COUNT);
            let images = batch.rays.iter().map(|r| r.image).collect();
            ops::shade_sh(tape, a, lights, basis, images)
        }
        RenderMode::Lambertian => a,
    };
    let color = if background == [0.0; 3] {
        lit
    } else {
        let bg = ops::background(tape, w, background, batch.n);
        tape.add(lit, bg)
    };
    Ok(TapedRender { color, normals })
}
