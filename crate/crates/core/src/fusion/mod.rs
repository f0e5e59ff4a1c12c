//! Multi-view feature fusion into sparse voxel volumes.
//!
//! Each input view is encoded into a per-pixel feature map. A local volume
//! holds, for every voxel seen by a group of neighboring views, a learned
//! function of the mean and variance of the features sampled at the voxel's
//! projections. Local volumes are folded into a global volume one frame at a
//! time, and either volume is decoded into density and albedo.

mod ops;
mod taped;
mod volume;

use rayon::prelude::*;

use crate::diffcore::{Activation, Mlp, MlpSpec, ParamStore, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::field::SceneField;
use crate::imaging::{ImageBuffer, PinholeCamera, Vec3};

pub use ops::mean_var;
pub use taped::{record_fused, FusedRecord, TapedVolume, TapedVolumeField};
pub use volume::{FeatureVolume, Voxel, VoxelGrid, VOLUME_MAGIC};

pub const DEFAULT_FEATURE_WIDTH: usize = 8;
pub const DEFAULT_VOXEL_WIDTH: usize = 16;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_KAPPA: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Learned per-voxel gate between the global and local feature.
    Gated,
    /// Running mean weighted by visitation counts.
    CountAverage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// View feature width.
    pub feature_width: usize,
    /// Voxel feature width.
    pub voxel_width: usize,
    /// Hidden width of the aggregation, gate and decoder networks.
    pub hidden: usize,
    pub grid: VoxelGrid,
    pub kappa: usize,
    pub mode: FusionMode,
    /// Initial pre-softplus density bias of the decoder.
    pub density_bias: f64,
    pub seed: u64,
}

impl FusionConfig {
    pub fn new(grid: VoxelGrid) -> Self {
        Self {
            feature_width: DEFAULT_FEATURE_WIDTH,
            voxel_width: DEFAULT_VOXEL_WIDTH,
            hidden: 32,
            grid,
            kappa: DEFAULT_KAPPA,
            mode: FusionMode::Gated,
            density_bias: -2.0,
            seed: 0,
        }
    }

    pub fn to_meta(&self) -> Vec<f64> {
        let g = &self.grid;
        vec![
            self.feature_width as f64,
            self.voxel_width as f64,
            self.hidden as f64,
            g.min.x,
            g.min.y,
            g.min.z,
            g.max.x,
            g.max.y,
            g.max.z,
            g.resolution as f64,
            self.kappa as f64,
            match self.mode {
                FusionMode::Gated => 0.0,
                FusionMode::CountAverage => 1.0,
            },
            self.density_bias,
            self.seed as f64,
        ]
    }

    pub fn from_meta(v: &[f64]) -> Result<Self> {
        ensure!(v.len() == 14, "fusion meta needs 14 values, got {}", v.len());
        Ok(Self {
            feature_width: v[0] as usize,
            voxel_width: v[1] as usize,
            hidden: v[2] as usize,
            grid: VoxelGrid::new(Vec3::new(v[3], v[4], v[5]), Vec3::new(v[6], v[7], v[8]), v[9] as usize)?,
            kappa: v[10] as usize,
            mode: if v[11] == 0.0 { FusionMode::Gated } else { FusionMode::CountAverage },
            density_bias: v[12],
            seed: v[13] as u64,
        })
    }
}

/// Per-pixel features of one view, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ViewFeatureMap {
    pub fn get(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Bilinear taps `(pixel index, weight)` for the projection of `p`, or
/// `None` when `p` is behind the camera or projects outside the image.
/// Taps nearer than half a pixel to the border replicate the edge pixel.
pub fn projection_taps(camera: &PinholeCamera, p: &Vec3) -> Option<[(usize, f64); 4]> {
    let (u, v, _) = camera.project(p)?;
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
        return None;
    }
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (ax, ay) = (fx - x0, fy - y0);
    let clamp_x = |x: f64| x.clamp(0.0, w - 1.0) as usize;
    let clamp_y = |y: f64| y.clamp(0.0, h - 1.0) as usize;
    let (xa, xb, ya, yb) = (clamp_x(x0), clamp_x(x0 + 1.0), clamp_y(y0), clamp_y(y0 + 1.0));
    let wd = camera.width;
    Some([
        (ya * wd + xa, (1.0 - ax) * (1.0 - ay)),
        (ya * wd + xb, ax * (1.0 - ay)),
        (yb * wd + xa, (1.0 - ax) * ay),
        (yb * wd + xb, ax * ay),
    ])
}

/// Bilinear feature at the projection of `voxel_center`.
pub fn sample_voxel_feature(view: &ViewFeatureMap, camera: &PinholeCamera, voxel_center: &Vec3) -> Option<Vec<f64>> {
    let taps = projection_taps(camera, voxel_center)?;
    let c = view.channels;
    let mut out = vec![0.0; c];
    for (idx, w) in taps {
        if w == 0.0 {
            continue;
        }
        out.iter_mut()
            .zip(&view.data[idx * c..(idx + 1) * c])
            .for_each(|(o, f)| *o += w * f);
    }
    Some(out)
}

/// The networks of the fusion pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNets {
    config: FusionConfig,
    conv0: Mlp,
    conv1: Mlp,
    aggregate: Mlp,
    gate: Mlp,
    decoder: Mlp,
}

impl FusionNets {
    fn specs(c: &FusionConfig) -> Result<[MlpSpec; 5]> {
        ensure!(c.feature_width >= 1 && c.voxel_width >= 1 && c.hidden >= 1, "fusion widths must be positive");
        ensure!(c.kappa >= 1, "kappa must be at least 1");
        let (f, v, h, s) = (c.feature_width, c.voxel_width, c.hidden, c.seed);
        Ok([
            MlpSpec::uniform(27, vec![], f, Activation::Relu, Activation::Relu, s.wrapping_add(10)),
            MlpSpec::uniform(9 * f, vec![], f, Activation::None, Activation::None, s.wrapping_add(11)),
            MlpSpec::uniform(2 * f, vec![h], v, Activation::Relu, Activation::None, s.wrapping_add(12)),
            MlpSpec::uniform(2 * v, vec![h], v, Activation::Relu, Activation::Sigmoid, s.wrapping_add(13)),
            MlpSpec::uniform(v, vec![h], 4, Activation::Relu, Activation::None, s.wrapping_add(14)),
        ])
    }

    const NAMES: [&'static str; 5] = ["encoder0", "encoder1", "aggregate", "gate", "decoder"];

    pub fn register(config: FusionConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let specs = Self::specs(&config)?;
        let mut nets = Vec::new();
        for (spec, name) in specs.into_iter().zip(Self::NAMES) {
            nets.push(Mlp::register(spec, store, &format!("{prefix}/{name}"))?);
        }
        let decoder = nets.pop().unwrap();
        let last = decoder.spec().layer_dims().len() - 1;
        store.get_mut(decoder.bias(last)).values_mut()[0] = config.density_bias;
        let [conv0, conv1, aggregate, gate]: [Mlp; 4] = nets.try_into().unwrap();
        Ok(Self {
            config,
            conv0,
            conv1,
            aggregate,
            gate,
            decoder,
        })
    }

    pub fn attach(config: FusionConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let specs = Self::specs(&config)?;
        let mut nets = Vec::new();
        for (spec, name) in specs.into_iter().zip(Self::NAMES) {
            nets.push(Mlp::attach(spec, store, &format!("{prefix}/{name}"))?);
        }
        let [conv0, conv1, aggregate, gate, decoder]: [Mlp; 5] = nets.try_into().unwrap();
        Ok(Self {
            config,
            conv0,
            conv1,
            aggregate,
            gate,
            decoder,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn empty_volume(&self) -> FeatureVolume {
        FeatureVolume::empty(self.config.grid, self.config.voxel_width)
    }

    pub fn encoder_layers(&self) -> [&Mlp; 2] {
        [&self.conv0, &self.conv1]
    }

    pub fn aggregate_net(&self) -> &Mlp {
        &self.aggregate
    }

    pub fn gate_net(&self) -> &Mlp {
        &self.gate
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Two 3x3 filters with a ReLU between them, RGB to `feature_width`.
    pub fn encode_view(&self, store: &ParamStore, image: &ImageBuffer) -> Result<ViewFeatureMap> {
        let (w, h) = (image.width(), image.height());
        let c0 = ops::im2col(image.data(), w, h, 3);
        let h0 = self.conv0.eval(store, &c0, w * h)?;
        let c1 = ops::im2col(&h0, w, h, self.config.feature_width);
        let data = self.conv1.eval(store, &c1, w * h)?;
        Ok(ViewFeatureMap {
            width: w,
            height: h,
            channels: self.config.feature_width,
            data,
        })
    }

    /// Taped [`FusionNets::encode_view`]: a `(h w, feature_width)` variable.
    pub fn encode_view_taped(&self, tape: &mut Tape, store: &ParamStore, image: &ImageBuffer) -> Result<Var> {
        let (w, h) = (image.width(), image.height());
        let x = tape.constant(w * h, 3, image.data().to_vec());
        let c0 = ops::im2col_taped(tape, x, w, h);
        let h0 = self.conv0.forward(tape, store, c0)?;
        let c1 = ops::im2col_taped(tape, h0, w, h);
        self.conv1.forward(tape, store, c1)
    }

    /// Aggregation network applied to `[mean, var]` of each voxel's sample list.
    pub fn aggregate_mean_var(&self, store: &ParamStore, lists: &[Vec<&[f64]>]) -> Result<Vec<f64>> {
        let f = self.config.feature_width;
        let mut stats = Vec::with_capacity(lists.len() * 2 * f);
        for list in lists {
            ensure!(!list.is_empty(), "aggregation needs at least one visible view");
            ensure!(list.iter().all(|s| s.len() == f), "feature width mismatch in aggregation");
            let (m, v) = mean_var(list);
            stats.extend(m);
            stats.extend(v);
        }
        self.aggregate.eval(store, &stats, lists.len())
    }

    /// Local volume from a group of encoded views: every voxel whose center
    /// projects into at least one view.
    pub fn build_local_volume(&self, store: &ParamStore, views: &[(&ViewFeatureMap, &PinholeCamera)]) -> Result<FeatureVolume> {
        ensure!(!views.is_empty(), "local volume needs at least one view");
        for (v, cam) in views {
            ensure!(
                v.width == cam.width && v.height == cam.height && v.channels == self.config.feature_width,
                "feature map does not match its camera"
            );
        }
        let grid = self.config.grid;
        const CHUNK: usize = 4096;
        let n = grid.voxel_count();
        let chunks: Vec<Result<Vec<(usize, Vec<f64>)>>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut indices = Vec::new();
                let mut samples: Vec<Vec<Vec<f64>>> = Vec::new();
                for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let center = grid.voxel_center(idx);
                    let list: Vec<Vec<f64>> = views
                        .iter()
                        .filter_map(|(v, cam)| sample_voxel_feature(v, cam, &center))
                        .collect();
                    if !list.is_empty() {
                        indices.push(idx);
                        samples.push(list);
                    }
                }
                if indices.is_empty() {
                    return Ok(Vec::new());
                }
                let lists: Vec<Vec<&[f64]>> = samples.iter().map(|l| l.iter().map(|s| s.as_slice()).collect()).collect();
                let feats = self.aggregate_mean_var(store, &lists)?;
                let vw = self.config.voxel_width;
                Ok(indices
                    .into_iter()
                    .enumerate()
                    .map(|(i, idx)| (idx, feats[i * vw..(i + 1) * vw].to_vec()))
                    .collect())
            })
            .collect();
        let mut vol = self.empty_volume();
        for c in chunks {
            for (idx, f) in c? {
                vol.insert(idx, f, 1)?;
            }
        }
        Ok(vol)
    }

    /// Per-voxel blend coefficients `c` with `v' = v_g + c (v_t - v_g)`.
    pub(crate) fn blend_coefficients(&self, store: &ParamStore, pairs: &[(&Voxel, &[f64])]) -> Result<Vec<f64>> {
        let vw = self.config.voxel_width;
        match self.config.mode {
            FusionMode::CountAverage => Ok(pairs
                .iter()
                .flat_map(|(g, _)| std::iter::repeat_n(1.0 / (g.count as f64 + 1.0), vw))
                .collect()),
            FusionMode::Gated => {
                let mut x = Vec::with_capacity(pairs.len() * 2 * vw);
                for (g, t) in pairs {
                    x.extend_from_slice(&g.feature);
                    x.extend_from_slice(t);
                }
                self.gate.eval(store, &x, pairs.len())
            }
        }
    }

    /// Folds `local` into `global`. Voxels new to `global` are copied,
    /// voxels absent from `local` are untouched, counts are incremented.
    pub fn fuse_global(&self, store: &ParamStore, global: &FeatureVolume, local: &FeatureVolume) -> Result<FeatureVolume> {
        if !global.same_grid(local) {
            return Err(Error::shape("global and local volumes use different grids".to_string()));
        }
        let mut out = global.clone();
        let mut shared = Vec::new();
        for (idx, lv) in local.iter() {
            match global.get(idx) {
                Some(gv) => shared.push((idx, gv, lv.feature.as_slice())),
                None => out.insert(idx, lv.feature.clone(), 1)?,
            }
        }
        let pairs: Vec<(&Voxel, &[f64])> = shared.iter().map(|(_, g, t)| (*g, *t)).collect();
        let coeff = self.blend_coefficients(store, &pairs)?;
        let vw = self.config.voxel_width;
        for (k, (idx, gv, t)) in shared.iter().enumerate() {
            let c = &coeff[k * vw..(k + 1) * vw];
            let f = (0..vw).map(|i| blend(gv.feature[i], t[i], c[i])).collect();
            out.insert(*idx, f, gv.count + 1)?;
        }
        Ok(out)
    }

    /// `(sigma, albedo)` from decoder outputs.
    fn split_decoded(raw: &[f64]) -> (f64, [f64; 3]) {
        (
            Activation::Softplus.apply(raw[0]),
            [
                Activation::Sigmoid.apply(raw[1]),
                Activation::Sigmoid.apply(raw[2]),
                Activation::Sigmoid.apply(raw[3]),
            ],
        )
    }

    /// Decoded density and albedo at `points`. Outside the grid bounds the
    /// result is `(0, [0.5; 3])`.
    pub fn decode(&self, store: &ParamStore, volume: &FeatureVolume, points: &[Vec3]) -> Result<Vec<(f64, [f64; 3])>> {
        let vw = volume.width();
        ensure!(vw == self.config.voxel_width, "volume width does not match decoder");
        let mut inside = Vec::new();
        let mut feats = Vec::new();
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("query point {p:?}")));
            }
            if let Some(f) = volume.interpolate(p) {
                inside.push(i);
                feats.extend(f);
            }
        }
        let raw = self.decoder.eval(store, &feats, inside.len())?;
        let mut out = vec![(0.0, [0.5; 3]); points.len()];
        for (k, i) in inside.into_iter().enumerate() {
            out[i] = Self::split_decoded(&raw[k * 4..(k + 1) * 4]);
        }
        Ok(out)
    }

    /// The `kappa` cameras nearest to camera `t` (including `t`), ordered
    /// by distance then index.
    pub fn neighbor_group(&self, cameras: &[PinholeCamera], t: usize) -> Vec<usize> {
        neighbor_group(cameras, t, self.config.kappa)
    }
}

pub(crate) fn blend(g: f64, t: f64, c: f64) -> f64 {
    g + c * (t - g)
}

/// Indices of the `kappa` camera centers closest to camera `t`.
pub fn neighbor_group(cameras: &[PinholeCamera], t: usize, kappa: usize) -> Vec<usize> {
    let c = cameras[t].center();
    let mut order: Vec<(f64, usize)> = cameras.iter().enumerate().map(|(i, cam)| ((cam.center() - c).norm(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(kappa.max(1)).map(|(_, i)| i).collect()
}

/// A feature volume decoded by the fusion decoder.
#[derive(Clone, Debug)]
pub struct VolumeField {
    pub volume: FeatureVolume,
    pub nets: FusionNets,
}

impl VolumeField {
    pub fn view<'a>(&'a self, store: &'a ParamStore) -> VolumeFieldView<'a> {
        VolumeFieldView {
            volume: &self.volume,
            nets: &self.nets,
            store,
        }
    }
}

#[derive(Clone, Copy)]
pub struct VolumeFieldView<'a> {
    pub volume: &'a FeatureVolume,
    pub nets: &'a FusionNets,
    pub store: &'a ParamStore,
}

impl SceneField for VolumeFieldView<'_> {
    fn query(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        self.nets.decode(self.store, self.volume, points).expect("finite query points")
    }

    fn gradient_step(&self) -> f64 {
        1e-4 * self.volume.grid().extent()
    }
}

#[cfg(test)]
mod tests;
