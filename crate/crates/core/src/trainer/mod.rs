//! The joint optimization loop: ray batching, the rendering loss, Adam
//! steps over the field, the per-image lighting table and the fusion
//! networks, and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{AdamState, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, DEFAULT_LR};
use crate::error::{ensure, Error, Result};
use crate::field::{MlpField, MlpFieldConfig, RadianceField, ShLighting};
use crate::fusion::{neighbor_group, record_fused, FeatureVolume, FusionConfig, FusionNets, VolumeField, VoxelGrid};
use crate::imaging::{Dataset, Vec3};
use crate::renderer::{render_batch, render_batch_taped, BatchRay, RenderMode, SampledBatch};

#[cfg(test)]
mod tests;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    MlpOnly,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Rays per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_depth: usize,
    pub mode: TrainMode,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_interval: u64,
    pub field: MlpFieldConfig,
    /// Fusion settings; the grid doubles as the scene bounds.
    pub fusion: FusionConfig,
    pub background: [f64; 3],
    /// Rays per independently differentiated chunk (mlp-only mode).
    pub chunk_rays: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, bounds_min: Vec3, bounds_max: Vec3) -> Result<Self> {
        let grid = VoxelGrid::new(bounds_min, bounds_max, crate::fusion::DEFAULT_RESOLUTION)?;
        let half = 0.5 * grid.extent();
        Ok(Self {
            steps: 20_000,
            batch_size: 128,
            lr: DEFAULT_LR,
            seed: 0,
            n_depth: crate::renderer::DEFAULT_N_DEPTH,
            mode,
            checkpoint_interval: 0,
            field: MlpFieldConfig {
                scale: half,
                ..Default::default()
            },
            fusion: FusionConfig::new(grid),
            background: [0.0; 3],
            chunk_rays: 32,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.n_depth >= 2, "n_depth must be at least 2");
        ensure!(self.chunk_rays >= 1, "chunk size must be at least 1");
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be finite and non-negative");
        Ok(())
    }
}

/// Rendering loss: batch mean of the squared color error of the local
/// render plus, when given, that of the global render.
pub fn loss_nerfcc(local: &[[f64; 3]], global: Option<&[[f64; 3]]>, gt: &[[f64; 3]]) -> Result<f64> {
    ensure!(local.len() == gt.len(), "{} local pixels for {} targets", local.len(), gt.len());
    ensure!(!gt.is_empty(), "loss needs at least one pixel");
    let term = |px: &[[f64; 3]]| -> f64 {
        px.iter()
            .zip(gt)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / gt.len() as f64
    };
    let mut l = term(local);
    if let Some(g) = global {
        ensure!(g.len() == gt.len(), "{} global pixels for {} targets", g.len(), gt.len());
        l += term(g);
    }
    Ok(l)
}

/// `scale * sum ||pred - gt||^2` on the tape.
fn squared_error(tape: &mut Tape, pred: Var, gt: &[[f64; 3]], scale: f64) -> Var {
    let t = tape.constant(gt.len(), 3, gt.iter().flatten().copied().collect());
    let d = tape.sub(pred, t);
    let sq = tape.mul(d, d);
    let s = tape.sum(sq);
    tape.affine(s, scale, 0.0)
}

/// Rays drawn for one step with their target colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatchSample {
    pub rays: Vec<BatchRay>,
    pub gt: Vec<[f64; 3]>,
    /// `(image, x, y)` of each ray.
    pub pixels: Vec<(usize, usize, usize)>,
}

fn pixel_sample(dataset: &Dataset, image: usize, x: usize, y: usize) -> Result<(BatchRay, [f64; 3])> {
    let cam = &dataset.cameras[image];
    Ok((
        BatchRay {
            ray: cam.generate_ray(x, y)?,
            near: cam.near,
            far: cam.far,
            image,
        },
        dataset.images[image].get(x, y),
    ))
}

fn collect(dataset: &Dataset, pixels: Vec<(usize, usize, usize)>) -> Result<RayBatchSample> {
    let mut rays = Vec::with_capacity(pixels.len());
    let mut gt = Vec::with_capacity(pixels.len());
    for &(i, x, y) in &pixels {
        let (r, c) = pixel_sample(dataset, i, x, y)?;
        rays.push(r);
        gt.push(c);
    }
    Ok(RayBatchSample { rays, gt, pixels })
}

/// Uniform draws over every `(image, pixel)` pair of the dataset.
pub fn sample_ray_batch(dataset: &Dataset, rng: &mut impl Rng, batch_size: usize) -> Result<RayBatchSample> {
    ensure!(!dataset.is_empty(), "dataset has no images");
    let sizes: Vec<usize> = dataset.images.iter().map(|i| i.pixel_count()).collect();
    let total: usize = sizes.iter().sum();
    ensure!(total > 0, "dataset has no pixels");
    let mut pixels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut k = rng.gen_range(0..total);
        let mut img = 0;
        while k >= sizes[img] {
            k -= sizes[img];
            img += 1;
        }
        let w = dataset.images[img].width();
        pixels.push((img, k % w, k / w));
    }
    collect(dataset, pixels)
}

/// Uniform draws over the pixels of one image.
pub fn sample_image_batch(dataset: &Dataset, image: usize, rng: &mut impl Rng, batch_size: usize) -> Result<RayBatchSample> {
    ensure!(image < dataset.len(), "image index {image} out of range");
    let img = &dataset.images[image];
    ensure!(img.pixel_count() > 0, "image {image} has no pixels");
    let pixels = (0..batch_size)
        .map(|_| {
            let k = rng.gen_range(0..img.pixel_count());
            (image, k % img.width(), k / img.width())
        })
        .collect();
    collect(dataset, pixels)
}

/// Random stream for a given step; resuming from a checkpoint replays the
/// same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One step's rays, depths and targets. `frame` is the fused-mode frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub frame: Option<usize>,
    pub rays: SampledBatch,
    pub gt: Vec<[f64; 3]>,
    pub pixels: Vec<(usize, usize, usize)>,
}

/// Shading normals fixed in advance, for gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNormals {
    pub local: Vec<Vec3>,
    pub global: Option<Vec<Vec3>>,
}

/// A recorded loss with its parts.
pub struct StepLoss {
    pub tape: Tape,
    pub loss: Var,
    pub local: f64,
    pub global: f64,
    pub normals: FrozenNormals,
    /// Fused mode: the global volume after this frame's fusion.
    pub next_global: Option<FeatureVolume>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub local: f64,
    pub global: f64,
    pub wall_seconds: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.local + self.global
    }
}

/// Everything the optimizer updates, plus bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState,
    pub field: Option<MlpField>,
    pub fusion: Option<FusionNets>,
    /// Fused mode global volume.
    pub global: Option<FeatureVolume>,
    pub lighting_ids: Vec<ParamId>,
    pub step: u64,
    pub history: Vec<LossRecord>,
}

const FIELD_PREFIX: &str = "field";
const FUSION_PREFIX: &str = "fusion";

pub fn lighting_name(i: usize) -> String {
    format!("lighting/{i}")
}

impl TrainState {
    /// Fresh parameters for a dataset of `n_images`. Lighting starts at the
    /// DC-only table that leaves albedo unchanged.
    pub fn new(config: TrainConfig, n_images: usize) -> Result<Self> {
        Self::with_lightings(config, &vec![None; n_images])
    }

    /// Like [`TrainState::new`], starting each image's lighting from the
    /// known value where one is given.
    pub fn with_lightings(config: TrainConfig, initial: &[Option<ShLighting>]) -> Result<Self> {
        let n_images = initial.len();
        config.validate()?;
        ensure!(n_images >= 1, "training needs at least one image");
        let mut store = ParamStore::new();
        let (field, fusion, global) = match config.mode {
            TrainMode::MlpOnly => (Some(MlpField::register(config.field.clone(), &mut store, FIELD_PREFIX)?), None, None),
            TrainMode::Fused => {
                let nets = FusionNets::register(config.fusion.clone(), &mut store, FUSION_PREFIX)?;
                let g = nets.empty_volume();
                (None, Some(nets), Some(g))
            }
        };
        let dc = ShLighting::dc_cancel();
        let lighting_ids = (0..n_images)
            .map(|i| {
                let l = initial[i].as_ref().unwrap_or(&dc);
                store.insert(lighting_name(i), Tensor::new(vec![9, 3], l.as_slice().to_vec()).expect("9x3"))
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(&store, config.lr);
        Ok(Self {
            config,
            store,
            adam,
            field,
            fusion,
            global,
            lighting_ids,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn lighting(&self, i: usize) -> ShLighting {
        ShLighting::from_slice(self.store.get(self.lighting_ids[i]).values()).expect("9x3 lighting")
    }

    pub fn lighting_table(&self) -> Vec<ShLighting> {
        (0..self.lighting_ids.len()).map(|i| self.lighting(i)).collect()
    }

    /// The trained scene: the MLP field, or the global volume with its decoder.
    pub fn radiance_field(&self) -> RadianceField {
        match (&self.field, &self.fusion, &self.global) {
            (Some(f), _, _) => RadianceField::Mlp(f.clone()),
            (None, Some(n), Some(g)) => RadianceField::Volume(VolumeField {
                volume: g.clone(),
                nets: n.clone(),
            }),
            _ => unreachable!("state holds a field or a fusion pipeline"),
        }
    }

    /// The rays, depths and targets step `step` trains on.
    pub fn sample_step_batch(&self, dataset: &Dataset, step: u64) -> Result<StepBatch> {
        ensure!(dataset.len() == self.lighting_ids.len(), "dataset has {} images, state has {}", dataset.len(), self.lighting_ids.len());
        let mut rng = step_rng(self.config.seed, step);
        let (frame, sample) = match self.config.mode {
            TrainMode::MlpOnly => (None, sample_ray_batch(dataset, &mut rng, self.config.batch_size)?),
            TrainMode::Fused => {
                let t = rng.gen_range(0..dataset.len());
                (Some(t), sample_image_batch(dataset, t, &mut rng, self.config.batch_size)?)
            }
        };
        let rays = SampledBatch::stratified(sample.rays, self.config.n_depth, &mut rng)?;
        Ok(StepBatch {
            frame,
            rays,
            gt: sample.gt,
            pixels: sample.pixels,
        })
    }

    fn light_vars(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        self.lighting_ids.iter().map(|id| tape.param(store, *id)).collect()
    }

    /// Records the loss of `batch` on a fresh tape using parameter values
    /// from `store`. Each term is `scale * sum` of squared errors.
    fn record_scaled(
        &self,
        store: &ParamStore,
        dataset: &Dataset,
        batch: &StepBatch,
        normals: Option<&FrozenNormals>,
        scale: f64,
    ) -> Result<StepLoss> {
        let mut tape = Tape::new();
        let lights = self.light_vars(&mut tape, store);
        let bg = self.config.background;
        match self.config.mode {
            TrainMode::MlpOnly => {
                let field = self.field.as_ref().expect("mlp field");
                let view = field.view(store);
                let out = render_batch_taped(&mut tape, &view, &batch.rays, &lights, RenderMode::Relit, bg, normals.map(|n| n.local.as_slice()))?;
                let loss = squared_error(&mut tape, out.color, &batch.gt, scale);
                let local = tape.scalar(loss);
                Ok(StepLoss {
                    tape,
                    loss,
                    local,
                    global: 0.0,
                    normals: FrozenNormals {
                        local: out.normals,
                        global: None,
                    },
                    next_global: None,
                })
            }
            TrainMode::Fused => {
                let nets = self.fusion.as_ref().expect("fusion nets");
                let frame = batch.frame.ok_or_else(|| Error::invalid("fused batches need a frame"))?;
                let group = neighbor_group(&dataset.cameras, frame, nets.config().kappa);
                let images: Vec<_> = group.iter().map(|i| &dataset.images[*i]).collect();
                let cams: Vec<_> = group.iter().map(|i| &dataset.cameras[*i]).collect();
                let prev = self.global.as_ref().expect("global volume");
                let points = batch.rays.points();
                let rec = record_fused(&mut tape, store, nets, &images, &cams, prev, &points)?;
                let lf = rec.local.bind(nets, store);
                let gf = rec.global.bind(nets, store);
                let lo = render_batch_taped(&mut tape, &lf, &batch.rays, &lights, RenderMode::Relit, bg, normals.map(|n| n.local.as_slice()))?;
                let go = render_batch_taped(
                    &mut tape,
                    &gf,
                    &batch.rays,
                    &lights,
                    RenderMode::Relit,
                    bg,
                    normals.and_then(|n| n.global.as_deref()),
                )?;
                let ll = squared_error(&mut tape, lo.color, &batch.gt, scale);
                let gl = squared_error(&mut tape, go.color, &batch.gt, scale);
                let loss = tape.add(ll, gl);
                let (local, global) = (tape.scalar(ll), tape.scalar(gl));
                Ok(StepLoss {
                    tape,
                    loss,
                    local,
                    global,
                    normals: FrozenNormals {
                        local: lo.normals,
                        global: Some(go.normals),
                    },
                    next_global: Some(rec.global.volume),
                })
            }
        }
    }

    /// Records the batch-mean loss of `batch` on one tape.
    pub fn record_loss(&self, store: &ParamStore, dataset: &Dataset, batch: &StepBatch, normals: Option<&FrozenNormals>) -> Result<StepLoss> {
        self.record_scaled(store, dataset, batch, normals, 1.0 / batch.gt.len() as f64)
    }

    /// Loss and parameter gradients of a batch. In mlp-only mode rays are
    /// split into fixed chunks differentiated in parallel and summed in
    /// chunk order, so results do not depend on the thread count.
    fn loss_and_grads(&self, dataset: &Dataset, batch: &StepBatch) -> Result<(f64, f64, Vec<(ParamId, Vec<f64>)>, Option<FeatureVolume>)> {
        let scale = 1.0 / batch.gt.len() as f64;
        if self.config.mode == TrainMode::Fused {
            let l = self.record_scaled(&self.store, dataset, batch, None, scale)?;
            let grads = l.tape.backward(l.loss)?.param_grads();
            return Ok((l.local, l.global, grads, l.next_global));
        }
        let c = self.config.chunk_rays;
        let n = self.config.n_depth;
        let chunks: Vec<StepBatch> = (0..batch.gt.len().div_ceil(c))
            .map(|k| {
                let r = k * c..((k + 1) * c).min(batch.gt.len());
                Ok(StepBatch {
                    frame: None,
                    rays: SampledBatch::from_depths(batch.rays.rays[r.clone()].to_vec(), n, batch.rays.t[r.start * n..r.end * n].to_vec())?,
                    gt: batch.gt[r.clone()].to_vec(),
                    pixels: batch.pixels[r].to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        let parts: Vec<Result<(f64, Vec<(ParamId, Vec<f64>)>)>> = chunks
            .par_iter()
            .map(|b| {
                let l = self.record_scaled(&self.store, dataset, b, None, scale)?;
                let grads = l.tape.backward(l.loss)?.param_grads();
                Ok((l.local, grads))
            })
            .collect();
        let mut local = 0.0;
        let mut total: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for p in parts {
            let (l, grads) = p?;
            local += l;
            for (id, g) in grads {
                match total.iter_mut().find(|(i, _)| *i == id) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => total.push((id, g)),
                }
            }
        }
        Ok((local, 0.0, total, None))
    }

    fn numeric_context(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step)),
            other => other,
        }
    }

    /// One optimizer step on the batch for the current step. Returns the
    /// loss before the update.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossRecord> {
        let batch = self.sample_step_batch(dataset, self.step)?;
        let (local, global, grads, next_global) = self.loss_and_grads(dataset, &batch).map_err(|e| self.numeric_context(e))?;
        if !local.is_finite() || !global.is_finite() {
            return Err(Error::NonFinite(format!("step {}: loss is {}", self.step, local + global)));
        }
        for (id, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("step {}: gradient of {}", self.step, self.store.name(*id))));
            }
        }
        self.store.accumulate(&grads)?;
        self.adam.step(&mut self.store)?;
        self.store.check_finite().map_err(|e| self.numeric_context(e))?;
        if let Some(g) = next_global {
            self.global = Some(g);
        }
        let rec = LossRecord {
            step: self.step,
            local,
            global,
            wall_seconds: 0.0,
        };
        self.step += 1;
        Ok(rec)
    }

    /// Untaped `(local, global)` loss of a batch under the current state.
    /// The global volume is not modified.
    pub fn evaluate(&self, dataset: &Dataset, batch: &StepBatch) -> Result<(f64, f64)> {
        let lights = self.lighting_table();
        let bg = self.config.background;
        let colors = |px: Vec<crate::renderer::PixelRender>| px.into_iter().map(|p| p.color).collect::<Vec<_>>();
        match self.config.mode {
            TrainMode::MlpOnly => {
                let f = self.field.as_ref().expect("mlp field");
                let px = colors(render_batch(&f.view(&self.store), &batch.rays, &lights, RenderMode::Relit, bg)?);
                Ok((loss_nerfcc(&px, None, &batch.gt)?, 0.0))
            }
            TrainMode::Fused => {
                let nets = self.fusion.as_ref().expect("fusion nets");
                let frame = batch.frame.ok_or_else(|| Error::invalid("fused batches need a frame"))?;
                let group = neighbor_group(&dataset.cameras, frame, nets.config().kappa);
                let maps = group
                    .iter()
                    .map(|i| nets.encode_view(&self.store, &dataset.images[*i]))
                    .collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = maps.iter().zip(&group).map(|(m, i)| (m, &dataset.cameras[*i])).collect();
                let local = nets.build_local_volume(&self.store, &views)?;
                let global = nets.fuse_global(&self.store, self.global.as_ref().expect("global"), &local)?;
                let render = |v: &FeatureVolume| -> Result<Vec<[f64; 3]>> {
                    let field = crate::fusion::VolumeFieldView {
                        volume: v,
                        nets,
                        store: &self.store,
                    };
                    Ok(colors(render_batch(&field, &batch.rays, &lights, RenderMode::Relit, bg)?))
                };
                let lp = render(&local)?;
                let gp = render(&global)?;
                Ok((loss_nerfcc(&lp, None, &batch.gt)?, loss_nerfcc(&gp, None, &batch.gt)?))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let mode = match self.config.mode {
            TrainMode::MlpOnly => 0.0,
            TrainMode::Fused => 1.0,
        };
        let cfg = &self.config;
        let train = vec![
            mode,
            self.lighting_ids.len() as f64,
            cfg.n_depth as f64,
            cfg.background[0],
            cfg.background[1],
            cfg.background[2],
            cfg.seed as f64,
            cfg.batch_size as f64,
            cfg.lr,
            cfg.chunk_rays as f64,
            self.step as f64,
        ];
        c.push("meta/train", Tensor::new(vec![train.len()], train).expect("meta"));
        if let Some(f) = &self.field {
            f.push_meta(&mut c, FIELD_PREFIX);
        }
        let fm = cfg.fusion.to_meta();
        c.push("meta/fusion", Tensor::new(vec![fm.len()], fm).expect("meta"));
        c.push_store(&self.store);
        c.push_adam(&self.store, &self.adam);
        if let Some(g) = &self.global {
            push_volume(&mut c, "state/global", g);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let t = ckpt.require("meta/train")?.values();
        ensure!(t.len() == 11, "meta/train needs 11 values");
        let mode = if t[0] == 0.0 { TrainMode::MlpOnly } else { TrainMode::Fused };
        let fusion = FusionConfig::from_meta(ckpt.require("meta/fusion")?.values())?;
        let field_cfg = match mode {
            TrainMode::MlpOnly => MlpField::config_from_checkpoint(ckpt, FIELD_PREFIX)?,
            TrainMode::Fused => MlpFieldConfig::default(),
        };
        let config = TrainConfig {
            steps: 0,
            batch_size: t[7] as usize,
            lr: t[8],
            seed: t[6] as u64,
            n_depth: t[2] as usize,
            mode,
            checkpoint_interval: 0,
            field: field_cfg,
            fusion,
            background: [t[3], t[4], t[5]],
            chunk_rays: t[9] as usize,
        };
        let mut state = Self::new(config, t[1] as usize)?;
        ckpt.restore_store(&mut state.store)?;
        state.adam = ckpt.restore_adam(&state.store)?;
        state.step = t[10] as u64;
        if mode == TrainMode::Fused {
            state.global = Some(read_volume(ckpt, "state/global", state.config.fusion.grid, state.config.fusion.voxel_width)?);
        }
        Ok(state)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn push_volume(c: &mut Checkpoint, prefix: &str, v: &FeatureVolume) {
    let idx: Vec<f64> = v.iter().map(|(i, _)| i as f64).collect();
    let counts: Vec<f64> = v.iter().map(|(_, x)| x.count as f64).collect();
    let feats: Vec<f64> = v.iter().flat_map(|(_, x)| x.feature.iter().copied()).collect();
    let n = idx.len();
    c.push(format!("{prefix}/index"), Tensor::new(vec![n], idx).expect("len"));
    c.push(format!("{prefix}/count"), Tensor::new(vec![n], counts).expect("len"));
    c.push(format!("{prefix}/feature"), Tensor::new(vec![n, v.width()], feats).expect("len"));
}

fn read_volume(c: &Checkpoint, prefix: &str, grid: VoxelGrid, width: usize) -> Result<FeatureVolume> {
    let idx = c.require(&format!("{prefix}/index"))?.values();
    let counts = c.require(&format!("{prefix}/count"))?.values();
    let feats = c.require(&format!("{prefix}/feature"))?.values();
    ensure!(counts.len() == idx.len() && feats.len() == idx.len() * width, "inconsistent volume tensors in checkpoint");
    let mut v = FeatureVolume::empty(grid, width);
    for (k, i) in idx.iter().enumerate() {
        v.insert(*i as usize, feats[k * width..(k + 1) * width].to_vec(), counts[k] as u32)?;
    }
    Ok(v)
}

/// Checkpoint file written at `step` inside `dir`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.nfcc"))
}

/// Final checkpoint name inside an output directory.
pub const FINAL_CHECKPOINT: &str = "checkpoint.nfcc";

/// Runs `config.steps` optimizer steps. With `out_dir`, writes `loss.csv`
/// (step, loss_local, loss_global, wall_seconds), periodic checkpoints and
/// a final `checkpoint.nfcc`. `on_step` sees every loss record.
pub fn train(
    dataset: &Dataset,
    config: TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&TrainState, &LossRecord),
) -> Result<TrainState> {
    let steps = config.steps;
    let interval = config.checkpoint_interval;
    let mut state = TrainState::with_lightings(config, &dataset.lightings)?;
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "step,loss_local,loss_global,wall_seconds").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let start = Instant::now();
    for _ in 0..steps {
        let mut rec = state.train_step(dataset)?;
        rec.wall_seconds = start.elapsed().as_secs_f64();
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{:e},{:e},{:.3}", rec.step, rec.local, rec.global, rec.wall_seconds).map_err(|e| Error::io(&*path, e))?;
        }
        state.history.push(rec);
        on_step(&state, &rec);
        if let Some(dir) = out_dir {
            if interval > 0 && state.step % interval == 0 && state.step < steps {
                state.save_checkpoint(checkpoint_path(dir, state.step))?;
            }
        }
    }
    if let Some((mut w, path)) = csv {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        state.save_checkpoint(dir.join(FINAL_CHECKPOINT))?;
        if let Some(g) = &state.global {
            g.save(dir.join("global.nfccvol"))?;
        }
    }
    Ok(state)
}
