//! Library side of the command line: each `cmd_*` function does the work of
//! one subcommand and writes its outputs into a directory.
//!
//! Correction works by relighting. The trained model separates each view's
//! albedo from its own lighting, so re-rendering every input view under one
//! shared reference lighting yields a color-consistent set.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{ensure, Error, Result};
use crate::field::{MlpFieldConfig, ShLighting};
use crate::fusion::VoxelGrid;
use crate::imaging::{save_image, synthesize, Dataset, DatasetManifest, ImageBuffer, ManifestImage, PinholeCamera, SynthSpec, Vec3};
use crate::metrics::{baseline_gain_bias, format_csv, format_table, MetricReport, DEFAULT_BINS};
use crate::renderer::{render_image, RenderMode, RenderOptions};
use crate::trainer::{train, TrainConfig, TrainMode, TrainState, FINAL_CHECKPOINT};


/// Where a rendering lighting comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum LightingSource {
    /// Per-coefficient mean of the trained lighting table.
    Mean,
    /// The trained lighting of one input image.
    Image(usize),
    /// A text file with 27 numbers (9 rows of RGB).
    File(PathBuf),
    Values(ShLighting),
}

impl FromStr for LightingSource {
    type Err = Error;

    /// `mean`, `image:<k>`, `file:<path>` or `values:<27 comma-separated numbers>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(Self::Mean);
        }
        if let Some(k) = s.strip_prefix("image:") {
            let k = k.parse().map_err(|_| Error::invalid(format!("bad image index in {s:?}")))?;
            return Ok(Self::Image(k));
        }
        if let Some(p) = s.strip_prefix("file:") {
            ensure!(!p.is_empty(), "file: needs a path");
            return Ok(Self::File(PathBuf::from(p)));
        }
        if let Some(v) = s.strip_prefix("values:") {
            return Ok(Self::Values(parse_lighting(v)?));
        }
        Err(Error::invalid(format!("lighting source {s:?} is not mean, image:<k>, file:<path> or values:<...>")))
    }
}

fn parse_lighting(text: &str) -> Result<ShLighting> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::invalid(format!("bad lighting coefficient {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    ShLighting::from_slice(&values).map_err(|e| Error::invalid(e.to_string()))
}

impl LightingSource {
    pub fn resolve(&self, table: &[ShLighting]) -> Result<ShLighting> {
        match self {
            Self::Mean => ShLighting::mean(table).ok_or_else(|| Error::invalid("lighting table is empty")),
            Self::Image(k) => table
                .get(*k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("image {k} outside lighting table of {}", table.len()))),
            Self::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_lighting(&text).map_err(|e| Error::format(p, e.to_string()))
            }
            Self::Values(l) => Ok(l.clone()),
        }
    }
}

/// Axis-aligned cube the cameras look into: centered on the point closest
/// to every optical axis, wide enough to fill the widest view at the
/// distance of that point.
pub fn scene_bounds(cameras: &[PinholeCamera]) -> Result<(Vec3, Vec3)> {
    ensure!(!cameras.is_empty(), "scene bounds need at least one camera");
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = Vec3::zeros();
    for c in cameras {
        let d = c.forward();
        let p = nalgebra::Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c.center();
    }
    let center = match a.try_inverse().filter(|_| cameras.len() > 1) {
        Some(inv) if a.determinant().abs() > 1e-9 => inv * b,
        _ => {
            let c = &cameras[0];
            c.center() + c.forward() * 0.5 * (c.near + c.far)
        }
    };
    let half = cameras
        .iter()
        .map(|c| {
            let d = c.distance_to(&center);
            d * 0.5 * (c.width as f64 / c.fx.abs()).max(c.height as f64 / c.fy.abs())
        })
        .fold(0.0, f64::max);
    ensure!(half > 0.0 && half.is_finite(), "could not derive scene bounds from the cameras");
    let h = Vec3::new(half, half, half);
    Ok((center - h, center + h))
}

/// Training flags; `None` keeps the library default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainArgs {
    pub steps: u64,
    pub mode: Option<TrainMode>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub n_depth: Option<usize>,
    pub checkpoint_interval: Option<u64>,
    pub field_width: Option<usize>,
    pub field_depth: Option<usize>,
    pub n_freq: Option<usize>,
    pub density_bias: Option<f64>,
    pub resolution: Option<usize>,
    pub bounds: Option<(Vec3, Vec3)>,
}

impl TrainArgs {
    pub fn config(&self, dataset: &Dataset) -> Result<TrainConfig> {
        let (lo, hi) = match self.bounds {
            Some(b) => b,
            None => scene_bounds(&dataset.cameras)?,
        };
        let mut c = TrainConfig::new(self.mode.unwrap_or(TrainMode::MlpOnly), lo, hi)?;
        c.steps = self.steps;
        c.seed = self.seed.unwrap_or(dataset.seed);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr = self.lr.unwrap_or(c.lr);
        c.n_depth = self.n_depth.unwrap_or(c.n_depth);
        c.checkpoint_interval = self.checkpoint_interval.unwrap_or(0);
        c.field = MlpFieldConfig {
            width: self.field_width.unwrap_or(c.field.width),
            depth: self.field_depth.unwrap_or(c.field.depth),
            n_freq: self.n_freq.unwrap_or(c.field.n_freq),
            density_bias: self.density_bias.unwrap_or(c.field.density_bias),
            seed: c.seed,
            ..c.field
        };
        if let Some(r) = self.resolution {
            c.fusion.grid = VoxelGrid::new(lo, hi, r)?;
        }
        c.fusion.seed = c.seed;
        Ok(c)
    }
}

pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = DatasetManifest::load(path)?;
    let d = m.load_dataset()?;
    Ok((m, d))
}

/// Renders a synthetic dataset; returns the written manifest path.
pub fn cmd_synth(spec: &Path, views: Option<usize>, out: &Path) -> Result<PathBuf> {
    let spec = SynthSpec::load(spec)?;
    synthesize(&spec, views)?.write(out)
}

/// Trains on a manifest, writing `loss.csv` and checkpoints into `out`.
pub fn cmd_train(manifest: &Path, args: &TrainArgs, out: &Path) -> Result<TrainState> {
    let (_, dataset) = load_manifest(manifest)?;
    let config = args.config(&dataset)?;
    train(&dataset, config, Some(out), |_, _| {})
}

/// Render settings matching a trained state: deterministic stratum midpoints.
pub fn render_options(state: &TrainState) -> RenderOptions {
    RenderOptions {
        n_depth: state.config.n_depth,
        seed: state.config.seed,
        mode: RenderMode::Relit,
        background: state.config.background,
        stratified: false,
    }
}

/// Renders `camera` from a trained state under the chosen lighting.
pub fn relight(state: &TrainState, camera: &PinholeCamera, source: &LightingSource) -> Result<ImageBuffer> {
    let lighting = source.resolve(&state.lighting_table())?;
    let field = state.radiance_field();
    let view = field.view(&state.store);
    Ok(render_image(view.as_ref(), &lighting, camera, &render_options(state))?.clamped())
}

pub fn cmd_relight(checkpoint: &Path, manifest: &Path, camera: usize, source: &LightingSource, out: &Path) -> Result<ImageBuffer> {
    let state = TrainState::load_checkpoint(checkpoint)?;
    let m = DatasetManifest::load(manifest)?;
    let cam = m
        .images
        .get(camera)
        .ok_or_else(|| Error::invalid(format!("camera {camera} outside manifest of {} images", m.images.len())))?
        .camera
        .clone();
    let img = relight(&state, &cam, source)?;
    save_image(&img, out)?;
    Ok(img)
}

/// Every input view re-rendered under one reference lighting.
#[derive(Clone, Debug)]
pub struct Correction {
    pub images: Vec<ImageBuffer>,
    pub lighting: ShLighting,
    /// Wall-clock seconds of the re-rendering.
    pub seconds: f64,
}

pub fn correct(state: &TrainState, dataset: &Dataset, source: &LightingSource) -> Result<Correction> {
    ensure!(
        state.lighting_ids.len() == dataset.len(),
        "checkpoint was trained on {} images, manifest has {}",
        state.lighting_ids.len(),
        dataset.len()
    );
    let start = Instant::now();
    let lighting = source.resolve(&state.lighting_table())?;
    let field = state.radiance_field();
    let view = field.view(&state.store);
    let opts = render_options(state);
    let images = dataset
        .cameras
        .iter()
        .map(|c| Ok(render_image(view.as_ref(), &lighting, c, &opts)?.clamped()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Correction {
        images,
        lighting,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Naive mosaic for inspection. When every overlap shares one pixel grid,
/// views are pasted over image 0 in index order (last writer wins) inside
/// their masks; otherwise the views are tiled side by side.
pub fn naive_composite(images: &[ImageBuffer], dataset: &Dataset) -> ImageBuffer {
    let coregistered = !dataset.overlaps.is_empty()
        && dataset.overlaps.iter().all(|o| o.mask_j.is_none())
        && images.iter().all(|i| i.same_dims(&images[0]));
    if coregistered {
        let mut out = images[0].clone();
        for (j, img) in images.iter().enumerate().skip(1) {
            for o in dataset.overlaps.iter().filter(|o| (o.i == 0 && o.j == j) || (o.j == 0 && o.i == j)) {
                for (k, _) in o.mask_i.bits().iter().enumerate().filter(|(_, b)| **b) {
                    let (x, y) = (k % out.width(), k / out.width());
                    out.set(x, y, img.get(x, y));
                }
            }
        }
        return out;
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let cw = images.iter().map(ImageBuffer::width).max().unwrap_or(0);
    let ch = images.iter().map(ImageBuffer::height).max().unwrap_or(0);
    let mut out = ImageBuffer::new(cols * cw, rows * ch);
    for (n, img) in images.iter().enumerate() {
        let (ox, oy) = ((n % cols) * cw, (n / cols) * ch);
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    out
}

/// Writes `corrected_###.png`, a manifest listing them (overlap masks are
/// copied alongside), `composite.png`, `lighting.txt` and `timing.txt`.
pub fn cmd_correct(checkpoint: &Path, manifest: &Path, source: &LightingSource, out: &Path) -> Result<Correction> {
    let state = TrainState::load_checkpoint(checkpoint)?;
    let (m, dataset) = load_manifest(manifest)?;
    let c = correct(&state, &dataset, source)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut corrected = m.clone();
    corrected.base_dir = out.to_path_buf();
    corrected.images = Vec::with_capacity(c.images.len());
    for (i, (img, orig)) in c.images.iter().zip(&m.images).enumerate() {
        let name = PathBuf::from(format!("corrected_{i:03}.png"));
        save_image(img, out.join(&name))?;
        corrected.images.push(ManifestImage {
            path: name,
            camera: orig.camera.clone(),
            lighting: Some(c.lighting.clone()),
        });
    }
    for o in &mut corrected.overlaps {
        for p in std::iter::once(&mut o.mask).chain(o.mask_j.as_mut()) {
            let src = m.resolve(p);
            let name = PathBuf::from(src.file_name().ok_or_else(|| Error::invalid("mask path has no file name"))?);
            let dst = out.join(&name);
            if src != dst {
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
            *p = name;
        }
    }
    corrected.save(out.join("manifest.toml"))?;
    save_image(&naive_composite(&c.images, &dataset), out.join("composite.png"))?;
    let l: Vec<String> = c.lighting.as_slice().chunks(3).map(|r| format!("{} {} {}", r[0], r[1], r[2])).collect();
    write_text(&out.join("lighting.txt"), &(l.join("\n") + "\n"))?;
    write_text(&out.join("timing.txt"), &format!("{:.6}\n", c.seconds))?;
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const METHOD_INPUT: &str = "Input";
pub const METHOD_BASELINE: &str = "Gain/bias LS";
pub const METHOD_OURS: &str = "Relit (ours)";

/// Report rows for the uncorrected inputs, the gain/bias baseline and the
/// relit correction.
pub fn evaluate(dataset: &Dataset, corrected: &[ImageBuffer], correction_seconds: f64, bins: usize) -> Result<Vec<MetricReport>> {
    ensure!(
        corrected.len() == dataset.len(),
        "{} corrected images for {} inputs",
        corrected.len(),
        dataset.len()
    );
    let inputs = &dataset.images;
    let ov = &dataset.overlaps;
    let start = Instant::now();
    let base = baseline_gain_bias(inputs, ov)?;
    let base_secs = start.elapsed().as_secs_f64();
    Ok(vec![
        MetricReport::evaluate(METHOD_INPUT, inputs, inputs, ov, bins, 0.0)?,
        MetricReport::evaluate(METHOD_BASELINE, inputs, &base.images, ov, bins, base_secs)?,
        MetricReport::evaluate(METHOD_OURS, inputs, corrected, ov, bins, correction_seconds)?,
    ])
}

/// Evaluates a corrected directory written by [`cmd_correct`] against the
/// input manifest; writes `report.txt` and `report.csv` into `out`.
pub fn cmd_evaluate(manifest: &Path, corrected_dir: &Path, bins: Option<usize>, out: &Path) -> Result<Vec<MetricReport>> {
    let (_, dataset) = load_manifest(manifest)?;
    let (_, corrected) = load_manifest(&corrected_dir.join("manifest.toml"))?;
    let timing = corrected_dir.join("timing.txt");
    let seconds = match std::fs::read_to_string(&timing) {
        Ok(t) => t.trim().parse().map_err(|_| Error::format(&timing, "expected a number of seconds"))?,
        Err(_) => 0.0,
    };
    let rows = evaluate(&dataset, &corrected.images, seconds, bins.unwrap_or(DEFAULT_BINS))?;
    write_reports(&rows, out)?;
    Ok(rows)
}

pub fn write_reports(rows: &[MetricReport], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("report.txt"), &format_table(rows))?;
    write_text(&out.join("report.csv"), &format_csv(rows))
}

/// Path of the final checkpoint inside a training output directory.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}

/// Process exit status for an error: 2 for bad data, 3 for numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}
