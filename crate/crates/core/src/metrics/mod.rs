//! Color-consistency metrics for corrected image sets: histogram color
//! distance over overlaps (CD), gradient-direction loss against the inputs
//! (GL), PSNR, a least-squares gain/bias baseline and report tables.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Error, Result};
use crate::imaging::{ImageBuffer, Mask, OverlapPair};


pub const DEFAULT_BINS: usize = 256;
/// Gradient magnitude below which a pixel has no direction.
pub const GRADIENT_THRESHOLD: f64 = 1e-3;

/// Normalized per-channel histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHistogram {
    pub bins: usize,
    /// `counts[c][k]`, each channel summing to 1.
    pub counts: [Vec<f64>; 3],
    pub pixel_count: usize,
}

/// Bin of a channel value; values outside `[0, 1]` are clamped first.
pub fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

pub fn color_histogram(image: &ImageBuffer, mask: &Mask, bins: usize) -> Result<ColorHistogram> {
    ensure!(bins >= 2, "histogram needs at least 2 bins, got {bins}");
    ensure!(
        mask.matches(image),
        "mask is {}x{}, image is {}x{}",
        mask.width(),
        mask.height(),
        image.width(),
        image.height()
    );
    let n = mask.area();
    ensure!(n > 0, "histogram of an empty mask is undefined");
    let mut counts = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    for (k, _) in mask.bits().iter().enumerate().filter(|(_, b)| **b) {
        let px = image.pixel(k);
        for c in 0..3 {
            counts[c][bin_of(px[c], bins)] += 1.0;
        }
    }
    for ch in &mut counts {
        ch.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ColorHistogram {
        bins,
        counts,
        pixel_count: n,
    })
}

/// L1 distance between histograms, averaged over the channels.
pub fn delta_h(a: &ColorHistogram, b: &ColorHistogram) -> Result<f64> {
    ensure!(a.bins == b.bins, "histograms have {} and {} bins", a.bins, b.bins);
    let mut s = 0.0;
    for c in 0..3 {
        s += a.counts[c].iter().zip(&b.counts[c]).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(s / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairContribution {
    pub i: usize,
    pub j: usize,
    /// Normalized area weight.
    pub weight: f64,
    pub delta_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorDistance {
    pub cd: f64,
    pub pairs: Vec<PairContribution>,
}

/// Area-weighted histogram distance over unordered overlapping pairs,
/// divided by the bin count. A pair's weight is proportional to the mean
/// area of its two masks.
pub fn compute_cd(images: &[ImageBuffer], overlaps: &[OverlapPair], bins: usize) -> Result<ColorDistance> {
    ensure!(!overlaps.is_empty(), "color distance needs at least one overlapping pair");
    let mut seen = std::collections::BTreeSet::new();
    let mut raw = Vec::with_capacity(overlaps.len());
    for o in overlaps {
        ensure!(o.i != o.j, "overlap pair ({}, {}) pairs an image with itself", o.i, o.j);
        ensure!(
            o.i < images.len() && o.j < images.len(),
            "overlap pair ({}, {}) out of range for {} images",
            o.i,
            o.j,
            images.len()
        );
        ensure!(seen.insert((o.i.min(o.j), o.i.max(o.j))), "pair ({}, {}) listed twice", o.i, o.j);
        let hi = color_histogram(&images[o.i], &o.mask_i, bins)?;
        let hj = color_histogram(&images[o.j], o.mask_for_j(), bins)?;
        let area = 0.5 * (o.mask_i.area() + o.mask_for_j().area()) as f64;
        let (i, j) = (o.i.min(o.j), o.i.max(o.j));
        raw.push((i, j, area, delta_h(&hi, &hj)?));
    }
    let total: f64 = raw.iter().map(|r| r.2).sum();
    let pairs: Vec<PairContribution> = raw
        .into_iter()
        .map(|(i, j, a, d)| PairContribution {
            i,
            j,
            weight: a / total,
            delta_h: d,
        })
        .collect();
    let cd = pairs.iter().map(|p| p.weight * p.delta_h).sum::<f64>() / bins as f64;
    Ok(ColorDistance { cd, pairs })
}

/// Per-pixel gradient direction of the grayscale mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDirectionMap {
    pub width: usize,
    pub height: usize,
    /// Radians in `(-pi, pi]`; meaningless where `valid` is false.
    pub angle: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GradientDirectionMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Central differences with replicated borders; `y` grows downward.
pub fn gradient_direction_map(image: &ImageBuffer) -> Result<GradientDirectionMap> {
    let (w, h) = (image.width(), image.height());
    ensure!(w >= 3 && h >= 3, "gradient map needs at least a 3x3 image, got {w}x{h}");
    let gray: Vec<f64> = image.data().chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let g = |x: usize, y: usize| gray[y * w + x];
    let mut angle = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = 0.5 * (g((x + 1).min(w - 1), y) - g(x.saturating_sub(1), y));
            let gy = 0.5 * (g(x, (y + 1).min(h - 1)) - g(x, y.saturating_sub(1)));
            let mut a = gy.atan2(gx);
            if a <= -std::f64::consts::PI {
                a = std::f64::consts::PI;
            }
            angle.push(a);
            valid.push((gx * gx + gy * gy).sqrt() > GRADIENT_THRESHOLD);
        }
    }
    Ok(GradientDirectionMap {
        width: w,
        height: h,
        angle,
        valid,
    })
}

/// Absolute angle difference wrapped to `[0, pi]`.
pub fn wrapped_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % std::f64::consts::TAU;
    d.min(std::f64::consts::TAU - d)
}

/// Mean over images of the average direction change on pixels with a
/// direction in both the input and its corrected version.
pub fn compute_gl(inputs: &[ImageBuffer], corrected: &[ImageBuffer]) -> Result<f64> {
    ensure!(
        inputs.len() == corrected.len(),
        "{} inputs but {} corrected images",
        inputs.len(),
        corrected.len()
    );
    ensure!(!inputs.is_empty(), "gradient loss needs at least one image");
    let mut total = 0.0;
    for (k, (a, b)) in inputs.iter().zip(corrected).enumerate() {
        ensure!(a.same_dims(b), "image {k}: corrected dimensions differ from input");
        let (ma, mb) = (gradient_direction_map(a)?, gradient_direction_map(b)?);
        let mut sum = 0.0;
        let mut n = 0usize;
        for p in 0..ma.angle.len() {
            if ma.valid[p] && mb.valid[p] {
                sum += wrapped_angle_diff(ma.angle[p], mb.angle[p]);
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64;
        }
    }
    Ok(total / inputs.len() as f64)
}

/// `10 log10(1 / MSE)` over all channels; identical images give `+inf`.
pub fn psnr(image: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    ensure!(image.same_dims(reference), "psnr needs images of equal size");
    let n = image.data().len();
    ensure!(n > 0, "psnr of empty images");
    let mse = image.data().iter().zip(reference.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Per-image, per-channel `v -> gain * v + bias` fitted across overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct GainBias {
    pub gains: Vec<[f64; 3]>,
    pub biases: Vec<[f64; 3]>,
    pub images: Vec<ImageBuffer>,
}

/// Value pairs for one overlap and channel. With one shared mask the pairs
/// are pixelwise; with a mask per image they are matched by quantile.
fn correspondences(images: &[ImageBuffer], o: &OverlapPair, c: usize) -> Vec<(f64, f64)> {
    let values = |img: &ImageBuffer, m: &Mask| -> Vec<f64> {
        m.bits()
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(k, _)| img.pixel(k)[c])
            .collect()
    };
    let vi = values(&images[o.i], &o.mask_i);
    if o.mask_j.is_none() {
        let vj = values(&images[o.j], &o.mask_i);
        return vi.into_iter().zip(vj).collect();
    }
    let mut vi = vi;
    let mut vj = values(&images[o.j], o.mask_for_j());
    vi.sort_by(f64::total_cmp);
    vj.sort_by(f64::total_cmp);
    let m = vi.len().min(vj.len());
    (0..m)
        .map(|k| {
            let q = (k as f64 + 0.5) / m as f64;
            let pick = |v: &[f64]| v[((q * v.len() as f64) as usize).min(v.len() - 1)];
            (pick(&vi), pick(&vj))
        })
        .collect()
}

/// Connected components of the overlap graph.
pub fn overlap_components(n: usize, overlaps: &[OverlapPair]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for o in overlaps {
        if o.i < n && o.j < n {
            let (a, b) = (root(&mut parent, o.i), root(&mut parent, o.j));
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut comps: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = root(&mut parent, i);
        comps.entry(r).or_default().push(i);
    }
    comps.into_values().collect()
}

/// Weight of the pull toward the identity map that keeps the normal
/// equations regular for flat channels.
const IDENTITY_RIDGE: f64 = 1e-10;

/// Joint least-squares gain/bias per image and channel minimizing
/// `sum (g_i v_i + b_i - g_j v_j - b_j)^2` over overlap correspondences,
/// with image 0 fixed to the identity. Results are clamped to `[0, 1]`.
pub fn baseline_gain_bias(images: &[ImageBuffer], overlaps: &[OverlapPair]) -> Result<GainBias> {
    ensure!(!images.is_empty(), "baseline needs at least one image");
    for o in overlaps {
        ensure!(o.i < images.len() && o.j < images.len() && o.i != o.j, "bad overlap pair ({}, {})", o.i, o.j);
        ensure!(o.mask_i.matches(&images[o.i]), "overlap ({}, {}): mask does not match image {}", o.i, o.j, o.i);
        ensure!(o.mask_for_j().matches(&images[o.j]), "overlap ({}, {}): mask does not match image {}", o.i, o.j, o.j);
    }
    let comps = overlap_components(images.len(), overlaps);
    if comps.len() > 1 {
        return Err(Error::invalid(format!("overlap graph is disconnected; components: {comps:?}")));
    }
    let n = images.len();
    let m = 2 * (n - 1);
    let mut gains = vec![[1.0; 3]; n];
    let mut biases = vec![[0.0; 3]; n];
    if m > 0 {
        for c in 0..3 {
            let mut h = DMatrix::<f64>::zeros(m, m);
            let mut rhs = DVector::<f64>::zeros(m);
            for o in overlaps {
                for (vi, vj) in correspondences(images, o, c) {
                    // residual = sum a_k x_k + k0
                    let mut terms: Vec<(usize, f64)> = Vec::with_capacity(4);
                    let mut k0 = 0.0;
                    for (img, v, s) in [(o.i, vi, 1.0), (o.j, vj, -1.0)] {
                        if img == 0 {
                            k0 += s * v;
                        } else {
                            terms.push((2 * (img - 1), s * v));
                            terms.push((2 * (img - 1) + 1, s));
                        }
                    }
                    for &(a, va) in &terms {
                        rhs[a] -= va * k0;
                        for &(b, vb) in &terms {
                            h[(a, b)] += va * vb;
                        }
                    }
                }
            }
            for k in 0..m {
                h[(k, k)] += IDENTITY_RIDGE;
                if k % 2 == 0 {
                    rhs[k] += IDENTITY_RIDGE;
                }
            }
            let x = h
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NonFinite("gain/bias normal equations are singular".into()))?;
            for i in 1..n {
                gains[i][c] = x[2 * (i - 1)];
                biases[i][c] = x[2 * (i - 1) + 1];
            }
        }
    }
    let images = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut out = img.clone();
            for px in out.data_mut().chunks_mut(3) {
                for c in 0..3 {
                    px[c] = (gains[i][c] * px[c] + biases[i][c]).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();
    Ok(GainBias { gains, biases, images })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub cd: f64,
    pub gl: f64,
    /// Wall-clock seconds of the correction step.
    pub seconds: f64,
    pub pairs: Vec<PairContribution>,
}

pub const REPORT_COLUMNS: [&str; 4] = ["Method", "CD", "GL", "T(s)"];

impl MetricReport {
    /// CD and GL for `corrected` against the original `inputs`.
    pub fn evaluate(
        method: impl Into<String>,
        inputs: &[ImageBuffer],
        corrected: &[ImageBuffer],
        overlaps: &[OverlapPair],
        bins: usize,
        seconds: f64,
    ) -> Result<Self> {
        let method = method.into();
        ensure!(!method.contains([',', '\n']), "method name {method:?} may not contain commas or newlines");
        let cd = compute_cd(corrected, overlaps, bins)?;
        let gl = compute_gl(inputs, corrected)?;
        Ok(Self {
            method,
            cd: cd.cd,
            gl,
            seconds,
            pairs: cd.pairs,
        })
    }

    fn cells(&self) -> [String; 4] {
        [
            self.method.clone(),
            format!("{:.6}", self.cd),
            format!("{:.6}", self.gl),
            format!("{:.3}", self.seconds),
        ]
    }
}

/// Aligned plain-text table.
pub fn format_table(rows: &[MetricReport]) -> String {
    let cells: Vec<[String; 4]> = rows.iter().map(MetricReport::cells).collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for r in &cells {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, r: [&str; 4]| {
        let _ = writeln!(
            out,
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
            r[0],
            r[1],
            r[2],
            r[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        );
    };
    line(&mut out, REPORT_COLUMNS);
    for r in &cells {
        line(&mut out, [&r[0], &r[1], &r[2], &r[3]]);
    }
    out
}

/// CSV with the same cell text as [`format_table`].
pub fn format_csv(rows: &[MetricReport]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.cells().join(","));
        out.push('\n');
    }
    out
}

/// Parses [`format_csv`] output into `(method, cd, gl, seconds)` rows.
pub fn parse_csv(text: &str) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("Method,CD,GL,T(s)"), "report CSV has the wrong header");
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        ensure!(cells.len() == 4, "report row needs 4 cells: {line}");
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad number in report row: {line}")));
        rows.push((cells[0].to_string(), num(cells[1])?, num(cells[2])?, num(cells[3])?));
    }
    Ok(rows)
}
