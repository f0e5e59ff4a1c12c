//! Tape-recorded fusion for training: only the voxels a batch touches are
//! recorded, while the full volumes are rebuilt without the tape.

use std::collections::HashMap;
use std::sync::Arc;

use super::{ops, FusionMode, FusionNets, ViewFeatureMap, VolumeFieldView};
use crate::diffcore::{Activation, ParamStore, SparseRows, Tape, Var};
use crate::error::{ensure, Result};
use crate::field::SceneField;
use crate::imaging::{ImageBuffer, PinholeCamera, Vec3};
use crate::renderer::{DifferentiableField, RecordedSamples};

use super::FeatureVolume;

/// Recorded features of a subset of a volume's voxels.
pub struct TapedVolume {
    /// `(rows, voxel_width)`, absent when no recorded voxel is occupied.
    pub rows: Option<Var>,
    pub row_of: HashMap<usize, usize>,
    /// The same volume without the tape (all voxels).
    pub volume: FeatureVolume,
}

/// Output of [`record_fused`].
pub struct FusedRecord {
    pub local: TapedVolume,
    pub global: TapedVolume,
}

fn touched_voxels(volume: &FeatureVolume, points: &[Vec3]) -> Vec<usize> {
    let mut v: Vec<usize> = points
        .iter()
        .filter_map(|p| volume.grid().trilinear(p))
        .flatten()
        .map(|(i, _)| i)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Records the local volume of a view group and its fusion into
/// `global_prev` for the voxels around `points`. `global_prev` is a
/// constant: gradients do not reach earlier frames.
pub fn record_fused(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &FusionNets,
    images: &[&ImageBuffer],
    cameras: &[&PinholeCamera],
    global_prev: &FeatureVolume,
    points: &[Vec3],
) -> Result<FusedRecord> {
    ensure!(images.len() == cameras.len() && !images.is_empty(), "view group needs matching images and cameras");
    let cfg = nets.config();
    let (f, vw) = (cfg.feature_width, cfg.voxel_width);
    let mut maps = Vec::new();
    let mut map_vars = Vec::new();
    for img in images {
        let v = nets.encode_view_taped(tape, store, img)?;
        maps.push(ViewFeatureMap {
            width: img.width(),
            height: img.height(),
            channels: f,
            data: tape.value(v).to_vec(),
        });
        map_vars.push(v);
    }
    let views: Vec<(&ViewFeatureMap, &PinholeCamera)> = maps.iter().zip(cameras.iter().copied()).collect();
    let local_volume = nets.build_local_volume(store, &views)?;
    let global_volume = nets.fuse_global(store, global_prev, &local_volume)?;
    let touched = touched_voxels(&local_volume, points);

    // local rows: aggregation of bilinear samples from every view
    let mut mixes: Vec<SparseRows> = (0..images.len()).map(|_| SparseRows::new()).collect();
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut local_row_of = HashMap::new();
    for &idx in &touched {
        if local_volume.get(idx).is_none() {
            continue;
        }
        let center = local_volume.grid().voxel_center(idx);
        let mut members = Vec::new();
        for (v, cam) in cameras.iter().enumerate() {
            if let Some(taps) = super::projection_taps(cam, &center) {
                members.push((v, mixes[v].rows()));
                mixes[v].push_row(taps.into_iter().filter(|t| t.1 != 0.0));
            }
        }
        local_row_of.insert(idx, groups.len());
        groups.push(members);
    }
    let local_rows = if groups.is_empty() {
        None
    } else {
        let mut inputs = Vec::new();
        let mut remap = vec![usize::MAX; images.len()];
        for (v, mix) in mixes.into_iter().enumerate() {
            if mix.rows() > 0 {
                remap[v] = inputs.len();
                inputs.push(tape.row_combine(map_vars[v], Arc::new(mix)));
            }
        }
        for g in &mut groups {
            for m in g.iter_mut() {
                m.0 = remap[m.0];
            }
        }
        let stats = ops::group_mean_var(tape, inputs, groups);
        Some(nets.aggregate_net().forward(tape, store, stats)?)
    };

    // global rows: v' = v_g + c (v_t - v_g)
    let mut global_idx = Vec::new();
    for &idx in &touched {
        if global_volume.get(idx).is_some() {
            global_idx.push(idx);
        }
    }
    let global_rows = if global_idx.is_empty() {
        None
    } else {
        let n = global_idx.len();
        let mut vg = Vec::with_capacity(n * vw);
        let mut pick = SparseRows::new();
        let mut gate_mask = Vec::with_capacity(n * vw);
        let mut fixed = Vec::with_capacity(n * vw);
        for &idx in &global_idx {
            let prev = global_prev.get(idx);
            let in_local = local_row_of.get(&idx);
            match prev {
                Some(p) => vg.extend_from_slice(&p.feature),
                None => vg.extend(std::iter::repeat_n(0.0, vw)),
            }
            pick.push_row(in_local.map(|r| (*r, 1.0)));
            let (m, k) = match (prev, in_local) {
                (Some(p), Some(_)) => match cfg.mode {
                    FusionMode::Gated => (1.0, 0.0),
                    FusionMode::CountAverage => (0.0, 1.0 / (p.count as f64 + 1.0)),
                },
                (None, Some(_)) => (0.0, 1.0),
                _ => (0.0, 0.0),
            };
            gate_mask.extend(std::iter::repeat_n(m, vw));
            fixed.extend(std::iter::repeat_n(k, vw));
        }
        let vg = tape.constant(n, vw, vg);
        let vt = match local_rows {
            Some(l) => tape.row_combine(l, Arc::new(pick)),
            None => tape.constant(n, vw, vec![0.0; n * vw]),
        };
        let fixed = tape.constant(n, vw, fixed);
        let c = if cfg.mode == FusionMode::Gated && gate_mask.iter().any(|m| *m != 0.0) {
            let x = tape.concat_cols(vg, vt);
            let g = nets.gate_net().forward(tape, store, x)?;
            let m = tape.constant(n, vw, gate_mask);
            let gm = tape.mul(g, m);
            tape.add(gm, fixed)
        } else {
            fixed
        };
        let diff = tape.sub(vt, vg);
        let scaled = tape.mul(c, diff);
        Some(tape.add(vg, scaled))
    };
    let global_row_of = global_idx.into_iter().enumerate().map(|(r, i)| (i, r)).collect();
    Ok(FusedRecord {
        local: TapedVolume {
            rows: local_rows,
            row_of: local_row_of,
            volume: local_volume,
        },
        global: TapedVolume {
            rows: global_rows,
            row_of: global_row_of,
            volume: global_volume,
        },
    })
}

/// A [`TapedVolume`] bound to the decoder for rendering. Density gradients
/// for normals come from central differences of the untaped volume.
pub struct TapedVolumeField<'a> {
    pub taped: &'a TapedVolume,
    pub nets: &'a FusionNets,
    pub store: &'a ParamStore,
}

impl TapedVolume {
    pub fn bind<'a>(&'a self, nets: &'a FusionNets, store: &'a ParamStore) -> TapedVolumeField<'a> {
        TapedVolumeField { taped: self, nets, store }
    }
}

impl DifferentiableField for TapedVolumeField<'_> {
    fn record(&self, tape: &mut Tape, points: &[Vec3], need_gradients: bool) -> Result<RecordedSamples> {
        let vw = self.nets.config().voxel_width;
        let n = points.len();
        let grid = *self.taped.volume.grid();
        let mut mix = SparseRows::new();
        let mut inside = Vec::with_capacity(n);
        for p in points {
            match grid.trilinear(p) {
                Some(taps) => {
                    mix.push_row(taps.into_iter().filter_map(|(i, w)| self.taped.row_of.get(&i).map(|r| (*r, w))));
                    inside.push(1.0);
                }
                None => {
                    mix.push_row(std::iter::empty());
                    inside.push(0.0);
                }
            }
        }
        let feats = match self.taped.rows {
            Some(rows) => tape.row_combine(rows, Arc::new(mix)),
            None => tape.constant(n, vw, vec![0.0; n * vw]),
        };
        let raw = self.nets.decoder().forward(tape, self.store, feats)?;
        let s_raw = tape.slice_cols(raw, 0, 1);
        let a_raw = tape.slice_cols(raw, 1, 3);
        let s = tape.activation(s_raw, Activation::Softplus);
        let a = tape.activation(a_raw, Activation::Sigmoid);
        let mask1 = tape.constant(n, 1, inside.clone());
        let sigma = tape.mul(s, mask1);
        let mask3 = tape.constant(n, 3, inside.iter().flat_map(|m| [*m; 3]).collect());
        let am = tape.mul(a, mask3);
        let outside = tape.constant(n, 3, inside.iter().flat_map(|m| [0.5 * (1.0 - m); 3]).collect());
        let albedo = tape.add(am, outside);
        let gradients = need_gradients.then(|| {
            let view = VolumeFieldView {
                volume: &self.taped.volume,
                nets: self.nets,
                store: self.store,
            };
            view.density_gradients(points)
        });
        Ok(RecordedSamples { sigma, albedo, gradients })
    }
}
