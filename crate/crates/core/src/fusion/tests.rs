use super::*;
use crate::diffcore::check_store;
use crate::renderer::DifferentiableField;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn up() -> Vec3 {
    Vec3::new(0.0, 1.0, 0.0)
}

fn grid(res: usize) -> VoxelGrid {
    VoxelGrid::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), res).unwrap()
}

fn nets(mode: FusionMode, res: usize, seed: u64) -> (ParamStore, FusionNets) {
    let mut store = ParamStore::new();
    let cfg = FusionConfig {
        feature_width: 3,
        voxel_width: 4,
        hidden: 6,
        mode,
        seed,
        density_bias: 0.2,
        ..FusionConfig::new(grid(res))
    };
    let n = FusionNets::register(cfg, &mut store, "fusion").unwrap();
    (store, n)
}

fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

fn ring_camera(i: usize, n: usize, size: usize) -> PinholeCamera {
    let a = i as f64 / n as f64 * std::f64::consts::TAU;
    let eye = Vec3::new(3.0 * a.sin(), 0.4, -3.0 * a.cos());
    PinholeCamera::look_at(size, size, 20.0, eye, Vec3::zeros(), up(), 0.5, 6.0).unwrap()
}

#[test]
fn zero_filters_give_zero_features() {
    let (mut store, n) = nets(FusionMode::Gated, 4, 0);
    for l in n.encoder_layers() {
        for id in l.param_ids() {
            store.get_mut(id).values_mut().fill(0.0);
        }
    }
    let m = n.encode_view(&store, &random_image(5, 4, 1)).unwrap();
    assert!(m.data.iter().all(|v| *v == 0.0));
}

#[test]
fn constant_image_gives_constant_features() {
    let (store, n) = nets(FusionMode::Gated, 4, 2);
    let m = n.encode_view(&store, &ImageBuffer::filled(6, 5, [0.2, 0.7, 0.4])).unwrap();
    let first = m.get(0, 0).to_vec();
    for y in 0..5 {
        for x in 0..6 {
            assert_eq!(m.get(x, y), first.as_slice());
        }
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let (store, n) = nets(FusionMode::Gated, 4, 3);
    let img = random_image(4, 4, 5);
    let w: Vec<f64> = (0..48).map(|i| (i as f64 * 0.31).sin()).collect();
    let mut tape = Tape::new();
    let v = n.encode_view_taped(&mut tape, &store, &img).unwrap();
    assert_eq!(tape.value(v), n.encode_view(&store, &img).unwrap().data.as_slice());
    let wv = tape.constant(16, 3, w.clone());
    let m = tape.mul(v, wv);
    let s = tape.sum(m);
    let grads = tape.backward(s).unwrap().param_grads();
    let report = check_store(&store, &grads, 1e-6, |st| {
        let map = n.encode_view(st, &img)?;
        Ok(map.data.iter().zip(&w).map(|(a, b)| a * b).sum())
    })
    .unwrap();
    for (name, err) in report {
        assert!(err <= 1e-4, "{name}: {err:e}");
    }
}

fn simple_view() -> (ViewFeatureMap, PinholeCamera) {
    let cam = PinholeCamera::new(
        4,
        3,
        [2.0, 2.0, 2.0, 1.5],
        nalgebra::Matrix3::identity(),
        Vec3::zeros(),
        0.1,
        10.0,
    )
    .unwrap();
    let data = (0..12).flat_map(|i| [i as f64, 10.0 * i as f64]).collect();
    (
        ViewFeatureMap {
            width: 4,
            height: 3,
            channels: 2,
            data,
        },
        cam,
    )
}

/// Point at depth 1 projecting to `(u, v)`.
fn point_at(cam: &PinholeCamera, u: f64, v: f64) -> Vec3 {
    Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0)
}

#[test]
fn voxel_sampling_cases() {
    let (view, cam) = simple_view();
    assert!(sample_voxel_feature(&view, &cam, &Vec3::new(0.0, 0.0, -1.0)).is_none());
    assert!(sample_voxel_feature(&view, &cam, &point_at(&cam, 4.5, 1.0)).is_none());
    let f = sample_voxel_feature(&view, &cam, &point_at(&cam, 2.5, 1.5)).unwrap();
    assert_eq!(f, view.get(2, 1));
    let f = sample_voxel_feature(&view, &cam, &point_at(&cam, 2.0, 1.5)).unwrap();
    let expect: Vec<f64> = view.get(1, 1).iter().zip(view.get(2, 1)).map(|(a, b)| (a + b) / 2.0).collect();
    for (a, b) in f.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn aggregation_is_order_invariant() {
    let (store, n) = nets(FusionMode::Gated, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let views: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let base = n.aggregate_mean_var(&store, &[views.iter().map(|v| v.as_slice()).collect()]).unwrap();
    for _ in 0..20 {
        let mut perm: Vec<&[f64]> = views.iter().map(|v| v.as_slice()).collect();
        perm.shuffle(&mut rng);
        let out = n.aggregate_mean_var(&store, &[perm]).unwrap();
        assert_eq!(out, base);
    }
    assert!(n.aggregate_mean_var(&store, &[vec![]]).is_err());
}

#[test]
fn variance_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let k = rng.gen_range(1..7);
        let vs: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.gen_range(-1e3..1e3)).collect()).collect();
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        assert!(mean_var(&refs).1.iter().all(|v| *v >= 0.0));
    }
}

fn encoded(n: &FusionNets, store: &ParamStore, count: usize, size: usize) -> Vec<(ViewFeatureMap, PinholeCamera)> {
    (0..count)
        .map(|i| {
            let cam = ring_camera(i, count, size);
            (n.encode_view(store, &random_image(size, size, 30 + i as u64)).unwrap(), cam)
        })
        .collect()
}

#[test]
fn local_volume_occupancy_and_duplicates() {
    let (store, n) = nets(FusionMode::Gated, 6, 5);
    let views = encoded(&n, &store, 3, 8);
    let one = n.build_local_volume(&store, &[(&views[0].0, &views[0].1)]).unwrap();
    assert!(!one.is_empty() && one.len() < n.config().grid.voxel_count());
    for (idx, _) in one.iter() {
        let c = one.grid().voxel_center(idx);
        assert!(sample_voxel_feature(&views[0].0, &views[0].1, &c).is_some());
    }
    for idx in 0..one.grid().voxel_count() {
        if one.get(idx).is_none() {
            assert!(sample_voxel_feature(&views[0].0, &views[0].1, &one.grid().voxel_center(idx)).is_none());
        }
    }
    // single view: the variance half of the aggregation input is zero
    let f = sample_voxel_feature(&views[0].0, &views[0].1, &one.grid().voxel_center(one.iter().next().unwrap().0)).unwrap();
    let direct = n.aggregate_mean_var(&store, &[vec![f.as_slice()]]).unwrap();
    let mut stats = f.clone();
    stats.extend([0.0; 3]);
    assert_eq!(direct, n.aggregate_net().eval(&store, &stats, 1).unwrap());
    let twice = n
        .build_local_volume(&store, &[(&views[0].0, &views[0].1), (&views[0].0, &views[0].1)])
        .unwrap();
    assert_eq!(twice, one);
    assert!(n.build_local_volume(&store, &[]).is_err());
}

#[test]
fn local_volume_ignores_view_order() {
    let (store, n) = nets(FusionMode::Gated, 5, 6);
    let views = encoded(&n, &store, 4, 8);
    let refs: Vec<_> = views.iter().map(|(v, c)| (v, c)).collect();
    let a = n.build_local_volume(&store, &refs).unwrap();
    let rev: Vec<_> = refs.iter().rev().copied().collect();
    assert_eq!(n.build_local_volume(&store, &rev).unwrap(), a);
}

fn volume_with(g: VoxelGrid, entries: &[(usize, Vec<f64>, u32)]) -> FeatureVolume {
    let mut v = FeatureVolume::empty(g, 4);
    for (i, f, c) in entries {
        v.insert(*i, f.clone(), *c).unwrap();
    }
    v
}

#[test]
fn count_average_fusion() {
    let (store, n) = nets(FusionMode::CountAverage, 4, 0);
    let g = grid(4);
    let v = volume_with(g, &[(3, vec![0.25, -1.0, 2.0, 0.5], 1), (7, vec![1.0; 4], 1)]);
    let mut acc = n.fuse_global(&store, &n.empty_volume(), &v).unwrap();
    assert_eq!(acc, v);
    for k in 0..5 {
        acc = n.fuse_global(&store, &acc, &v).unwrap();
        for (idx, vox) in acc.iter() {
            assert_eq!(vox.feature, v.get(idx).unwrap().feature);
            assert_eq!(vox.count, k + 2);
        }
    }
    let zero = volume_with(g, &[(5, vec![0.0; 4], 1)]);
    let one = volume_with(g, &[(5, vec![1.0; 4], 1)]);
    let f = n.fuse_global(&store, &n.fuse_global(&store, &n.empty_volume(), &zero).unwrap(), &one).unwrap();
    assert_eq!(f.get(5).unwrap().feature, vec![0.5; 4]);
    assert_eq!(f.get(5).unwrap().count, 2);
    // running mean of a sequence
    let seq = [vec![0.3, 0.1, -2.0, 4.0], vec![1.1, 0.0, 0.5, 0.5], vec![-0.7, 2.0, 1.0, 0.0]];
    let mut acc = n.empty_volume();
    for s in &seq {
        acc = n.fuse_global(&store, &acc, &volume_with(g, &[(9, s.clone(), 1)])).unwrap();
    }
    for c in 0..4 {
        let mean = seq.iter().map(|s| s[c]).sum::<f64>() / 3.0;
        assert!((acc.get(9).unwrap().feature[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn gated_fusion_with_saturated_gate() {
    let (mut store, n) = nets(FusionMode::Gated, 4, 1);
    let gate = n.gate_net();
    let last = gate.spec().layer_dims().len() - 1;
    store.get_mut(gate.weight(last)).values_mut().fill(0.0);
    store.get_mut(gate.bias(last)).values_mut().fill(50.0);
    let g = grid(4);
    let old = volume_with(g, &[(1, vec![5.0, 6.0, 7.0, 8.0], 2), (2, vec![1.0; 4], 1)]);
    let new = volume_with(g, &[(1, vec![-1.0, 0.5, 0.25, 3.0], 1), (4, vec![2.0; 4], 1)]);
    let f = n.fuse_global(&store, &old, &new).unwrap();
    assert_eq!(f.get(1).unwrap().feature, new.get(1).unwrap().feature);
    assert_eq!(f.get(1).unwrap().count, 3);
    assert_eq!(f.get(2), old.get(2));
    assert_eq!(f.get(4).unwrap().feature, vec![2.0; 4]);
    let other = FeatureVolume::empty(grid(5), 4);
    assert!(n.fuse_global(&store, &old, &other).is_err());
}

#[test]
fn decoding_conventions() {
    let (store, n) = nets(FusionMode::Gated, 4, 2);
    let g = grid(4);
    let empty = n.empty_volume();
    let pts = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.9, 0.5, 0.0)];
    let d = n.decode(&store, &empty, &pts).unwrap();
    assert_eq!(d[0], d[1]);
    assert_eq!(n.decode(&store, &empty, &[Vec3::new(2.0, 0.0, 0.0)]).unwrap()[0], (0.0, [0.5; 3]));
    let a = vec![0.3, -0.2, 1.0, 0.7];
    let b = vec![-1.0, 0.4, 0.1, 2.0];
    let (ia, ib) = (g.index(1, 1, 1), g.index(2, 1, 1));
    let vol = volume_with(g, &[(ia, a.clone(), 1), (ib, b.clone(), 1)]);
    let at = n.decode(&store, &vol, &[g.voxel_center(ia)]).unwrap()[0];
    let single = volume_with(g, &[(0, a.clone(), 1)]);
    assert_eq!(at, n.decode(&store, &single, &[g.voxel_center(0)]).unwrap()[0]);
    let mid = (g.voxel_center(ia) + g.voxel_center(ib)) / 2.0;
    let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
    let got = n.decode(&store, &vol, &[mid]).unwrap()[0];
    let want = n.decode(&store, &volume_with(g, &[(0, avg, 1)]), &[g.voxel_center(0)]).unwrap()[0];
    assert!((got.0 - want.0).abs() < 1e-12);
    assert!(n.decode(&store, &vol, &[Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
}

#[test]
fn decoding_is_continuous_across_cells() {
    let (store, n) = nets(FusionMode::Gated, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = grid(4);
    let entries: Vec<_> = (0..64).map(|i| (i, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), 1)).collect();
    let vol = volume_with(g, &entries);
    // a cell boundary between voxel centers sits at x = 0
    for y in [-0.4, 0.1, 0.6] {
        let e = 1e-9;
        let l = n.decode(&store, &vol, &[Vec3::new(-e, y, 0.2)]).unwrap()[0];
        let r = n.decode(&store, &vol, &[Vec3::new(e, y, 0.2)]).unwrap()[0];
        assert!((l.0 - r.0).abs() < 1e-6, "{l:?} {r:?}");
    }
}

#[test]
fn neighbor_groups() {
    let cams: Vec<_> = (0..8).map(|i| ring_camera(i, 8, 4)).collect();
    let g = neighbor_group(&cams, 0, 4);
    assert_eq!(g[0], 0);
    assert_eq!(g.len(), 4);
    let mut rest = g[1..].to_vec();
    rest.sort();
    assert!(rest.contains(&1) && rest.contains(&7));
}

fn fused_fixture(mode: FusionMode) -> (ParamStore, FusionNets, Vec<ImageBuffer>, Vec<PinholeCamera>, FeatureVolume, Vec<Vec3>) {
    let (mut store, n) = nets(mode, 3, 7);
    // nonzero biases keep ReLU inputs away from their kink
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("/b") {
            store.get_mut(id).values_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.3..0.3));
        }
    }
    let images: Vec<_> = (0..2).map(|i| random_image(4, 4, 50 + i)).collect();
    let cams: Vec<_> = (0..2).map(|i| ring_camera(i, 6, 4)).collect();
    let maps: Vec<_> = images.iter().map(|im| n.encode_view(&store, im).unwrap()).collect();
    let prev_local = n.build_local_volume(&store, &[(&maps[1], &cams[1])]).unwrap();
    let mut prev = n.fuse_global(&store, &n.empty_volume(), &prev_local).unwrap();
    // also a voxel only the previous frame knows about
    let (idx, _) = (0..27).map(|i| (i, ())).find(|(i, _)| prev.get(*i).is_none()).unwrap();
    prev.insert(idx, vec![0.4, -0.3, 0.2, 0.1], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec3> = (0..6)
        .map(|_| Vec3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)))
        .collect();
    (store, n, images, cams, prev, pts)
}

#[test]
fn taped_fusion_matches_untaped_volumes() {
    for mode in [FusionMode::Gated, FusionMode::CountAverage] {
        let (store, n, images, cams, prev, pts) = fused_fixture(mode);
        let mut tape = Tape::new();
        let rec = record_fused(&mut tape, &store, &n, &[&images[0], &images[1]], &[&cams[0], &cams[1]], &prev, &pts).unwrap();
        for tv in [&rec.local, &rec.global] {
            let rows = tape.value(tv.rows.unwrap());
            for (idx, r) in &tv.row_of {
                let f = &tv.volume.get(*idx).unwrap().feature;
                for c in 0..4 {
                    assert!((rows[r * 4 + c] - f[c]).abs() < 1e-12);
                }
            }
            let eval = tv.bind(&n, &store).record(&mut tape, &pts, false).unwrap();
            let direct = n.decode(&store, &tv.volume, &pts).unwrap();
            for (i, (s, a)) in direct.iter().enumerate() {
                assert!((tape.value(eval.sigma)[i] - s).abs() < 1e-12);
                for c in 0..3 {
                    assert!((tape.value(eval.albedo)[i * 3 + c] - a[c]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn taped_fusion_gradients_pass_finite_difference_check() {
    let (store, n, images, cams, prev, pts) = fused_fixture(FusionMode::Gated);
    let w: Vec<f64> = (0..pts.len() * 4).map(|i| (i as f64 * 0.7).sin()).collect();
    let loss = |st: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let rec = record_fused(tape, st, &n, &[&images[0], &images[1]], &[&cams[0], &cams[1]], &prev, &pts)?;
        let mut total = None;
        for tv in [&rec.local, &rec.global] {
            let s = tv.bind(&n, st).record(tape, &pts, false)?;
            let both = tape.concat_cols(s.sigma, s.albedo);
            let wv = tape.constant(pts.len(), 4, w.clone());
            let m = tape.mul(both, wv);
            let v = tape.sum(m);
            total = Some(match total {
                Some(t) => tape.add(t, v),
                None => v,
            });
        }
        Ok(total.unwrap())
    };
    let mut tape = Tape::new();
    let l = loss(&store, &mut tape).unwrap();
    let grads = tape.backward(l).unwrap().param_grads();
    let report = check_store(&store, &grads, 1e-5, |st| {
        let mut t = Tape::new();
        let l = loss(st, &mut t)?;
        Ok(t.scalar(l))
    })
    .unwrap();
    for (name, err) in report {
        assert!(err <= 1e-4, "{name}: {err:e}");
    }
}

