use super::*;
use crate::diffcore::check_store;
use crate::field::MlpFieldConfig;
use crate::fusion::FusionMode;
use crate::imaging::{synthesize, ImageBuffer, PinholeCamera, SynthSpec};

const SPEC: &str = r#"
seed = 2
oracle_steps = 128

[scene]
primitives = [
  { kind = "sphere", center = [0, 0, 0], radius = 0.7, density = 30, albedo = [0.8, 0.5, 0.3] },
]

[ring]
views = 4
radius = 3.0
elevation = 0.5
fov_deg = 35
width = 8
height = 8
near = 1.5
far = 4.5

[[lightings]]
ambient = [0.7, 0.7, 0.7]
direction = [0.3, 1.0, -0.5]
strength = [0.3, 0.3, 0.3]
"#;

fn dataset() -> Dataset {
    synthesize(&SynthSpec::parse(SPEC).unwrap(), None).unwrap().dataset()
}

fn config(mode: TrainMode) -> TrainConfig {
    let mut c = TrainConfig::new(mode, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
    c.batch_size = 16;
    c.n_depth = 8;
    c.lr = 5e-3;
    c.seed = 11;
    c.chunk_rays = 5;
    c.field = MlpFieldConfig {
        width: 12,
        depth: 2,
        n_freq: 2,
        density_bias: 0.0,
        seed: 4,
        ..c.field
    };
    c.fusion.grid = VoxelGrid::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 6).unwrap();
    c.fusion.feature_width = 3;
    c.fusion.voxel_width = 4;
    c.fusion.hidden = 8;
    c.fusion.density_bias = 0.5;
    c
}

#[test]
fn loss_examples() {
    let gt = [[0.2, 0.4, 0.6]];
    assert_eq!(loss_nerfcc(&gt, Some(&gt), &gt).unwrap(), 0.0);
    let off = [[0.3, 0.4, 0.6]];
    assert!((loss_nerfcc(&off, Some(&gt), &gt).unwrap() - 0.01).abs() < 1e-15);
    assert!(loss_nerfcc(&off, Some(&[]), &gt).is_err());
    assert!(loss_nerfcc(&[], None, &gt).is_err());
}

#[test]
fn loss_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut px = || (0..37).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect::<Vec<[f64; 3]>>();
    let (a, b, g) = (px(), px(), px());
    let mut want = 0.0;
    for k in 0..37 {
        for c in 0..3 {
            want += ((a[k][c] - g[k][c]).powi(2) + (b[k][c] - g[k][c]).powi(2)) / 37.0;
        }
    }
    assert!((loss_nerfcc(&a, Some(&b), &g).unwrap() - want).abs() < 1e-12);
    let mut tape = Tape::new();
    let v = tape.constant(37, 3, a.iter().flatten().copied().collect());
    let l = squared_error(&mut tape, v, &g, 1.0 / 37.0);
    assert!((tape.scalar(l) - loss_nerfcc(&a, None, &g).unwrap()).abs() < 1e-12);
}

fn one_camera(w: usize, h: usize) -> PinholeCamera {
    PinholeCamera::look_at(w, h, 30.0, Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), 1.0, 5.0).unwrap()
}

fn toy_dataset(sizes: &[(usize, usize)]) -> Dataset {
    Dataset {
        images: sizes
            .iter()
            .enumerate()
            .map(|(i, &(w, h))| ImageBuffer::from_fn(w, h, |x, y| [i as f64, x as f64, y as f64]))
            .collect(),
        cameras: sizes.iter().map(|&(w, h)| one_camera(w, h)).collect(),
        lightings: vec![None; sizes.len()],
        overlaps: Vec::new(),
        seed: 0,
    }
}

#[test]
fn one_pixel_dataset_repeats() {
    let d = toy_dataset(&[(1, 1)]);
    let b = sample_ray_batch(&d, &mut ChaCha8Rng::seed_from_u64(0), 5).unwrap();
    assert!(b.pixels.iter().all(|p| *p == (0, 0, 0)));
    assert!(b.gt.iter().all(|c| *c == [0.0; 3]));
    let empty = toy_dataset(&[]);
    assert!(sample_ray_batch(&empty, &mut ChaCha8Rng::seed_from_u64(0), 5).is_err());
}

#[test]
fn batches_are_uniform_over_pixels() {
    let d = toy_dataset(&[(3, 2), (2, 2)]);
    let n = 100_000;
    let b = sample_ray_batch(&d, &mut ChaCha8Rng::seed_from_u64(9), n).unwrap();
    let mut counts = std::collections::HashMap::new();
    for (p, g) in b.pixels.iter().zip(&b.gt) {
        assert_eq!(d.images[p.0].get(p.1, p.2), *g);
        *counts.entry(*p).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 10);
    let e = n as f64 / 10.0;
    let chi2: f64 = counts.values().map(|c| (*c as f64 - e).powi(2) / e).sum();
    // 9 degrees of freedom, p = 0.001
    assert!(chi2 < 27.88, "chi2 = {chi2}");
    let again = sample_ray_batch(&d, &mut ChaCha8Rng::seed_from_u64(9), n).unwrap();
    assert_eq!(again, b);
}

#[test]
fn zero_lr_leaves_parameters() {
    let d = dataset();
    for mode in [TrainMode::MlpOnly, TrainMode::Fused] {
        let mut c = config(mode);
        c.lr = 0.0;
        let mut s = TrainState::new(c, d.len()).unwrap();
        let before = s.store.clone();
        let rec = s.train_step(&d).unwrap();
        assert!(rec.local > 0.0 && rec.local.is_finite());
        for (id, _, t) in before.iter() {
            assert_eq!(t.values(), s.store.get(id).values());
        }
        assert_eq!(s.step, 1);
    }
}

#[test]
fn chunking_does_not_change_the_step() {
    let d = dataset();
    let mut a = TrainState::new(config(TrainMode::MlpOnly), d.len()).unwrap();
    let mut c = config(TrainMode::MlpOnly);
    c.chunk_rays = 1000;
    let mut b = TrainState::new(c, d.len()).unwrap();
    let (ra, rb) = (a.train_step(&d).unwrap(), b.train_step(&d).unwrap());
    assert!((ra.local - rb.local).abs() < 1e-12);
    for (id, _, t) in a.store.iter() {
        for (x, y) in t.values().iter().zip(b.store.get(id).values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn training_reduces_loss() {
    let d = dataset();
    let mut c = config(TrainMode::MlpOnly);
    c.steps = 100;
    let s0 = TrainState::new(c.clone(), d.len()).unwrap();
    let probe = s0.sample_step_batch(&d, 12345).unwrap();
    let (before, _) = s0.evaluate(&d, &probe).unwrap();
    let s = train(&d, c, None, |_, _| {}).unwrap();
    let (after, _) = s.evaluate(&d, &probe).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(s.history.len(), 100);
}

#[test]
fn same_seed_gives_identical_traces() {
    let d = dataset();
    for mode in [TrainMode::MlpOnly, TrainMode::Fused] {
        let mut c = config(mode);
        c.steps = 4;
        let a = train(&d, c.clone(), None, |_, _| {}).unwrap();
        let b = train(&d, c, None, |_, _| {}).unwrap();
        let bits = |s: &TrainState| s.history.iter().map(|r| (r.local.to_bits(), r.global.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_loss() {
    let d = dataset();
    for mode in [TrainMode::MlpOnly, TrainMode::Fused] {
        let mut c = config(mode);
        c.steps = 3;
        c.checkpoint_interval = 2;
        let dir = tempfile::tempdir().unwrap();
        let s = train(&d, c, Some(dir.path()), |_, _| {}).unwrap();
        assert!(checkpoint_path(dir.path(), 2).exists());
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "step,loss_local,loss_global,wall_seconds");
        assert_eq!(csv.lines().count(), 4);
        let back = TrainState::load_checkpoint(dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(back.step, 3);
        let batch = s.sample_step_batch(&d, back.step).unwrap();
        let (l0, g0) = s.evaluate(&d, &batch).unwrap();
        let (l1, g1) = back.evaluate(&d, &batch).unwrap();
        assert!((l0 - l1).abs() <= 1e-12 && (g0 - g1).abs() <= 1e-12);
        // resuming continues the same trajectory
        let (mut x, mut y) = (s.clone(), back);
        assert_eq!(x.train_step(&d).unwrap().local.to_bits(), y.train_step(&d).unwrap().local.to_bits());
        if mode == TrainMode::Fused {
            assert!(dir.path().join("global.nfccvol").exists());
        }
    }
}

#[test]
fn zero_steps_write_initial_checkpoint() {
    let d = dataset();
    let mut c = config(TrainMode::MlpOnly);
    c.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let s = train(&d, c, Some(dir.path()), |_, _| {}).unwrap();
    let back = TrainState::load_checkpoint(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(back.step, 0);
    assert_eq!(back.store, s.store);
}

#[test]
fn untaped_evaluation_matches_taped_loss() {
    let d = dataset();
    for mode in [TrainMode::MlpOnly, TrainMode::Fused] {
        let s = TrainState::new(config(mode), d.len()).unwrap();
        let b = s.sample_step_batch(&d, 0).unwrap();
        let rec = s.record_loss(&s.store, &d, &b, None).unwrap();
        let (l, g) = s.evaluate(&d, &b).unwrap();
        assert!((rec.local - l).abs() < 1e-12, "{mode:?}");
        assert!((rec.global - g).abs() < 1e-12, "{mode:?}");
    }
}

/// Random ±0.3 offsets on every bias so no ReLU input sits on its kink.
pub(crate) fn perturb_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with("/b") {
            store.get_mut(id).values_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.3..0.3));
        }
    }
}

fn gradient_check(mode: TrainMode, fusion: FusionMode) {
    let d = dataset();
    let mut c = config(mode);
    c.batch_size = 2;
    c.n_depth = 4;
    c.fusion.mode = fusion;
    let mut s = TrainState::new(c, d.len()).unwrap();
    perturb_biases(&mut s.store, 3);
    // a previous global volume so the gate sees both branches
    if mode == TrainMode::Fused {
        let b = s.sample_step_batch(&d, 1).unwrap();
        let rec = s.record_loss(&s.store, &d, &b, None).unwrap();
        s.global = rec.next_global;
    }
    let mut ids = s.lighting_ids.clone();
    for (k, id) in ids.drain(..).enumerate() {
        let v = s.store.get_mut(id).values_mut();
        v.iter_mut().enumerate().for_each(|(i, x)| *x += 0.05 * ((i + k) % 5) as f64);
    }
    let batch = s.sample_step_batch(&d, 0).unwrap();
    let rec = s.record_loss(&s.store, &d, &batch, None).unwrap();
    let grads = rec.tape.backward(rec.loss).unwrap().param_grads();
    let frozen = rec.normals.clone();
    let report = check_store(&s.store, &grads, 1e-5, |st| {
        let r = s.record_loss(st, &d, &batch, Some(&frozen))?;
        Ok(r.tape.scalar(r.loss))
    })
    .unwrap();
    assert!(!report.is_empty());
    for (name, err) in report {
        assert!(err <= 1e-4, "{mode:?} {name}: {err:e}");
    }
}

#[test]
fn mlp_pipeline_gradients() {
    gradient_check(TrainMode::MlpOnly, FusionMode::Gated);
}

#[test]
fn fused_pipeline_gradients() {
    gradient_check(TrainMode::Fused, FusionMode::Gated);
    gradient_check(TrainMode::Fused, FusionMode::CountAverage);
}
