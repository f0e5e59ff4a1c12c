// Relighting an already consistent set should not make it less consistent.
//
// Ignored by default: it does not hold at desk scale. A single-lighting set
// still has a small nonzero CD (views sample the surface at different pixel
// densities), and relit renders add reconstruction noise of ~0.02 RMS, several
// 256-bin histogram widths, which raises CD above the input. Measured at
// 64x64, 6000 steps: corrected 0.00135 vs input 0.00099.

use nerfcc::cli::{correct, evaluate, LightingSource};
use nerfcc::field::MlpFieldConfig;
use nerfcc::imaging::{synthesize, SynthSpec, Vec3};
use nerfcc::trainer::{train, TrainConfig, TrainMode};

const SPEC: &str = r#"
seed = 5

[scene]
primitives = [{ kind = "sphere", center = [0, 0, 0], radius = 0.8, density = 40, albedo = [0.8, 0.1, 0.1] }]

[ring]
views = 8
radius = 3.0
elevation = 0.8
fov_deg = 40
width = 64
height = 64
near = 1.5
far = 4.5

[[lightings]]
ambient = [0.6, 0.6, 0.6]
direction = [0.3, 1.0, -0.5]
strength = [0.4, 0.4, 0.4]
"#;

#[test]
#[ignore = "reconstruction noise exceeds histogram bin width; see header"]
fn consistent_set_stays_consistent() {
    let data = synthesize(&SynthSpec::parse(SPEC).unwrap(), None).unwrap().dataset();
    let mut c = TrainConfig::new(TrainMode::MlpOnly, Vec3::new(-1.2, -1.2, -1.2), Vec3::new(1.2, 1.2, 1.2)).unwrap();
    c.steps = 6000;
    c.batch_size = 64;
    c.n_depth = 32;
    c.lr = 1e-3;
    c.field = MlpFieldConfig {
        width: 64,
        depth: 3,
        n_freq: 2,
        density_bias: -1.0,
        ..c.field
    };
    let state = train(&data, c, None, |_, _| {}).unwrap();
    let corr = correct(&state, &data, &LightingSource::Mean).unwrap();
    let rows = evaluate(&data, &corr.images, corr.seconds, 256).unwrap();
    let (input, ours) = (&rows[0], &rows[2]);
    assert!(ours.cd <= input.cd + 1e-9, "corrected CD {} vs input CD {}", ours.cd, input.cd);
}
