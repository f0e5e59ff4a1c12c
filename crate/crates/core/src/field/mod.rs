//! Scene representations queried by the renderer, and SH lighting.
//!
//! A field maps a world point to a non-negative density and an RGB albedo in
//! `[0, 1]`. The trainable MLP field keeps its weights in a [`ParamStore`];
//! [`SceneField`] is the read-only query interface shared with analytic test
//! fields and feature-volume fields.

pub mod sh;

use crate::diffcore::{
    encoded_width, pos_encode_into, pos_encode_vjp, Activation, Checkpoint, Mlp, MlpSpec, MlpTrace, ParamStore, Tape,
    Tensor, Var,
};
use crate::error::{ensure, Error, Result};
use crate::fusion::VolumeField;
use crate::imaging::Vec3;

pub use sh::{sh_basis, sh_basis_unchecked, shade, ShLighting, SH_COUNT};

/// Read-only density/albedo queries.
pub trait SceneField: Sync {
    /// Density and albedo at each point.
    fn query(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])>;

    /// Spatial density gradient at each point. Defaults to central
    /// differences with step [`SceneField::gradient_step`].
    fn density_gradients(&self, points: &[Vec3]) -> Vec<Vec3> {
        central_difference_gradients(self, points, self.gradient_step())
    }

    fn gradient_step(&self) -> f64 {
        1e-4
    }
}

/// Density gradient by central differences of [`SceneField::query`].
pub fn central_difference_gradients<F: SceneField + ?Sized>(field: &F, points: &[Vec3], h: f64) -> Vec<Vec3> {
    let mut probes = Vec::with_capacity(points.len() * 6);
    for p in points {
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            probes.push(p + e);
            probes.push(p - e);
        }
    }
    let d = field.query(&probes);
    points
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let b = i * 6;
            Vec3::new(
                (d[b].0 - d[b + 1].0) / (2.0 * h),
                (d[b + 2].0 - d[b + 3].0) / (2.0 * h),
                (d[b + 4].0 - d[b + 5].0) / (2.0 * h),
            )
        })
        .collect()
}

fn check_point(p: &Vec3) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("query point {p:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpFieldConfig {
    /// Trunk layer width.
    pub width: usize,
    /// Number of trunk layers.
    pub depth: usize,
    pub n_freq: usize,
    /// Positions are divided by this before encoding.
    pub scale: f64,
    pub activation: Activation,
    /// Initial pre-softplus density bias.
    pub density_bias: f64,
    pub seed: u64,
}

impl Default for MlpFieldConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 4,
            n_freq: 6,
            scale: 1.0,
            activation: Activation::Relu,
            density_bias: -10.0,
            seed: 0,
        }
    }
}

impl MlpFieldConfig {
    fn to_meta(&self) -> Tensor {
        let v = vec![
            self.width as f64,
            self.depth as f64,
            self.n_freq as f64,
            self.scale,
            self.activation.code(),
            self.density_bias,
            self.seed as f64,
        ];
        Tensor::new(vec![v.len()], v).expect("meta length")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let v = t.values();
        ensure!(v.len() == 7, "meta/field needs 7 values");
        Ok(Self {
            width: v[0] as usize,
            depth: v[1] as usize,
            n_freq: v[2] as usize,
            scale: v[3],
            activation: Activation::from_code(v[4]).ok_or_else(|| Error::invalid("unknown activation code"))?,
            density_bias: v[5],
            seed: v[6] as u64,
        })
    }
}

/// Density and albedo from a positional-encoded MLP: a shared trunk, a
/// softplus density head and a sigmoid albedo head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    config: MlpFieldConfig,
    trunk: Mlp,
    density_head: Mlp,
    albedo_head: Mlp,
}

/// Tape nodes produced by [`MlpField::record`].
pub struct TapedField {
    /// `(n, 1)` densities.
    pub sigma: Var,
    /// `(n, 3)` albedos.
    pub albedo: Var,
    trunk: Vec<(Var, Var)>,
    density: Vec<(Var, Var)>,
}

impl MlpField {
    pub fn register(config: MlpFieldConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let specs = Self::specs(&config)?;
        let trunk = Mlp::register(specs.0, store, &format!("{prefix}/trunk"))?;
        let density_head = Mlp::register(specs.1, store, &format!("{prefix}/density"))?;
        let albedo_head = Mlp::register(specs.2, store, &format!("{prefix}/albedo"))?;
        store.get_mut(density_head.bias(0)).values_mut().fill(config.density_bias);
        Ok(Self {
            config,
            trunk,
            density_head,
            albedo_head,
        })
    }

    pub fn attach(config: MlpFieldConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        let specs = Self::specs(&config)?;
        Ok(Self {
            trunk: Mlp::attach(specs.0, store, &format!("{prefix}/trunk"))?,
            density_head: Mlp::attach(specs.1, store, &format!("{prefix}/density"))?,
            albedo_head: Mlp::attach(specs.2, store, &format!("{prefix}/albedo"))?,
            config,
        })
    }

    fn specs(c: &MlpFieldConfig) -> Result<(MlpSpec, MlpSpec, MlpSpec)> {
        ensure!(c.depth >= 1 && c.width >= 1, "MLP field needs depth and width >= 1");
        ensure!(c.scale > 0.0, "MLP field scale must be positive");
        let trunk = MlpSpec::uniform(
            encoded_width(c.n_freq),
            vec![c.width; c.depth - 1],
            c.width,
            c.activation,
            c.activation,
            c.seed,
        );
        let density = MlpSpec::uniform(c.width, vec![], 1, Activation::None, Activation::Softplus, c.seed.wrapping_add(1));
        let albedo = MlpSpec::uniform(c.width, vec![], 3, Activation::None, Activation::Sigmoid, c.seed.wrapping_add(2));
        Ok((trunk, density, albedo))
    }

    pub fn config(&self) -> &MlpFieldConfig {
        &self.config
    }

    pub fn density_head(&self) -> &Mlp {
        &self.density_head
    }

    pub fn albedo_head(&self) -> &Mlp {
        &self.albedo_head
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn push_meta(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push(format!("meta/{prefix}"), self.config.to_meta());
    }

    pub fn config_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<MlpFieldConfig> {
        MlpFieldConfig::from_meta(ckpt.require(&format!("meta/{prefix}"))?)
    }

    fn normalized(&self, p: &Vec3) -> [f64; 3] {
        let s = self.config.scale;
        [p.x / s, p.y / s, p.z / s]
    }

    pub fn encode(&self, points: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len() * encoded_width(self.config.n_freq));
        for p in points {
            pos_encode_into(&self.normalized(p), self.config.n_freq, &mut out);
        }
        out
    }

    /// Records density and albedo of `points` on the tape.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, points: &[Vec3]) -> Result<TapedField> {
        let enc = tape.constant(points.len(), encoded_width(self.config.n_freq), self.encode(points));
        let (h, trunk) = self.trunk.forward_traced(tape, store, enc)?;
        let (sigma, density) = self.density_head.forward_traced(tape, store, h)?;
        let albedo = self.albedo_head.forward(tape, store, h)?;
        Ok(TapedField {
            sigma,
            albedo,
            trunk,
            density,
        })
    }

    /// Analytic density gradients at the points of a prior [`MlpField::record`].
    pub fn density_gradients_from_tape(&self, tape: &Tape, store: &ParamStore, taped: &TapedField, points: &[Vec3]) -> Vec<Vec3> {
        let trunk = MlpTrace::from_tape(tape, &taped.trunk);
        let head = MlpTrace::from_tape(tape, &taped.density);
        self.gradients_from_traces(store, &trunk, &head, points)
    }

    fn gradients_from_traces(&self, store: &ParamStore, trunk: &MlpTrace, head: &MlpTrace, points: &[Vec3]) -> Vec<Vec3> {
        let ones = vec![1.0; points.len()];
        let g_h = self.density_head.input_vjp(store, head, &ones);
        let g_enc = self.trunk.input_vjp(store, trunk, &g_h);
        let w = encoded_width(self.config.n_freq);
        points
            .iter()
            .zip(g_enc.chunks(w))
            .map(|(p, g)| {
                let d = pos_encode_vjp(&self.normalized(p), self.config.n_freq, g);
                Vec3::new(d[0], d[1], d[2]) / self.config.scale
            })
            .collect()
    }

    pub fn query_batch(&self, store: &ParamStore, points: &[Vec3]) -> Result<Vec<(f64, [f64; 3])>> {
        for p in points {
            check_point(p)?;
        }
        let enc = self.encode(points);
        let h = self.trunk.eval(store, &enc, points.len())?;
        let sigma = self.density_head.eval(store, &h, points.len())?;
        let albedo = self.albedo_head.eval(store, &h, points.len())?;
        Ok(sigma
            .into_iter()
            .zip(albedo.chunks(3))
            .map(|(s, a)| (s, [a[0], a[1], a[2]]))
            .collect())
    }

    pub fn query_density(&self, store: &ParamStore, p: &Vec3) -> Result<f64> {
        Ok(self.query_batch(store, std::slice::from_ref(p))?[0].0)
    }

    pub fn query_albedo(&self, store: &ParamStore, p: &Vec3) -> Result<[f64; 3]> {
        Ok(self.query_batch(store, std::slice::from_ref(p))?[0].1)
    }

    pub fn analytic_density_gradients(&self, store: &ParamStore, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let enc = self.encode(points);
        let trunk = self.trunk.eval_traced(store, &enc, points.len())?;
        let head = self.density_head.eval_traced(store, trunk.output(), points.len())?;
        Ok(self.gradients_from_traces(store, &trunk, &head, points))
    }

    pub fn view<'a>(&'a self, store: &'a ParamStore) -> MlpFieldView<'a> {
        MlpFieldView { field: self, store }
    }
}

/// An [`MlpField`] bound to its parameter values.
#[derive(Clone, Copy)]
pub struct MlpFieldView<'a> {
    pub field: &'a MlpField,
    pub store: &'a ParamStore,
}

impl SceneField for MlpFieldView<'_> {
    fn query(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        self.field.query_batch(self.store, points).expect("finite query points")
    }

    fn density_gradients(&self, points: &[Vec3]) -> Vec<Vec3> {
        self.field
            .analytic_density_gradients(self.store, points)
            .expect("encoded width matches trunk")
    }
}

/// The two scene representations the pipeline trains.
#[derive(Clone, Debug)]
pub enum RadianceField {
    Mlp(MlpField),
    Volume(VolumeField),
}

impl RadianceField {
    pub fn view<'a>(&'a self, store: &'a ParamStore) -> Box<dyn SceneField + 'a> {
        match self {
            RadianceField::Mlp(f) => Box::new(f.view(store)),
            RadianceField::Volume(v) => Box::new(v.view(store)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_store;
    use rand::{Rng, SeedableRng};

    fn small(seed: u64) -> (ParamStore, MlpField) {
        let mut store = ParamStore::new();
        let cfg = MlpFieldConfig {
            width: 8,
            depth: 2,
            n_freq: 2,
            scale: 1.5,
            activation: Activation::Softplus,
            density_bias: 0.3,
            seed,
        };
        let f = MlpField::register(cfg, &mut store, "field").unwrap();
        (store, f)
    }

    #[test]
    fn zeroed_density_head_gives_softplus_bias() {
        let mut store = ParamStore::new();
        let f = MlpField::register(MlpFieldConfig::default(), &mut store, "field").unwrap();
        store.get_mut(f.density_head().weight(0)).values_mut().fill(0.0);
        for p in [Vec3::zeros(), Vec3::new(3.0, -1.0, 0.2)] {
            let s = f.query_density(&store, &p).unwrap();
            assert!((s - 4.5399e-5).abs() < 1e-8, "{s}");
        }
    }

    #[test]
    fn zero_params_albedo_half() {
        let (mut store, f) = small(1);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).values_mut().fill(0.0);
        }
        assert_eq!(f.query_albedo(&store, &Vec3::new(0.1, 0.2, 0.3)).unwrap(), [0.5; 3]);
    }

    #[test]
    fn albedo_and_density_ranges() {
        let mut store = ParamStore::new();
        let f = MlpField::register(MlpFieldConfig { seed: 4, density_bias: 0.0, ..Default::default() }, &mut store, "field").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        for (s, a) in f.query_batch(&store, &pts).unwrap() {
            assert!(s >= 0.0);
            assert!(a.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn non_finite_point_errors() {
        let (store, f) = small(0);
        assert!(f.query_density(&store, &Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (store, f) = small(3);
        let pts = vec![Vec3::new(0.2, -0.4, 0.9), Vec3::new(-1.1, 0.3, 0.05)];
        let analytic = f.analytic_density_gradients(&store, &pts).unwrap();
        let fd = central_difference_gradients(&f.view(&store), &pts, 1e-5);
        for (a, b) in analytic.iter().zip(&fd) {
            assert!((a - b).norm() <= 1e-6 * (1.0 + a.norm()), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn parameter_gradients_pass_finite_difference_check() {
        let (store, f) = small(8);
        let pts = vec![Vec3::new(0.2, -0.4, 0.9), Vec3::new(-0.6, 0.3, 0.1), Vec3::new(0.0, 0.7, -0.3)];
        let w = [0.7, -0.3, 0.4, 1.1];
        let loss = |store: &ParamStore| -> Result<f64> {
            let q = f.query_batch(store, &pts)?;
            Ok(q.iter().map(|(s, a)| w[0] * s + w[1] * a[0] + w[2] * a[1] + w[3] * a[2]).sum())
        };
        let mut tape = Tape::new();
        let taped = f.record(&mut tape, &store, &pts).unwrap();
        let ws = tape.constant(pts.len(), 1, vec![w[0]; pts.len()]);
        let wa = tape.constant(pts.len(), 3, pts.iter().flat_map(|_| [w[1], w[2], w[3]]).collect());
        let a = tape.mul(taped.sigma, ws);
        let b = tape.mul(taped.albedo, wa);
        let sa = tape.sum(a);
        let sb = tape.sum(b);
        let total = tape.add(sa, sb);
        assert!((tape.scalar(total) - loss(&store).unwrap()).abs() < 1e-12);
        let grads = tape.backward(total).unwrap().param_grads();
        for (name, err) in check_store(&store, &grads, 1e-5, loss).unwrap() {
            assert!(err <= 1e-4, "{name}: {err:e}");
        }
    }

    #[test]
    fn taped_gradients_match_untaped() {
        let (store, f) = small(5);
        let pts = vec![Vec3::new(0.3, 0.1, -0.2)];
        let mut tape = Tape::new();
        let t = f.record(&mut tape, &store, &pts).unwrap();
        let a = f.density_gradients_from_tape(&tape, &store, &t, &pts);
        let b = f.analytic_density_gradients(&store, &pts).unwrap();
        assert_eq!(a, b);
    }
}
