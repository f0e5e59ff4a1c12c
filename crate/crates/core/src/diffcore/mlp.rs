use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{gemm, matmul, Activation, Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{ensure, Error, Result};

/// Fully connected network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// One activation per layer (`hidden.len() + 1` entries).
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// Hidden layers share `hidden_act`; the output layer uses `output_act`.
    pub fn uniform(input: usize, hidden: Vec<usize>, output: usize, hidden_act: Activation, output_act: Activation, seed: u64) -> Self {
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(output_act);
        Self {
            input,
            hidden,
            output,
            activations,
            seed,
        }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.output);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input >= 1 && self.output >= 1 && self.hidden.iter().all(|h| *h >= 1),
            "MLP widths must be >= 1"
        );
        ensure!(
            self.activations.len() == self.hidden.len() + 1,
            "MLP has {} layers but {} activations",
            self.hidden.len() + 1,
            self.activations.len()
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// An MLP whose weights live in a [`ParamStore`]. Weights are `in x out`
/// matrices applied as `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Per-layer pre- and post-activation values from an untaped forward pass.
pub struct MlpTrace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    pub rows: usize,
}

impl MlpTrace {
    /// Copies layer values recorded by [`Mlp::forward_traced`].
    pub fn from_tape(tape: &Tape, trace: &[(Var, Var)]) -> Self {
        let rows = trace.first().map_or(0, |(z, _)| tape.shape(*z).0);
        Self {
            pre: trace.iter().map(|(z, _)| tape.value(*z).to_vec()).collect(),
            post: trace.iter().map(|(_, h)| tape.value(*h).to_vec()).collect(),
            rows,
        }
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }
}

impl Mlp {
    /// Registers freshly initialized parameters under `prefix/<layer>/{w,b}`.
    /// Weights are uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn register(spec: MlpSpec, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            let weight = store.insert(format!("{prefix}/{l}/w"), Tensor::new(vec![fan_in, fan_out], w)?)?;
            let bias = store.insert(format!("{prefix}/{l}/b"), Tensor::zeros(vec![1, fan_out]))?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self { spec, layers })
    }

    /// Looks up parameters previously registered under `prefix`.
    pub fn attach(spec: MlpSpec, store: &ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let find = |name: String, shape: [usize; 2]| -> Result<ParamId> {
                let id = store.id(&name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            };
            layers.push(Layer {
                weight: find(format!("{prefix}/{l}/w"), [fan_in, fan_out])?,
                bias: find(format!("{prefix}/{l}/b"), [1, fan_out])?,
            });
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn weight(&self, layer: usize) -> ParamId {
        self.layers[layer].weight
    }

    pub fn bias(&self, layer: usize) -> ParamId {
        self.layers[layer].bias
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.spec.input {
            return Err(Error::shape(format!("MLP expects {} inputs, got {cols}", self.spec.input)));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = tape.activation(z, *act);
        }
        Ok(h)
    }

    /// Records the forward pass and returns every layer's pre- and
    /// post-activation nodes alongside the output.
    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<(Var, Var)>)> {
        let (_, cols) = tape.shape(x);
        if cols != self.spec.input {
            return Err(Error::shape(format!("MLP expects {} inputs, got {cols}", self.spec.input)));
        }
        let mut h = x;
        let mut trace = Vec::with_capacity(self.layers.len());
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            let z = tape.matmul(h, w);
            let z = tape.add_bias(z, b);
            h = tape.activation(z, *act);
            trace.push((z, h));
        }
        Ok((h, trace))
    }

    /// Untaped forward pass keeping every layer's values.
    pub fn eval_traced(&self, store: &ParamStore, x: &[f64], rows: usize) -> Result<MlpTrace> {
        if x.len() != rows * self.spec.input {
            return Err(Error::shape(format!(
                "MLP input has {} values, expected {rows}x{}",
                x.len(),
                self.spec.input
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, ((fan_in, fan_out), act)) in self.spec.layer_dims().into_iter().zip(&self.spec.activations).enumerate() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let mut z = matmul(input, store.get(self.layers[l].weight).values(), rows, fan_in, fan_out);
            let b = store.get(self.layers[l].bias).values();
            for row in z.chunks_mut(fan_out) {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            let y = z.iter().map(|v| act.apply(*v)).collect();
            pre.push(z);
            post.push(y);
        }
        Ok(MlpTrace { pre, post, rows })
    }

    pub fn eval(&self, store: &ParamStore, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        Ok(self.eval_traced(store, x, rows)?.post.pop().expect("at least one layer"))
    }

    /// Vector-Jacobian product with respect to the network input:
    /// `seed` (rows x output) is pulled back to (rows x input).
    pub fn input_vjp(&self, store: &ParamStore, trace: &MlpTrace, seed: &[f64]) -> Vec<f64> {
        let rows = trace.rows;
        let dims = self.spec.layer_dims();
        let mut g = seed.to_vec();
        for l in (0..self.layers.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let act = self.spec.activations[l];
            for ((gi, x), y) in g.iter_mut().zip(&trace.pre[l]).zip(&trace.post[l]) {
                *gi *= act.derivative(*x, *y);
            }
            let w = store.get(self.layers[l].weight).values();
            let mut next = vec![0.0; rows * fan_in];
            gemm(rows, fan_out, fan_in, &g, (fan_out as isize, 1), w, (1, fan_out as isize), &mut next, 0.0);
            g = next;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_relu_gives_zero() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::uniform(3, vec![4], 2, Activation::Relu, Activation::Relu, 0);
        let mlp = Mlp::register(spec, &mut store, "m").unwrap();
        for id in mlp.param_ids() {
            store.get_mut(id).values_mut().fill(0.0);
        }
        assert_eq!(mlp.eval(&store, &[1.0, 2.0, 3.0], 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::uniform(1, vec![], 1, Activation::None, Activation::None, 0);
        let mlp = Mlp::register(spec, &mut store, "id").unwrap();
        store.get_mut(mlp.weight(0)).values_mut()[0] = 1.0;
        assert_eq!(mlp.eval(&store, &[0.25, -4.0], 2).unwrap(), vec![0.25, -4.0]);
        let mut tape = Tape::new();
        let x = tape.constant(2, 1, vec![0.25, -4.0]);
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &[0.25, -4.0]);
    }

    #[test]
    fn softplus_of_zero() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::uniform(2, vec![], 1, Activation::Softplus, Activation::Softplus, 0);
        let mlp = Mlp::register(spec, &mut store, "s").unwrap();
        store.get_mut(mlp.weight(0)).values_mut().fill(0.0);
        let y = mlp.eval(&store, &[0.3, 0.7], 1).unwrap()[0];
        assert!((y - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_and_bad_spec() {
        let mut store = ParamStore::new();
        let mlp = Mlp::register(MlpSpec::uniform(3, vec![2], 1, Activation::Relu, Activation::None, 0), &mut store, "m").unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![1.0, 2.0]);
        assert!(mlp.forward(&mut tape, &store, x).is_err());
        assert!(mlp.eval(&store, &[1.0], 1).is_err());
        let bad = MlpSpec {
            input: 3,
            hidden: vec![2],
            output: 1,
            activations: vec![Activation::Relu],
            seed: 0,
        };
        assert!(Mlp::register(bad, &mut store, "x").is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = MlpSpec::uniform(5, vec![7], 3, Activation::Relu, Activation::None, 42);
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Mlp::register(spec.clone(), &mut a, "m").unwrap();
        Mlp::register(spec, &mut b, "m").unwrap();
        assert_eq!(a, b);
        let w = a.by_name("m/0/w").unwrap();
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(w.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut store = ParamStore::new();
        let spec = MlpSpec::uniform(3, vec![6, 5], 2, Activation::Softplus, Activation::Sigmoid, 9);
        let mlp = Mlp::register(spec, &mut store, "m").unwrap();
        let x = [0.3, -0.8, 0.5];
        let seed = [0.7, -1.1];
        let trace = mlp.eval_traced(&store, &x, 1).unwrap();
        let g = mlp.input_vjp(&store, &trace, &seed);
        let f = |x: &[f64]| {
            let y = mlp.eval(&store, x, 1).unwrap();
            Ok(y[0] * seed[0] + y[1] * seed[1])
        };
        let err = crate::diffcore::finite_diff_check(f, &x, &g, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
