//! Tape operations for differentiable compositing and shading.

use std::sync::Arc;

use crate::diffcore::{CustomOp, Tape, Var};
use crate::field::SH_COUNT;

/// Per-sample compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))`
/// for rays of `n` consecutive samples. Input and output are `(rays * n, 1)`.
struct CompositeWeights {
    sigma: Var,
    delta: Arc<Vec<f64>>,
    n: usize,
}

/// Forward values: weights and the transmittance after each sample.
pub(crate) fn weights_and_exit(sigma: &[f64], delta: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; sigma.len()];
    let mut after = vec![0.0; sigma.len()];
    for r in 0..sigma.len() / n {
        let mut acc = 0.0f64;
        for i in r * n..(r + 1) * n {
            let t = (-acc).exp();
            acc += sigma[i] * delta[i];
            let next = (-acc).exp();
            w[i] = t * -(-sigma[i] * delta[i]).exp_m1();
            after[i] = next;
        }
    }
    (w, after)
}

impl CustomOp for CompositeWeights {
    fn name(&self) -> &'static str {
        "composite_weights"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.sigma]
    }

    fn backward(&self, tape: &Tape, output: &[f64], g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let sigma = tape.value(self.sigma);
        let (_, after) = weights_and_exit(sigma, &self.delta, self.n);
        let mut ds = vec![0.0; sigma.len()];
        for r in 0..sigma.len() / self.n {
            // dL/dx_k = g_k T_{k+1} - sum_{i>k} g_i w_i, x = sigma * delta
            let mut suffix = 0.0;
            for k in (r * self.n..(r + 1) * self.n).rev() {
                let dx = g[k] * after[k] - suffix;
                ds[k] = dx * self.delta[k];
                suffix += g[k] * output[k];
            }
        }
        vec![Some(ds)]
    }
}

pub(crate) fn composite_weights(tape: &mut Tape, sigma: Var, delta: Arc<Vec<f64>>, n: usize) -> Var {
    let (rows, _) = tape.shape(sigma);
    let (w, _) = weights_and_exit(tape.value(sigma), &delta, n);
    tape.custom(Box::new(CompositeWeights { sigma, delta, n }), rows, 1, w)
}

/// `out[r, c] = sum_i w[r n + i] v[r n + i, c]`.
struct RayWeightedSum {
    weights: Var,
    values: Var,
    n: usize,
}

impl CustomOp for RayWeightedSum {
    fn name(&self) -> &'static str {
        "ray_weighted_sum"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.weights, self.values]
    }

    fn backward(&self, tape: &Tape, _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let w = tape.value(self.weights);
        let v = tape.value(self.values);
        let c = tape.shape(self.values).1;
        let dw = needs[0].then(|| {
            (0..w.len())
                .map(|s| {
                    let r = s / self.n;
                    (0..c).map(|k| g[r * c + k] * v[s * c + k]).sum()
                })
                .collect()
        });
        let dv = needs[1].then(|| {
            let mut dv = vec![0.0; v.len()];
            for s in 0..w.len() {
                let r = s / self.n;
                for k in 0..c {
                    dv[s * c + k] = w[s] * g[r * c + k];
                }
            }
            dv
        });
        vec![dw, dv]
    }
}

pub(crate) fn ray_weighted_sum(tape: &mut Tape, weights: Var, values: Var, n: usize) -> Var {
    let w = tape.value(weights);
    let v = tape.value(values);
    let c = tape.shape(values).1;
    let rays = w.len() / n;
    let mut out = vec![0.0; rays * c];
    for s in 0..w.len() {
        let r = s / n;
        for k in 0..c {
            out[r * c + k] += w[s] * v[s * c + k];
        }
    }
    tape.custom(Box::new(RayWeightedSum { weights, values, n }), rays, c, out)
}

/// `(1 - sum_i w_i) * background` per ray, `(rays, 3)`.
struct Background {
    weights: Var,
    rgb: [f64; 3],
    n: usize,
}

impl CustomOp for Background {
    fn name(&self) -> &'static str {
        "background"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.weights]
    }

    fn backward(&self, tape: &Tape, _output: &[f64], g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let len = tape.value(self.weights).len();
        let d = (0..len)
            .map(|s| {
                let r = s / self.n;
                -(0..3).map(|c| g[r * 3 + c] * self.rgb[c]).sum::<f64>()
            })
            .collect();
        vec![Some(d)]
    }
}

pub(crate) fn background(tape: &mut Tape, weights: Var, rgb: [f64; 3], n: usize) -> Var {
    let w = tape.value(weights);
    let rays = w.len() / n;
    let mut out = Vec::with_capacity(rays * 3);
    for r in 0..rays {
        let residual = 1.0 - w[r * n..(r + 1) * n].iter().sum::<f64>();
        out.extend(rgb.iter().map(|b| residual * b));
    }
    tape.custom(Box::new(Background { weights, rgb, n }), rays, 3, out)
}

/// `out[r, c] = A[r, c] * sum_k L_{img(r)}[k, c] b[r, k]`.
struct ShadeSh {
    albedo: Var,
    lights: Vec<Var>,
    basis: Vec<f64>,
    image: Vec<usize>,
}

impl CustomOp for ShadeSh {
    fn name(&self) -> &'static str {
        "shade_sh"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.albedo];
        v.extend(&self.lights);
        v
    }

    fn backward(&self, tape: &Tape, _output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let a = tape.value(self.albedo);
        let mut da = needs[0].then(|| vec![0.0; a.len()]);
        let mut dl: Vec<Option<Vec<f64>>> = self
            .lights
            .iter()
            .enumerate()
            .map(|(i, _)| needs[i + 1].then(|| vec![0.0; SH_COUNT * 3]))
            .collect();
        for (r, &img) in self.image.iter().enumerate() {
            let l = tape.value(self.lights[img]);
            let b = &self.basis[r * SH_COUNT..(r + 1) * SH_COUNT];
            for c in 0..3 {
                let gc = g[r * 3 + c];
                if let Some(da) = da.as_mut() {
                    let irr: f64 = (0..SH_COUNT).map(|k| l[k * 3 + c] * b[k]).sum();
                    da[r * 3 + c] = gc * irr;
                }
                if let Some(d) = dl[img].as_mut() {
                    for k in 0..SH_COUNT {
                        d[k * 3 + c] += gc * a[r * 3 + c] * b[k];
                    }
                }
            }
        }
        let mut out = vec![da];
        out.append(&mut dl);
        out
    }
}

pub(crate) fn shade_sh(tape: &mut Tape, albedo: Var, lights: &[Var], basis: Vec<f64>, image: Vec<usize>) -> Var {
    let a = tape.value(albedo);
    let mut out = vec![0.0; a.len()];
    for (r, &img) in image.iter().enumerate() {
        let l = tape.value(lights[img]);
        let b = &basis[r * SH_COUNT..(r + 1) * SH_COUNT];
        for c in 0..3 {
            let irr: f64 = (0..SH_COUNT).map(|k| l[k * 3 + c] * b[k]).sum();
            out[r * 3 + c] = a[r * 3 + c] * irr;
        }
    }
    let rays = image.len();
    tape.custom(
        Box::new(ShadeSh {
            albedo,
            lights: lights.to_vec(),
            basis,
            image,
        }),
        rays,
        3,
        out,
    )
}
