//! Tape operations used by the fusion pipeline.

use crate::diffcore::{CustomOp, Tape, Var};

/// 3x3 windows with replicate padding: `(h w, c)` to `(h w, 9 c)`, window
/// entries ordered `(dy, dx, channel)`.
pub(crate) fn im2col(values: &[f64], width: usize, height: usize, channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 9);
    for y in 0..height {
        for x in 0..width {
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    let base = (yy * width + xx) * channels;
                    out.extend_from_slice(&values[base..base + channels]);
                }
            }
        }
    }
    out
}

struct Im2Col {
    input: Var,
    width: usize,
    height: usize,
}

impl CustomOp for Im2Col {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, tape: &Tape, _output: &[f64], g: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (rows, c) = tape.shape(self.input);
        let mut d = vec![0.0; rows * c];
        let (w, h) = (self.width, self.height);
        let mut k = 0;
        for y in 0..h {
            for x in 0..w {
                for dy in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    for dx in -1i64..=1 {
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let base = (yy * w + xx) * c;
                        for ch in 0..c {
                            d[base + ch] += g[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        vec![Some(d)]
    }
}

pub(crate) fn im2col_taped(tape: &mut Tape, input: Var, width: usize, height: usize) -> Var {
    let (rows, c) = tape.shape(input);
    assert_eq!(rows, width * height, "im2col needs one row per pixel");
    let out = im2col(tape.value(input), width, height, c);
    tape.custom(Box::new(Im2Col { input, width, height }), rows, 9 * c, out)
}

/// Per-channel population mean and variance by Welford's update over the
/// values in ascending order. The result does not depend on input order,
/// and duplicated inputs give a variance of exactly zero.
pub fn mean_var(samples: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let f = samples.first().map_or(0, |s| s.len());
    let mut mean = vec![0.0; f];
    let mut var = vec![0.0; f];
    let mut column: Vec<f64> = Vec::with_capacity(samples.len());
    for c in 0..f {
        column.clear();
        column.extend(samples.iter().map(|s| s[c]));
        column.sort_by(f64::total_cmp);
        let (mut m, mut m2) = (0.0, 0.0);
        for (k, x) in column.iter().enumerate() {
            let d = x - m;
            m += d / (k + 1) as f64;
            m2 += d * (x - m);
        }
        mean[c] = m;
        var[c] = (m2 / column.len() as f64).max(0.0);
    }
    (mean, var)
}

/// Groups of rows drawn from several `(rows, f)` inputs, reduced to
/// `(groups, 2 f)` rows of `[mean, var]`.
struct GroupMeanVar {
    inputs: Vec<Var>,
    /// `(input, row)` members of each group.
    groups: Vec<Vec<(usize, usize)>>,
    f: usize,
}

impl GroupMeanVar {
    fn forward(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.groups.len() * 2 * self.f);
        let mut rows: Vec<&[f64]> = Vec::new();
        for g in &self.groups {
            rows.clear();
            rows.extend(g.iter().map(|(i, r)| &tape.value(self.inputs[*i])[r * self.f..(r + 1) * self.f]));
            let (m, v) = mean_var(&rows);
            out.extend(m);
            out.extend(v);
        }
        out
    }
}

impl CustomOp for GroupMeanVar {
    fn name(&self) -> &'static str {
        "group_mean_var"
    }

    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, tape: &Tape, output: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let f = self.f;
        let mut grads: Vec<Option<Vec<f64>>> = self
            .inputs
            .iter()
            .zip(needs)
            .map(|(v, need)| need.then(|| vec![0.0; tape.value(*v).len()]))
            .collect();
        for (gi, members) in self.groups.iter().enumerate() {
            let n = members.len() as f64;
            let mean = &output[gi * 2 * f..gi * 2 * f + f];
            let gm = &g[gi * 2 * f..gi * 2 * f + f];
            let gv = &g[gi * 2 * f + f..(gi + 1) * 2 * f];
            for (i, r) in members {
                let Some(d) = grads[*i].as_mut() else { continue };
                let x = &tape.value(self.inputs[*i])[r * f..(r + 1) * f];
                for c in 0..f {
                    d[r * f + c] += gm[c] / n + gv[c] * 2.0 * (x[c] - mean[c]) / n;
                }
            }
        }
        grads
    }
}

pub(crate) fn group_mean_var(tape: &mut Tape, inputs: Vec<Var>, groups: Vec<Vec<(usize, usize)>>) -> Var {
    let f = inputs.first().map_or(0, |v| tape.shape(*v).1);
    assert!(groups.iter().all(|g| !g.is_empty()), "empty feature group");
    let op = GroupMeanVar { inputs, groups, f };
    let out = op.forward(tape);
    let rows = op.groups.len();
    tape.custom(Box::new(op), rows, 2 * f, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;

    #[test]
    fn im2col_constant_and_border() {
        let img: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 3x2, 1 channel
        let cols = im2col(&img, 3, 2, 1);
        // top-left window replicates the corner
        assert_eq!(&cols[0..9], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 3.0, 3.0, 4.0]);
        assert_eq!(cols.len(), 54);
    }

    #[test]
    fn im2col_gradient() {
        let x0: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).sin()).collect();
        let w: Vec<f64> = (0..24 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut t = Tape::new();
        let x = t.variable(12, 2, x0.clone());
        let c = im2col_taped(&mut t, x, 4, 3);
        let wv = t.constant(12, 18, w.clone());
        let m = t.mul(c, wv);
        let s = t.sum(m);
        let g = t.backward(s).unwrap().of(x).unwrap().to_vec();
        let f = |v: &[f64]| Ok(im2col(v, 4, 3, 2).iter().zip(&w).map(|(a, b)| a * b).sum());
        assert!(finite_diff_check(f, &x0, &g, 1e-6).unwrap() < 1e-8);
    }

    #[test]
    fn mean_var_examples() {
        let (m, v) = mean_var(&[&[1.0], &[3.0]]);
        assert_eq!((m[0], v[0]), (2.0, 1.0));
        let (_, v) = mean_var(&[&[0.1, 0.7]]);
        assert_eq!(v, vec![0.0, 0.0]);
        let x = [0.1, 0.2, 0.30000000000000004];
        let (_, v) = mean_var(&[&x, &x, &x, &x, &x]);
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn group_mean_var_gradient() {
        let a0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin()).collect();
        let b0: Vec<f64> = (0..6).map(|i| (i as f64 * 0.4).cos()).collect();
        let groups = vec![vec![(0, 0), (1, 2), (0, 3)], vec![(1, 0)], vec![(0, 1), (1, 1)]];
        let wts: Vec<f64> = (0..12).map(|i| 0.5 + 0.1 * i as f64).collect();
        let run = |a: &[f64], b: &[f64]| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let av = t.variable(4, 2, a.to_vec());
            let bv = t.variable(3, 2, b.to_vec());
            let o = group_mean_var(&mut t, vec![av, bv], groups.clone());
            let w = t.constant(3, 4, wts.clone());
            let m = t.mul(o, w);
            let s = t.sum(m);
            (t, av, bv, s)
        };
        let (t, av, bv, s) = run(&a0, &b0);
        let grads = t.backward(s).unwrap();
        let ga = grads.of(av).unwrap().to_vec();
        let gb = grads.of(bv).unwrap().to_vec();
        let fa = |x: &[f64]| {
            let (t, _, _, s) = run(x, &b0);
            Ok(t.scalar(s))
        };
        let fb = |x: &[f64]| {
            let (t, _, _, s) = run(&a0, x);
            Ok(t.scalar(s))
        };
        assert!(finite_diff_check(fa, &a0, &ga, 1e-6).unwrap() < 1e-7);
        assert!(finite_diff_check(fb, &b0, &gb, 1e-6).unwrap() < 1e-7);
    }
}
