use std::f64::consts::PI;

/// Width of the encoding of a 3-vector with `n_freq` octaves.
pub fn encoded_width(n_freq: usize) -> usize {
    3 + 6 * n_freq
}

/// `[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(n-1) pi p), cos(2^(n-1) pi p)]`.
pub fn pos_encode(p: &[f64; 3], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(n_freq));
    pos_encode_into(p, n_freq, &mut out);
    out
}

pub fn pos_encode_into(p: &[f64; 3], n_freq: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(p);
    let mut freq = PI;
    for _ in 0..n_freq {
        let (s, c): (Vec<f64>, Vec<f64>) = p.iter().map(|v| (freq * v).sin_cos()).unzip();
        out.extend_from_slice(&s);
        out.extend_from_slice(&c);
        freq *= 2.0;
    }
}

/// Pulls a gradient on the encoding back to the 3 input coordinates.
pub fn pos_encode_vjp(p: &[f64; 3], n_freq: usize, grad: &[f64]) -> [f64; 3] {
    debug_assert_eq!(grad.len(), encoded_width(n_freq));
    let mut out = [grad[0], grad[1], grad[2]];
    let mut freq = PI;
    for k in 0..n_freq {
        let base = 3 + 6 * k;
        for a in 0..3 {
            let (s, c) = (freq * p[a]).sin_cos();
            out[a] += freq * (grad[base + a] * c - grad[base + 3 + a] * s);
        }
        freq *= 2.0;
    }
    out
}
