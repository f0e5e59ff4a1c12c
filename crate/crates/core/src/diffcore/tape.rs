//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! Every value on the tape is a row-major matrix. Operations append a node
//! holding the forward value; `backward` walks the list in reverse and
//! accumulates gradients into each node's inputs. Only first derivatives are
//! supported.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::None => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::None => 1.0,
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus => 1.0,
            Activation::Sigmoid => 2.0,
            Activation::None => 3.0,
        }
    }

    pub fn from_code(v: f64) -> Option<Self> {
        match v as i64 {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Sigmoid),
            3 => Some(Activation::None),
            _ => None,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sparse row mixing matrix in CSR form: output row `r` is
/// `sum_k weight_k * input[index_k]` over the entries of row `r`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in entries {
            self.indices.push(i);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        self.indices[a..b].iter().copied().zip(self.weights[a..b].iter().copied())
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }

    /// Applies the mixing to a row-major `(n, cols)` matrix.
    pub fn apply(&self, input: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * cols];
        for r in 0..self.rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let src = &input[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// An operation with a hand-written backward pass.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Gradients with respect to each input, in `inputs()` order. Entries for
    /// inputs with `needs[k] == false` may be `None`.
    fn backward(&self, tape: &Tape, output: &[f64], grad_output: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Sum(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    RowCombine(Var, Arc<SparseRows>),
    Custom(Box<dyn CustomOp>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    first_non_finite: Option<(usize, String)>,
}

/// Gradients produced by [`Tape::backward`] for leaf and parameter nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter bound on the tape that the loss reached.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].clone().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover the addressed ranges; strides describe
    // row-major layouts (or their transposes) of the stated dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m x k) * b (k x n)`, both row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut c, 0.0);
    c
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            let name = match &op {
                Op::Custom(c) => c.name().to_string(),
                Op::Param(id) => format!("param #{}", id.0),
                _ => "primitive op".to_string(),
            };
            self.first_non_finite = Some((self.nodes.len(), name));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.first_non_finite {
            Some((i, name)) => Err(Error::NonFinite(format!("tape node {i} ({name})"))),
            None => Ok(()),
        }
    }

    /// A constant input; gradients do not flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, true)
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let (rows, cols) = t.as_matrix_dims();
        let v = self.push(rows, cols, t.values().to_vec(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let c = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(m, n, c, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, bias]);
        self.push(r, c, out, Op::AddBias(a, bias), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "elementwise shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(&[a, b]);
        self.push(r, c, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| scale * x + shift).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Affine(a, scale), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::None {
            return a;
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| act.apply(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Act(a, act), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(r, 1, out, Op::RowSum(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(r, rb, "concat row mismatch");
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        self.push(r, ca + cb, out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "column slice out of range");
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(a).chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(r, len, out, Op::SliceCols(a, start), rg)
    }

    pub fn row_combine(&mut self, a: Var, mix: Arc<SparseRows>) -> Var {
        let (r, c) = self.shape(a);
        if let Some(m) = mix.max_index() {
            assert!(m < r, "row_combine index {m} out of range for {r} rows");
        }
        let out = mix.apply(self.value(a), c);
        let rg = self.rg(&[a]);
        self.push(mix.rows(), c, out, Op::RowCombine(a, mix), rg)
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        let rg = self.rg(&op.inputs());
        self.push(rows, cols, value, Op::Custom(op), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param(_));
            let g = match if keep { grads[i].clone() } else { grads[i].take() } {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient at tape node {i}")));
                }
            }
        }
        let params = self.bound.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if need(*a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b), (1, n as isize), &mut da, 0.0);
                    add_into(&mut grads[a.0], da);
                }
                if need(*b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), (1, k as isize), g, (n as isize, 1), &mut db, 0.0);
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::AddBias(a, bias) => {
                if need(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if need(*bias) {
                    let c = node.cols;
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if need(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if need(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let gb = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], gb);
                }
                if need(*b) {
                    let ga = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], ga);
                }
            }
            Op::Affine(a, scale) => {
                add_into(&mut grads[a.0], g.iter().map(|x| x * scale).collect());
            }
            Op::Act(a, act) => {
                let xs = self.value(*a);
                let d = g
                    .iter()
                    .zip(xs)
                    .zip(&node.value)
                    .map(|((gi, x), y)| gi * act.derivative(*x, *y))
                    .collect();
                add_into(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                add_into(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::RowSum(a) => {
                let c = self.nodes[a.0].cols;
                let mut d = Vec::with_capacity(node.rows * c);
                for gi in g {
                    d.extend(std::iter::repeat_n(*gi, c));
                }
                add_into(&mut grads[a.0], d);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].cols;
                let cb = self.nodes[b.0].cols;
                if need(*a) {
                    let d = g.chunks(ca + cb).flat_map(|row| row[..ca].to_vec()).collect();
                    add_into(&mut grads[a.0], d);
                }
                if need(*b) {
                    let d = g.chunks(ca + cb).flat_map(|row| row[ca..].to_vec()).collect();
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.nodes[a.0].cols;
                let len = node.cols;
                let mut d = vec![0.0; node.rows * c];
                for (r, row) in g.chunks(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(row);
                }
                add_into(&mut grads[a.0], d);
            }
            Op::RowCombine(a, mix) => {
                let (rows, c) = self.shape(*a);
                let mut d = vec![0.0; rows * c];
                for r in 0..mix.rows() {
                    let src = &g[r * c..(r + 1) * c];
                    for (i, w) in mix.row(r) {
                        d[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(x, s)| *x += w * s);
                    }
                }
                add_into(&mut grads[a.0], d);
            }
            Op::Custom(op) => {
                let inputs = op.inputs();
                let needs: Vec<bool> = inputs.iter().map(|v| need(*v)).collect();
                let out = op.backward(self, &node.value, g, &needs);
                for ((v, n), gi) in inputs.iter().zip(&needs).zip(out) {
                    if let (true, Some(gi)) = (n, gi) {
                        debug_assert_eq!(gi.len(), self.nodes[v.0].value.len(), "{} gradient length", op.name());
                        add_into(&mut grads[v.0], gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut t = Tape::new();
        let x = t.variable(1, 1, vec![3.0]);
        let y = t.mul(x, x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.of(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.variable(1, 2, vec![3.0, 1.0]);
        let zero = t.affine(x, 0.0, 5.0);
        let s = t.sum(zero);
        let g = t.backward(s).unwrap();
        assert_eq!(g.of(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.variable(1, 2, vec![3.0, 1.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn nan_is_reported() {
        let mut t = Tape::new();
        let x = t.variable(1, 1, vec![f64::NAN]);
        let s = t.sum(x);
        assert!(matches!(t.backward(s), Err(Error::NonFinite(_))));
    }

    #[derive(Clone, Copy, Debug)]
    enum Prim {
        MatMul,
        Bias,
        Add,
        Sub,
        Mul,
        Affine,
        Act(Activation),
        RowSum,
        Concat,
        Slice,
        Combine,
    }

    fn eval_prim(prim: Prim, a: &[f64], b: &[f64], weights: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let (r, c) = (3, 4);
        let va = t.variable(r, c, a.to_vec());
        let vb = match prim {
            Prim::MatMul => t.variable(c, 2, b[..c * 2].to_vec()),
            Prim::Bias => t.variable(1, c, b[..c].to_vec()),
            _ => t.variable(r, c, b.to_vec()),
        };
        let out = match prim {
            Prim::MatMul => t.matmul(va, vb),
            Prim::Bias => t.add_bias(va, vb),
            Prim::Add => t.add(va, vb),
            Prim::Sub => t.sub(va, vb),
            Prim::Mul => t.mul(va, vb),
            Prim::Affine => t.affine(va, -1.7, 0.3),
            Prim::Act(act) => t.activation(va, act),
            Prim::RowSum => t.row_sum(va),
            Prim::Concat => t.concat_cols(va, vb),
            Prim::Slice => t.slice_cols(va, 1, 2),
            Prim::Combine => {
                let mut m = SparseRows::new();
                m.push_row([(0, 0.5), (2, -1.5)]);
                m.push_row([(1, 2.0)]);
                m.push_row([]);
                m.push_row([(2, 1.0), (2, 0.25)]);
                t.row_combine(va, Arc::new(m))
            }
        };
        let (orr, oc) = t.shape(out);
        let w = t.constant(orr, oc, weights[..orr * oc].to_vec());
        let prod = t.mul(out, w);
        let loss = t.sum(prod);
        let g = t.backward(loss).unwrap();
        let ga = g.of(va).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; a.len()]);
        let gb = g.of(vb).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.value(vb).len()]);
        (t.scalar(loss), ga, gb)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let prims = [
            Prim::MatMul,
            Prim::Bias,
            Prim::Add,
            Prim::Sub,
            Prim::Mul,
            Prim::Affine,
            Prim::Act(Activation::Relu),
            Prim::Act(Activation::Softplus),
            Prim::Act(Activation::Sigmoid),
            Prim::RowSum,
            Prim::Concat,
            Prim::Slice,
            Prim::Combine,
        ];
        for prim in prims {
            for _ in 0..5 {
                // keep relu inputs at least 1e-3 away from the kink
                let a: Vec<f64> = (0..12)
                    .map(|_| {
                        let v: f64 = rng.gen_range(-2.0..2.0);
                        if v.abs() < 1e-2 {
                            v + 0.1
                        } else {
                            v
                        }
                    })
                    .collect();
                let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (_, ga, gb) = eval_prim(prim, &a, &b, &w);
                let err_a = finite_diff_check(|x| Ok(eval_prim(prim, x, &b, &w).0), &a, &ga, 1e-5).unwrap();
                let nb = gb.len();
                let err_b =
                    finite_diff_check(|x| Ok(eval_prim(prim, &a, &[x, &b[nb..]].concat(), &w).0), &b[..nb], &gb, 1e-5)
                        .unwrap();
                assert!(err_a <= 1e-6 && err_b <= 1e-6, "{prim:?}: {err_a:e} {err_b:e}");
            }
        }
    }

    #[test]
    fn accumulation_is_bit_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.variable(8, 8, (0..64).map(|i| (i as f64 * 0.37).sin()).collect());
            let w = t.variable(8, 8, (0..64).map(|i| (i as f64 * 0.11).cos()).collect());
            let h = t.matmul(x, w);
            let h = t.activation(h, Activation::Softplus);
            let h2 = t.matmul(h, w);
            let s = t.sum(h2);
            t.backward(s).unwrap().of(w).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn activation_ranges() {
        for i in -3000..=3000 {
            let x = i as f64 / 100.0;
            assert!(softplus(x) > 0.0);
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
