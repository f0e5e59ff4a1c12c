use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 5e-4;

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(step: u64, hyper: [f64; 4], m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self {
            step,
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            m,
            v,
        }
    }

    pub fn hyper(&self) -> [f64; 4] {
        [self.lr, self.beta1, self.beta2, self.eps]
    }

    /// Applies one update using the gradients accumulated in `store`
    /// (parameters without a gradient see a zero gradient), then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor: &mut Tensor = store.get_mut(id);
            if self.m[i].len() != tensor.len() {
                return Err(Error::shape(format!("optimizer moment {i} has wrong length")));
            }
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = tensor.values_mut();
            for k in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                values[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(v)).unwrap();
        s.get_mut(id).accumulate_grad(&[g]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(1.5, 0.0);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("x").unwrap().values(), &[1.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let mut s = store_with(0.0, g);
            let mut adam = AdamState::new(&s, 0.01);
            adam.step(&mut s).unwrap();
            let x = s.by_name("x").unwrap().values()[0];
            assert!((x.abs() - 0.01).abs() < 1e-6 * 0.01 / g.abs().min(1.0));
            assert_eq!(x.signum(), -g.signum());
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut s = store_with(0.0, 1.0);
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s).unwrap();
        let x1 = s.by_name("x").unwrap().values()[0];
        s.get_mut(s.id("x").unwrap()).accumulate_grad(&[1.0]).unwrap();
        adam.step(&mut s).unwrap();
        let x2 = s.by_name("x").unwrap().values()[0];
        assert!(x1 < 0.0 && x2 < x1);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = store_with(0.0, 1.0);
        let mut adam = AdamState::new(&ParamStore::new(), 0.1);
        assert!(adam.step(&mut s).is_err());
    }
}
