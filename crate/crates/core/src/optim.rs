//! Adam over a [`ParamStore`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one parameter store: step count and both moment
/// estimates, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads` follows store order. With `ascend` the step moves
    /// up the gradient (Adam on the negated objective).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], ascend: bool) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(contract!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            ));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        let sign = if ascend { -1.0 } else { 1.0 };
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(crate::Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = sign * gi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[3], alloc::vec![1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = [Tensor::from_vec(&[3], alloc::vec![2.0, -0.5, 0.0]).unwrap()];
        adam.step(&mut p, &g, false).unwrap();
        let w = p.iter().next().unwrap().2.data().to_vec();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 1.0);
        adam.step(&mut p, &g, true).unwrap();
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_vec(&[1], alloc::vec![3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..500 {
            let w = p.iter().next().unwrap().2.data()[0];
            adam.step(&mut p, &[Tensor::from_vec(&[1], alloc::vec![2.0 * w]).unwrap()], false)
                .unwrap();
        }
        assert!(p.iter().next().unwrap().2.data()[0].abs() < 1e-2);
    }
}
