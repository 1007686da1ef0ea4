use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Zeroes both moment estimates and the step counter.
    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[Tensor]) -> Result<()> {
        params.check_shapes(grads, "adam_step")?;
        params.check_shapes(&self.m, "adam_step")?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step = self.lr / bc1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("theta", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = one(0.5);
            let mut adam = AdamState::new(&p, 1e-3);
            adam.step(&mut p, &[Tensor::vector(vec![g])]).unwrap();
            let delta = p.get(0).data()[0] - 0.5;
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-3 * 1e-4, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = one(0.25);
        let mut adam = AdamState::new(&p, 1e-3);
        for _ in 0..50 {
            adam.step(&mut p, &[Tensor::vector(vec![0.0])]).unwrap();
        }
        assert_eq!(p.get(0).data()[0], 0.25);
    }

    #[test]
    fn descends_quadratic() {
        let mut p = one(1.0);
        let mut adam = AdamState::new(&p, 0.01);
        for _ in 0..200 {
            let theta = p.get(0).data()[0];
            adam.step(&mut p, &[Tensor::vector(vec![2.0 * theta])]).unwrap();
        }
        assert!(p.get(0).data()[0].abs() < 0.05, "{}", p.get(0).data()[0]);
    }

    #[test]
    fn reset_clears_moments() {
        let mut p = one(1.0);
        let mut adam = AdamState::new(&p, 1e-3);
        adam.step(&mut p, &[Tensor::vector(vec![1.0])]).unwrap();
        adam.reset();
        assert_eq!(adam.step_count(), 0);
        assert!(adam.first_moments()[0].data().iter().all(|&x| x == 0.0));
        assert!(adam.second_moments()[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = one(1.0);
        let mut adam = AdamState::new(&p, 1e-3);
        assert!(adam.step(&mut p, &[Tensor::vector(vec![1.0, 2.0])]).is_err());
    }
}
