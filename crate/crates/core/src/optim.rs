//! Adaptive moment estimation with bias correction.

use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &Grads<f32>, lr: f32, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut params = ParamSet::new(vec![Param {
            name: "w".into(),
            shape: vec![3],
            data: vec![1.0, 1.0, 1.0],
        }]);
        let mut st = AdamState::new(&params);
        let grads = Grads(vec![vec![2.0, -0.5, 0.0]]);
        st.update(&mut params, &grads, 0.1, &AdamConfig::default());
        let d = &params.get(0).data;
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = ParamSet::new(vec![Param {
            name: "w".into(),
            shape: vec![2],
            data: vec![0.3, -0.7],
        }]);
        let before = params.clone();
        let mut st = AdamState::new(&params);
        for _ in 0..5 {
            st.update(&mut params, &Grads(vec![vec![0.0, 0.0]]), 1e-3, &AdamConfig::default());
        }
        assert!(params.bits_eq(&before));
    }
}
