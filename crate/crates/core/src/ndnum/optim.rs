//! SGD and Adam parameter updates.
//!
//! One [`OptimizerState`] per network; Adam keeps bias-corrected first/second
//! moment buffers shape-matched to the parameters.

use crate::ndnum::mlp::{Gradients, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Steps taken, drives Adam bias correction.
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, param_count: usize) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        let buf = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => param_count,
        };
        OptimizerState {
            kind,
            learning_rate,
            t: 0,
            m: vec![0.0; buf],
            v: vec![0.0; buf],
        }
    }

    pub fn for_mlp(kind: OptimizerKind, learning_rate: f64, mlp: &Mlp) -> Self {
        Self::new(kind, learning_rate, mlp.param_count())
    }

    /// One update over a flat parameter/gradient view.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "optimizer shape mismatch");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                assert_eq!(params.len(), self.m.len(), "optimizer shape mismatch");
                self.t += 1;
                let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / b1t;
                    let v_hat = self.v[i] / b2t;
                    params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }

    /// Applies one step to a whole network.
    pub fn step_mlp(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        let mut flat = mlp.params_flat();
        let gflat = mlp.grads_flat(grads);
        self.step_flat(&mut flat, &gflat);
        mlp.set_params_flat(&flat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_exact() {
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 0.1, 1);
        let mut p = [1.0];
        st.step_flat(&mut p, &[1.0]);
        assert_eq!(p[0], 0.9);
    }

    #[test]
    fn zero_gradient_leaves_sgd_params_unchanged() {
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 0.5, 3);
        let mut p = [1.0, -2.0, 0.25];
        st.step_flat(&mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, [1.0, -2.0, 0.25]);
    }

    #[test]
    fn zero_gradient_adam_moves_moments_not_params() {
        let mut st = OptimizerState::new(OptimizerKind::Adam, 0.5, 1);
        let mut p = [1.0];
        st.step_flat(&mut p, &[0.0]);
        // m and v stay zero for zero grads, so the update is exactly zero.
        assert_eq!(p[0], 1.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_matches_independent_scalar_implementation() {
        // Oracle: a scalar Adam written long-hand on f(p) = p^2, grad 2p.
        let lr = 0.1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p_ref = 1.0_f64;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut traj_ref = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * p_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            traj_ref.push(p_ref);
        }

        let mut st = OptimizerState::new(OptimizerKind::Adam, lr, 1);
        let mut p = [1.0];
        for step in 0..3 {
            let g = [2.0 * p[0]];
            st.step_flat(&mut p, &g);
            assert!(
                (p[0] - traj_ref[step]).abs() < 1e-12,
                "step {step}: {} vs {}",
                p[0],
                traj_ref[step]
            );
        }
    }
}
