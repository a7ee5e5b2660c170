use serde::{Deserialize, Serialize};

use super::SegModel;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Exponent of the polynomial learning-rate decay.
pub const POLY_EXPONENT: f64 = 0.9;

/// `base_lr * (1 - epoch / max_epochs)^0.9`, zero once the schedule is exhausted.
pub fn poly_lr(base_lr: f64, epoch: usize, max_epochs: usize) -> f64 {
    if max_epochs == 0 || epoch >= max_epochs {
        return 0.0;
    }
    base_lr * (1.0 - epoch as f64 / max_epochs as f64).powf(POLY_EXPONENT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Finetune,
}

/// Parameters plus SGD/Nesterov optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SegModel,
    pub velocity: Vec<f64>,
    pub epoch: usize,
    pub base_lr: f64,
    pub max_epochs: usize,
    pub momentum: f64,
    pub stage: Stage,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(model: SegModel, base_lr: f64, max_epochs: usize, stage: Stage, rng_seed: u64) -> Self {
        let velocity = vec![0.0; model.params().len()];
        TrainState {
            model,
            velocity,
            epoch: 0,
            base_lr,
            max_epochs,
            momentum: DEFAULT_MOMENTUM,
            stage,
            rng_seed,
        }
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self.base_lr, self.epoch, self.max_epochs)
    }

    pub fn advance_epoch(&mut self) {
        self.epoch = (self.epoch + 1).min(self.max_epochs);
    }
}

/// One Nesterov step at the current scheduled rate:
/// `v <- mu v + g`, `theta <- theta - lr (g + mu v)`.
pub fn sgd_step(state: &mut TrainState, grads: &[f64]) -> Result<()> {
    if grads.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, model has {}",
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            epoch: state.epoch,
            reason: format!("non-finite gradient at parameter {i}"),
        });
    }
    let lr = state.lr();
    let mu = state.momentum;
    for ((p, v), &g) in state
        .model
        .params_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grads)
    {
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn scalar_state(mu: f64, base_lr: f64) -> TrainState {
        let arch = Arch::standard(1, 2);
        let model = SegModel::zeros(arch).unwrap();
        let mut s = TrainState::new(model, base_lr, 10, Stage::Initial, 0);
        s.momentum = mu;
        s
    }

    fn grad_at0(len: usize, g: f64) -> Vec<f64> {
        let mut v = vec![0.0; len];
        v[0] = g;
        v
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = scalar_state(0.0, 1.0);
        let n = s.velocity.len();
        sgd_step(&mut s, &grad_at0(n, 0.7)).unwrap();
        assert_eq!(s.model.params()[0], -0.7);
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        // Hand recursion, lr fixed at epoch 0: v1 = g1, p1 = -lr (g1 + mu g1);
        // v2 = mu g1 + g2, p2 = p1 - lr (g2 + mu v2).
        let (mu, lr, g1, g2) = (0.99, 0.01, 0.5, -0.25);
        let mut s = scalar_state(mu, lr);
        let n = s.velocity.len();
        sgd_step(&mut s, &grad_at0(n, g1)).unwrap();
        sgd_step(&mut s, &grad_at0(n, g2)).unwrap();
        let p1 = -lr * (g1 + mu * g1);
        let v2 = mu * g1 + g2;
        let p2 = p1 - lr * (g2 + mu * v2);
        assert!((s.model.params()[0] - p2).abs() < 1e-15);
        assert!((s.velocity[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params() {
        let arch = Arch::standard(1, 3);
        let model = SegModel::init(arch, 9).unwrap();
        let before = model.params().to_vec();
        let mut s = TrainState::new(model, 0.01, 5, Stage::Initial, 0);
        let n = s.velocity.len();
        sgd_step(&mut s, &vec![0.0; n]).unwrap();
        assert_eq!(s.model.params(), before.as_slice());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_state(0.9, 0.1);
        let n = s.velocity.len();
        let before = s.model.params().to_vec();
        let err = sgd_step(&mut s, &grad_at0(n, f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(s.model.params(), before.as_slice());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.01, 0, 1000), 0.01);
        assert_eq!(poly_lr(0.01, 1000, 1000), 0.0);
        let mid = poly_lr(0.01, 500, 1000);
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.005359).abs() < 1e-6);
    }
}
