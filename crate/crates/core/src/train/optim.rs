use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A `None` gradient counts as zero.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads.get(i).and_then(|g| g.as_ref());
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Reduce-on-plateau learning rate.
///
/// Each call to [`ReduceOnPlateau::observe`] is one epoch. A loss strictly
/// below the best so far resets the bad-epoch counter; after `patience`
/// consecutive bad epochs the rate is multiplied by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub stop_lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub decays: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, stop_lr: f64) -> Self {
        ReduceOnPlateau {
            lr,
            factor,
            patience: patience.max(1),
            stop_lr,
            best: None,
            bad_epochs: 0,
            decays: 0,
        }
    }

    /// Record an epoch's validation loss and return the rate for the next
    /// epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b || loss.is_nan() => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.decays += 1;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn should_stop(&self) -> bool {
        self.lr <= self.stop_lr
    }
}
