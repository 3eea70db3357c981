//! Dense parameter vectors and the three update rules every synchronization
//! policy is built from: the momentum SGD step, worker-side accumulation of
//! scaled gradients, and the parameter-server commit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model parameters `W`, a gradient, or an update accumulator `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|x| *x = 0.0);
    }

    pub(crate) fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    /// `self += alpha * other`, in place. Dimensions must already agree.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub(crate) fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Global learning-rate schedule at the parameter server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `eta_t = eta / sqrt(t)` at global step `t >= 1`.
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub global_lr: f64,
    pub local_lr_init: f64,
    /// Per-local-step exponential decay of the worker learning rate.
    pub local_lr_decay: f64,
    /// Explicit parameter-server momentum. Zero leaves only the implicit
    /// momentum induced by staleness.
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
}

impl Hyperparams {
    /// Defaults for an `m`-worker cluster: global rate `1/m`, local rate 0.1
    /// decaying by 0.9999 per local step, mini-batches of 128.
    pub fn for_workers(m: usize) -> Self {
        Hyperparams {
            global_lr: 1.0 / m.max(1) as f64,
            local_lr_init: 0.1,
            local_lr_decay: 0.9999,
            momentum: 0.0,
            lr_schedule: LrSchedule::Constant,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return Err(Error::invalid("global_lr", "must be positive and finite"));
        }
        if !(self.local_lr_init > 0.0 && self.local_lr_init.is_finite()) {
            return Err(Error::invalid("local_lr_init", "must be positive and finite"));
        }
        if !(self.local_lr_decay > 0.0 && self.local_lr_decay <= 1.0) {
            return Err(Error::invalid("local_lr_decay", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Local learning rate after `local_steps` steps on one worker.
    pub fn local_lr(&self, local_steps: u64) -> f64 {
        self.local_lr_init * self.local_lr_decay.powf(local_steps as f64)
    }

    /// Global learning rate for the `t`-th applied commit (1-based).
    pub fn global_lr_at(&self, t: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.global_lr,
            LrSchedule::InverseSqrt => self.global_lr / (t.max(1) as f64).sqrt(),
        }
    }
}

fn check_rate(name: &'static str, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(name, "must be positive and finite"));
    }
    Ok(())
}

fn finite_or_err(v: ParamVector) -> Result<ParamVector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: "update result" })
    }
}

/// `W_{t+1} = W_t - eta * grad + mu * (W_t - W_prev)`.
pub fn sgd_momentum_update(
    w_t: &ParamVector,
    w_prev: &ParamVector,
    grad: &ParamVector,
    eta: f64,
    mu: f64,
) -> Result<ParamVector> {
    w_t.check_dim(w_prev)?;
    w_t.check_dim(grad)?;
    check_rate("eta", eta)?;
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid("mu", "must lie in [0, 1)"));
    }
    if !(w_t.is_finite() && w_prev.is_finite() && grad.is_finite()) {
        return Err(Error::NonFinite { what: "update input" });
    }
    let out = w_t
        .0
        .iter()
        .zip(&w_prev.0)
        .zip(&grad.0)
        .map(|((w, wp), g)| w - eta * g + mu * (w - wp))
        .collect();
    finite_or_err(ParamVector(out))
}

/// `U + eta_local * grad`.
pub fn accumulate_update(u: &ParamVector, grad: &ParamVector, local_lr: f64) -> Result<ParamVector> {
    u.check_dim(grad)?;
    check_rate("local_lr", local_lr)?;
    let mut out = u.clone();
    out.axpy(local_lr, grad);
    finite_or_err(out)
}

/// `W - eta * U`: the parameter server applying one worker's commit.
pub fn apply_commit(w: &ParamVector, u: &ParamVector, eta: f64) -> Result<ParamVector> {
    w.check_dim(u)?;
    check_rate("eta", eta)?;
    let mut out = w.clone();
    out.axpy(-eta, u);
    finite_or_err(out)
}
