//! Synchronization policies: when a worker trains, commits, and waits.
//!
//! The decision functions here are pure; the engine owns the clocks and the
//! message delivery and calls into them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{apply_commit, sgd_momentum_update, Hyperparams, ParamVector};

/// How ADSP commit instants are placed inside a check period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimerJitter {
    /// Evenly spaced: the timer restarts every `gamma / delta_c` seconds.
    #[default]
    None,
    /// The period's `delta_c` commit instants are drawn uniformly at random,
    /// i.e. a Poisson process conditioned on its count.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdspParams {
    /// Check period, virtual seconds.
    pub gamma: f64,
    pub epoch_len: f64,
    pub eval_window: f64,
    /// Skip the online search and raise the commit target by this much every
    /// check period.
    #[serde(default)]
    pub fixed_increment: Option<u64>,
    /// Keep training while a commit is in flight instead of pausing for the
    /// round trip.
    #[serde(default)]
    pub overlap_commits: bool,
    #[serde(default)]
    pub timer_jitter: TimerJitter,
    /// Per-worker cap on local steps between commits; a worker that reaches
    /// its cap idles until its timer fires. Used by the offline tau search.
    #[serde(default)]
    pub local_step_caps: Option<Vec<u64>>,
    #[serde(default = "default_probe_budget")]
    pub probe_budget: usize,
}

fn default_probe_budget() -> usize {
    10
}

impl Default for AdspParams {
    fn default() -> Self {
        AdspParams {
            gamma: 60.0,
            epoch_len: 1200.0,
            eval_window: 60.0,
            fixed_increment: None,
            overlap_commits: false,
            timer_jitter: TimerJitter::None,
            local_step_caps: None,
            probe_budget: default_probe_budget(),
        }
    }
}

impl AdspParams {
    pub fn periods_per_epoch(&self) -> u64 {
        ((self.epoch_len / self.gamma).round() as u64).max(1)
    }

    pub fn periods_per_probe(&self) -> u64 {
        ((self.eval_window / self.gamma).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncPolicy {
    Bsp,
    Ssp { slack: u64 },
    Tap,
    FixedAdaComm { tau: u64 },
    AdaComm { tau0: u64, check_interval: f64, multiplier: f64 },
    Adsp(AdspParams),
}

impl SyncPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            SyncPolicy::Bsp => "bsp",
            SyncPolicy::Ssp { .. } => "ssp",
            SyncPolicy::Tap => "tap",
            SyncPolicy::FixedAdaComm { .. } => "fixed_adacomm",
            SyncPolicy::AdaComm { .. } => "adacomm",
            SyncPolicy::Adsp(_) => "adsp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SyncPolicy::Bsp | SyncPolicy::Tap | SyncPolicy::Ssp { .. } => Ok(()),
            SyncPolicy::FixedAdaComm { tau } => {
                if *tau == 0 {
                    return Err(Error::invalid("tau", "must be positive"));
                }
                Ok(())
            }
            SyncPolicy::AdaComm {
                tau0,
                check_interval,
                multiplier,
            } => {
                if *tau0 == 0 {
                    return Err(Error::invalid("tau0", "must be positive"));
                }
                if !(*check_interval > 0.0 && check_interval.is_finite()) {
                    return Err(Error::invalid("check_interval", "must be positive"));
                }
                if !(*multiplier > 1.0 && multiplier.is_finite()) {
                    return Err(Error::invalid("multiplier", "must exceed 1"));
                }
                Ok(())
            }
            SyncPolicy::Adsp(p) => {
                if !(p.gamma > 0.0 && p.gamma.is_finite()) {
                    return Err(Error::invalid("gamma", "must be positive"));
                }
                if !(p.epoch_len >= p.gamma) {
                    return Err(Error::invalid("epoch_len", "must be at least one check period"));
                }
                let k = p.eval_window / p.gamma;
                if !(k >= 1.0 - 1e-9 && (k - k.round()).abs() < 1e-9) {
                    return Err(Error::invalid(
                        "eval_window",
                        "must be a positive multiple of the check period",
                    ));
                }
                if p.fixed_increment == Some(0) {
                    return Err(Error::invalid("fixed_increment", "must be positive"));
                }
                if p.probe_budget < 2 {
                    return Err(Error::invalid("probe_budget", "must allow at least two probes"));
                }
                if let Some(caps) = &p.local_step_caps {
                    if caps.contains(&0) {
                        return Err(Error::invalid("local_step_caps", "caps must be positive"));
                    }
                }
                Ok(())
            }
        }
    }
}

/// What a worker does after finishing a mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    ContinueTraining,
    CommitNow,
    /// Commit the step, then wait before training further.
    Block,
}

/// The worker's view when a step completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    /// Steps this worker has completed, including the one just finished.
    pub own_steps: u64,
    pub steps_since_commit: u64,
    /// Smallest step count among all workers, as last seen by this worker.
    pub min_peer_steps: u64,
    /// Current communication period, for the ADACOMM variants.
    pub tau: u64,
}

pub fn on_step_complete(policy: &SyncPolicy, ctx: &StepContext) -> Action {
    match policy {
        SyncPolicy::Bsp | SyncPolicy::Tap => Action::CommitNow,
        SyncPolicy::Ssp { slack } => {
            if ctx.own_steps.saturating_sub(ctx.min_peer_steps) > *slack {
                Action::Block
            } else {
                Action::CommitNow
            }
        }
        SyncPolicy::FixedAdaComm { .. } | SyncPolicy::AdaComm { .. } => {
            if ctx.steps_since_commit >= ctx.tau.max(1) {
                Action::CommitNow
            } else {
                Action::ContinueTraining
            }
        }
        // commits are driven by timers
        SyncPolicy::Adsp(_) => Action::ContinueTraining,
    }
}

/// Timer timeout `gamma / delta_c - overhead`.
pub fn adsp_timer_interval(gamma: f64, delta_c: u64, overhead: f64) -> Result<f64> {
    if delta_c == 0 {
        return Err(Error::invalid("delta_c", "must be positive"));
    }
    let cycle = gamma / delta_c as f64;
    if cycle <= overhead {
        return Err(Error::InfeasibleRate {
            worker: 0,
            interval: cycle,
            overhead,
        });
    }
    Ok(cycle - overhead)
}

/// Largest per-period commit count whose timer interval stays positive,
/// or `None` when the overhead is zero.
pub fn max_feasible_rate(gamma: f64, overhead: f64) -> Option<u64> {
    if overhead <= 0.0 {
        return None;
    }
    let mut n = ((gamma / overhead).ceil() as u64).saturating_sub(1);
    while n > 0 && gamma / n as f64 <= overhead {
        n -= 1;
    }
    while gamma / (n + 1) as f64 > overhead {
        n += 1;
    }
    Some(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub id: usize,
    /// Commits issued by this worker.
    pub commits: u64,
    pub accumulator: ParamVector,
    pub local_model: ParamVector,
    pub local_steps: u64,
    pub target_rate: u64,
    pub timer_deadline: f64,
    pub blocked: bool,
}

impl WorkerState {
    pub fn new(id: usize, w0: &ParamVector) -> Self {
        WorkerState {
            id,
            commits: 0,
            accumulator: ParamVector::zeros(w0.dim()),
            local_model: w0.clone(),
            local_steps: 0,
            target_rate: 1,
            timer_deadline: f64::INFINITY,
            blocked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitMsg {
    pub worker: usize,
    pub update: ParamVector,
    pub sent_at: f64,
}

/// Timer expiry: emit the accumulated update, zero the accumulator, and
/// return the next deadline. The timer restarts once the reply lands, so the
/// next expiry is one full cycle `gamma / delta_c` after this one.
pub fn adsp_on_timeout(worker: &mut WorkerState, now: f64, gamma: f64, overhead: f64) -> Result<(CommitMsg, f64)> {
    let interval = adsp_timer_interval(gamma, worker.target_rate, overhead).map_err(|e| match e {
        Error::InfeasibleRate { interval, overhead, .. } => Error::InfeasibleRate {
            worker: worker.id,
            interval,
            overhead,
        },
        other => other,
    })?;
    let dim = worker.accumulator.dim();
    let update = std::mem::replace(&mut worker.accumulator, ParamVector::zeros(dim));
    worker.commits += 1;
    let msg = CommitMsg {
        worker: worker.id,
        update,
        sent_at: now,
    };
    let deadline = now + overhead + interval;
    worker.timer_deadline = deadline;
    Ok((msg, deadline))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsState {
    pub w_global: ParamVector,
    pub w_prev: ParamVector,
    /// Total commits applied.
    pub step: u64,
    /// Commits applied per worker.
    pub vector_clock: Vec<u64>,
    last_applied_at: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Applied {
    pub step: u64,
    /// Foreign commits applied since this worker's previous commit.
    pub staleness: u64,
}

impl PsState {
    pub fn new(w0: ParamVector, workers: usize) -> Self {
        PsState {
            w_prev: w0.clone(),
            w_global: w0,
            step: 0,
            vector_clock: vec![0; workers],
            last_applied_at: vec![0; workers],
        }
    }

    pub fn min_clock(&self) -> u64 {
        self.vector_clock.iter().copied().min().unwrap_or(0)
    }

    /// Apply one commit: `W <- W - eta_t U (+ mu (W - W_prev))`.
    pub fn on_commit(&mut self, msg: &CommitMsg, hp: &Hyperparams) -> Result<Applied> {
        if msg.worker >= self.vector_clock.len() {
            return Err(Error::invalid("worker", format!("unknown worker {}", msg.worker)));
        }
        let eta = hp.global_lr_at(self.step + 1);
        let next = if hp.momentum > 0.0 {
            sgd_momentum_update(&self.w_global, &self.w_prev, &msg.update, eta, hp.momentum)?
        } else {
            apply_commit(&self.w_global, &msg.update, eta)?
        };
        let staleness = self.step - self.last_applied_at[msg.worker];
        self.w_prev = std::mem::replace(&mut self.w_global, next);
        self.step += 1;
        self.vector_clock[msg.worker] += 1;
        self.last_applied_at[msg.worker] = self.step;
        Ok(Applied {
            step: self.step,
            staleness,
        })
    }
}

/// Functional form of [`PsState::on_commit`].
pub fn ps_on_commit(ps: &PsState, msg: &CommitMsg, hp: &Hyperparams) -> Result<PsState> {
    let mut next = ps.clone();
    next.on_commit(msg, hp)?;
    Ok(next)
}

/// ADACOMM period update. `history` holds the mean loss of each completed
/// check interval, oldest first.
pub fn adacomm_update_tau(tau: u64, tau0: u64, multiplier: f64, history: &[f64]) -> u64 {
    let Some(&now) = history.last() else {
        return tau;
    };
    let stalled = history.len() >= 2 && now >= history[history.len() - 2];
    let next = if stalled {
        (tau as f64 * multiplier).ceil() as u64
    } else {
        let first = history[0];
        let ratio = if first > 0.0 { (now / first).max(0.0) } else { 1.0 };
        (tau0 as f64 * ratio.sqrt()).round() as u64
    };
    next.max(1)
}
