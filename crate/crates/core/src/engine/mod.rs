//! Discrete-event execution of workers, the parameter server and the ADSP
//! scheduler, in deterministic virtual time or on wall-clock threads.

mod metrics;
mod queue;
mod realtime;
mod sim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Hyperparams;
use crate::sync::SyncPolicy;
use crate::workloads::TrainingTask;

pub use metrics::{
    detect_convergence, detect_convergence_on_grid, mean_waiting_fraction, parse_csv, waiting_fraction, Checkpoint, LedgerRow, LossCsvRow,
    LossSample, RunMetrics, WorkerLedger,
};
pub use realtime::{run_realtime, RealtimeOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Steps per virtual second, per worker.
    pub speeds: Vec<f64>,
    /// Round-trip commit time, per worker.
    pub overheads: Vec<f64>,
    /// Latency added to every round trip.
    #[serde(default)]
    pub extra_delay: f64,
    /// 0 gives iid shards, 1 label-sorted shards.
    #[serde(default)]
    pub data_skew: f64,
}

impl ClusterSpec {
    pub fn new(speeds: Vec<f64>, overheads: Vec<f64>) -> Self {
        ClusterSpec {
            speeds,
            overheads,
            extra_delay: 0.0,
            data_skew: 0.0,
        }
    }

    pub fn homogeneous(m: usize, speed: f64, overhead: f64) -> Self {
        Self::new(vec![speed; m], vec![overhead; m])
    }

    /// `m - 1` workers at speed 1 and one slow worker whose speed makes the
    /// mean/min ratio equal to `h`.
    pub fn with_heterogeneity(m: usize, h: f64, overhead: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if !(h >= 1.0 && h.is_finite()) {
            return Err(Error::invalid("heterogeneity", "must be at least 1"));
        }
        if m == 1 {
            if h != 1.0 {
                return Err(Error::invalid("heterogeneity", "a single worker has H = 1"));
            }
            return Ok(Self::homogeneous(1, 1.0, overhead));
        }
        if h > m as f64 - 1e-12 {
            return Err(Error::invalid("heterogeneity", format!("must be below the worker count {m}")));
        }
        let slow = (m as f64 - 1.0) / (m as f64 * h - 1.0);
        let mut speeds = vec![1.0; m];
        speeds[m - 1] = slow;
        Ok(Self::new(speeds, vec![overhead; m]))
    }

    pub fn with_extra_delay(mut self, delay: f64) -> Self {
        self.extra_delay = delay;
        self
    }

    pub fn workers(&self) -> usize {
        self.speeds.len()
    }

    pub fn step_time(&self, i: usize) -> f64 {
        1.0 / self.speeds[i]
    }

    /// Effective round trip including the extra delay.
    pub fn round_trip(&self, i: usize) -> f64 {
        self.overheads[i] + self.extra_delay
    }

    pub fn round_trips(&self) -> Vec<f64> {
        (0..self.workers()).map(|i| self.round_trip(i)).collect()
    }

    pub fn step_times(&self) -> Vec<f64> {
        (0..self.workers()).map(|i| self.step_time(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.speeds.is_empty() {
            return Err(Error::config("cluster.speeds", "at least one worker is required"));
        }
        if self.overheads.len() != self.speeds.len() {
            return Err(Error::config(
                "cluster.overheads",
                format!("expected {} entries, got {}", self.speeds.len(), self.overheads.len()),
            ));
        }
        if self.speeds.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("cluster.speeds", "speeds must be positive and finite"));
        }
        if self.overheads.iter().any(|o| !(*o >= 0.0 && o.is_finite())) {
            return Err(Error::config("cluster.overheads", "overheads must be nonnegative and finite"));
        }
        if !(self.extra_delay >= 0.0 && self.extra_delay.is_finite()) {
            return Err(Error::config("cluster.extra_delay", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.data_skew) {
            return Err(Error::config("cluster.data_skew", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    #[serde(default)]
    pub max_time: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Stop as soon as convergence is detected.
    #[serde(default)]
    pub converge: bool,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_eps_var")]
    pub eps_var: f64,
    /// Evaluate convergence on a uniform grid of this spacing (virtual
    /// seconds) instead of once per PS step.
    #[serde(default)]
    pub eval_interval: Option<f64>,
}

fn default_window() -> usize {
    10
}

fn default_eps_var() -> f64 {
    1e-8
}

impl StopRule {
    pub fn time(max_time: f64) -> Self {
        StopRule {
            max_time: Some(max_time),
            max_steps: None,
            converge: false,
            window: default_window(),
            eps_var: default_eps_var(),
            eval_interval: None,
        }
    }

    pub fn steps(max_steps: u64) -> Self {
        StopRule {
            max_steps: Some(max_steps),
            ..Self::time(0.0)
        }
        .without_time()
    }

    fn without_time(mut self) -> Self {
        self.max_time = None;
        self
    }

    pub fn until_converged(max_time: f64, eps_var: f64) -> Self {
        StopRule {
            converge: true,
            eps_var,
            ..Self::time(max_time)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_time.is_none() && self.max_steps.is_none() {
            return Err(Error::config("stop", "max_time or max_steps is required"));
        }
        if let Some(t) = self.max_time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("stop.max_time", "must be positive"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("stop.max_steps", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::config("stop.window", "must be positive"));
        }
        if !(self.eps_var > 0.0) {
            return Err(Error::config("stop.eps_var", "must be positive"));
        }
        if let Some(dt) = self.eval_interval {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::config("stop.eval_interval", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Checks every precondition of a run without starting it.
pub fn validate(task: &TrainingTask, cluster: &ClusterSpec, policy: &SyncPolicy, hp: &Hyperparams, stop: &StopRule) -> Result<()> {
    cluster.validate()?;
    policy.validate()?;
    hp.validate()?;
    stop.validate()?;
    if cluster.workers() > task.len() {
        return Err(Error::invalid("workers", "more workers than training examples"));
    }
    if let SyncPolicy::Adsp(p) = policy {
        if let Some(caps) = &p.local_step_caps {
            if caps.len() != cluster.workers() {
                return Err(Error::invalid("local_step_caps", "need one cap per worker"));
            }
        }
        if let Some(d) = p.fixed_increment {
            // an explicit rate is honoured or refused, never clamped
            for i in 0..cluster.workers() {
                crate::sync::adsp_timer_interval(p.gamma, d, cluster.round_trip(i)).map_err(|e| match e {
                    Error::InfeasibleRate { interval, overhead, .. } => Error::InfeasibleRate {
                        worker: i,
                        interval,
                        overhead,
                    },
                    other => other,
                })?;
            }
        }
    }
    Ok(())
}

/// Simulate one training run in virtual time. Deterministic in all inputs.
pub fn run(
    task: &TrainingTask,
    cluster: &ClusterSpec,
    policy: &SyncPolicy,
    hp: &Hyperparams,
    stop: &StopRule,
    seed: u64,
) -> Result<RunMetrics> {
    validate(task, cluster, policy, hp, stop)?;
    sim::Sim::new(task, cluster, policy, hp, stop, seed)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::heterogeneity_degree;

    #[test]
    fn heterogeneity_preset_hits_target() {
        for m in [2, 3, 6, 18] {
            for h in [1.0, 1.5, 2.0, 3.2] {
                if h >= m as f64 {
                    continue;
                }
                let c = ClusterSpec::with_heterogeneity(m, h, 1.0).unwrap();
                assert!((heterogeneity_degree(&c.speeds).unwrap() - h).abs() < 1e-12);
            }
        }
        assert!(ClusterSpec::with_heterogeneity(3, 3.0, 0.0).is_err());
    }

    #[test]
    fn stop_rule_needs_a_bound() {
        let mut s = StopRule::time(10.0);
        s.max_time = None;
        assert!(s.validate().is_err());
        assert!(StopRule::steps(5).validate().is_ok());
    }
}
