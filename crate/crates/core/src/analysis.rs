//! Closed-form theory and its comparison against simulated traces.

use serde::{Deserialize, Serialize};

use crate::engine::{run, ClusterSpec, StopRule};
use crate::error::{Error, Result};
use crate::params::Hyperparams;
use crate::sync::{AdspParams, SyncPolicy};
use crate::workloads::TrainingTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub gamma: f64,
    /// Per-worker commits per check period.
    pub delta_c: Vec<u64>,
    /// Per-worker steps per second.
    pub speeds: Vec<f64>,
    /// Per-worker commit round trip.
    pub overheads: Vec<f64>,
}

impl TheoryInputs {
    pub fn new(gamma: f64, delta_c: Vec<u64>, speeds: Vec<f64>, overheads: Vec<f64>) -> Self {
        TheoryInputs {
            gamma,
            delta_c,
            speeds,
            overheads,
        }
    }

    /// Inputs for a cluster running with the same commit rate everywhere.
    pub fn from_cluster(cluster: &ClusterSpec, gamma: f64, delta_c: u64) -> Self {
        TheoryInputs::new(gamma, vec![delta_c; cluster.workers()], cluster.speeds.clone(), cluster.round_trips())
    }

    pub fn m(&self) -> usize {
        self.speeds.len()
    }

    pub fn step_times(&self) -> Vec<f64> {
        self.speeds.iter().map(|v| 1.0 / v).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.speeds.len();
        if m == 0 {
            return Err(Error::invalid("speeds", "at least one worker is required"));
        }
        if self.delta_c.len() != m || self.overheads.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: if self.delta_c.len() != m { self.delta_c.len() } else { self.overheads.len() },
            });
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma", "must be positive"));
        }
        if self.speeds.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("speeds", "must be positive"));
        }
        if self.delta_c.contains(&0) {
            return Err(Error::invalid("delta_c", "must be positive"));
        }
        if self.overheads.iter().any(|o| !(*o >= 0.0 && o.is_finite())) {
            return Err(Error::invalid("overheads", "must be nonnegative"));
        }
        Ok(())
    }
}

/// `p = 1 / (1 + (1 - 1/m) sum_i gamma / (delta_c_i v_i))` and the implicit
/// momentum `1 - p`.
pub fn implicit_momentum(inputs: &TheoryInputs) -> Result<(f64, f64)> {
    inputs.validate()?;
    let m = inputs.m() as f64;
    let sum: f64 = inputs
        .delta_c
        .iter()
        .zip(&inputs.speeds)
        .map(|(&dc, v)| inputs.gamma / (dc as f64 * v))
        .sum();
    let p = 1.0 / (1.0 + (1.0 - 1.0 / m) * sum);
    Ok((p, 1.0 - p))
}

/// Mean speed over minimum speed.
pub fn heterogeneity_degree(speeds: &[f64]) -> Result<f64> {
    if speeds.is_empty() {
        return Err(Error::invalid("speeds", "at least one worker is required"));
    }
    if speeds.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("speeds", "must be positive"));
    }
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    let min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(mean / min)
}

/// `t + overhead / tau`.
pub fn effective_step_time(step_time: f64, overhead: f64, tau: u64) -> Result<f64> {
    if tau == 0 {
        return Err(Error::invalid("tau", "must be at least 1"));
    }
    Ok(step_time + overhead / tau as f64)
}

/// Local steps a worker completes per commit cycle under ADSP (fractional).
pub fn adsp_local_steps(gamma: f64, delta_c: u64, overhead: f64, step_time: f64) -> Result<f64> {
    let cycle = gamma / delta_c as f64;
    if cycle <= overhead {
        return Err(Error::InfeasibleRate {
            worker: 0,
            interval: cycle,
            overhead,
        });
    }
    Ok((cycle - overhead) / step_time)
}

/// Closed-form mean per-worker training speed (steps per second).
pub fn policy_speeds(inputs: &TheoryInputs, policy: &SyncPolicy) -> Result<f64> {
    inputs.validate()?;
    let t = inputs.step_times();
    let o = &inputs.overheads;
    let slowest = |tau: f64| -> f64 {
        let worst = t
            .iter()
            .zip(o)
            .map(|(t, o)| t + o / tau)
            .fold(0.0, f64::max);
        1.0 / worst
    };
    Ok(match policy {
        SyncPolicy::Bsp => slowest(1.0),
        SyncPolicy::Ssp { slack } => slowest((*slack).max(1) as f64),
        SyncPolicy::Tap => inputs.speeds.iter().sum::<f64>() / inputs.m() as f64,
        SyncPolicy::FixedAdaComm { tau } => slowest(*tau as f64),
        SyncPolicy::AdaComm { tau0, .. } => slowest(*tau0 as f64),
        SyncPolicy::Adsp(_) => {
            let mut total = 0.0;
            for i in 0..inputs.m() {
                let tau = adsp_local_steps(inputs.gamma, inputs.delta_c[i], o[i], t[i]).map_err(|e| match e {
                    Error::InfeasibleRate { interval, overhead, .. } => Error::InfeasibleRate {
                        worker: i,
                        interval,
                        overhead,
                    },
                    other => other,
                })?;
                total += 1.0 / (t[i] + o[i] / tau);
            }
            total / inputs.m() as f64
        }
    })
}

/// Counts of each staleness value.
pub fn staleness_histogram(samples: &[u64]) -> Vec<u64> {
    let max = samples.iter().copied().max().unwrap_or(0) as usize;
    let mut h = vec![0u64; if samples.is_empty() { 0 } else { max + 1 }];
    for &s in samples {
        h[s as usize] += 1;
    }
    h
}

/// Total-variation distance between the empirical staleness distribution
/// and `Geom(p)`, `P(l) = p (1-p)^l`.
pub fn staleness_fit(samples: &[u64], p: f64) -> Result<f64> {
    if samples.len() < 1000 {
        return Err(Error::InsufficientData {
            needed: 1000,
            got: samples.len(),
        });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid("p", "must lie in (0, 1]"));
    }
    let hist = staleness_histogram(samples);
    let n = samples.len() as f64;
    let mut dist = 0.0;
    let mut geom_mass = 0.0;
    for (l, &c) in hist.iter().enumerate() {
        let g = p * (1.0 - p).powi(l as i32);
        geom_mass += g;
        dist += (c as f64 / n - g).abs();
    }
    // geometric tail beyond the largest observed value
    dist += (1.0 - geom_mass).max(0.0);
    Ok(0.5 * dist)
}

/// Maximum-likelihood geometric parameter for the samples.
pub fn geometric_mle(samples: &[u64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mean = samples.iter().sum::<u64>() as f64 / samples.len() as f64;
    Some(1.0 / (1.0 + mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub t: u64,
    pub regret: f64,
    pub normalized: f64,
}

/// Cumulative regret `R(T) = sum_{t<=T} (f_t - f*)` over losses recorded at
/// PS steps `1..=T`, with `R(T)/sqrt(T)`.
pub fn regret_curve(losses: &[f64], optimal_loss: f64) -> Result<Vec<RegretPoint>> {
    if losses.iter().any(|l| !l.is_finite()) || !optimal_loss.is_finite() {
        return Err(Error::NonFinite { what: "loss trace" });
    }
    let mut r = 0.0;
    Ok(losses
        .iter()
        .enumerate()
        .map(|(k, l)| {
            r += l - optimal_loss;
            let t = k as u64 + 1;
            RegretPoint {
                t,
                regret: r,
                normalized: r / (t as f64).sqrt(),
            }
        })
        .collect())
}

/// True when the normalized regret never rises more than `tolerance`
/// (relative) above its running minimum over the last `tail` fraction of
/// the curve.
pub fn tail_non_increasing(curve: &[RegretPoint], tail: f64, tolerance: f64) -> bool {
    let start = ((1.0 - tail) * curve.len() as f64).floor() as usize;
    let mut best = f64::INFINITY;
    for p in &curve[start.min(curve.len())..] {
        if p.normalized > best * (1.0 + tolerance) {
            return false;
        }
        best = best.min(p.normalized);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdspPlusResult {
    pub taus: Vec<u64>,
    pub convergence_time: Option<f64>,
    /// Every evaluated combination with its convergence time.
    pub table: Vec<(Vec<u64>, Option<f64>)>,
}

/// Largest number of steps that fit in one commit cycle's compute time.
pub fn max_local_steps(gamma: f64, delta_c: u64, overhead: f64, step_time: f64) -> Result<u64> {
    let tau = adsp_local_steps(gamma, delta_c, overhead, step_time)?;
    Ok((tau + 1e-9).floor().max(1.0) as u64)
}

const ADSP_PLUS_MAX_WORKERS: usize = 4;
const ADSP_PLUS_MAX_TAU: u64 = 16;

/// Exhaustive search over per-worker local-step caps at a fixed commit rate.
/// Every combination is a full simulation; the fastest to converge wins.
#[allow(clippy::too_many_arguments)]
pub fn adsp_plus_search(
    task: &TrainingTask,
    cluster: &ClusterSpec,
    delta_c: u64,
    tau_max: u64,
    base: &AdspParams,
    hp: &Hyperparams,
    stop: &StopRule,
    seed: u64,
) -> Result<AdspPlusResult> {
    let m = cluster.workers();
    if m > ADSP_PLUS_MAX_WORKERS || tau_max > ADSP_PLUS_MAX_TAU {
        return Err(Error::Budget(format!(
            "grid of {m} workers x tau <= {tau_max} exceeds {ADSP_PLUS_MAX_WORKERS} workers x tau <= {ADSP_PLUS_MAX_TAU}"
        )));
    }
    if tau_max == 0 {
        return Err(Error::invalid("tau_max", "must be positive"));
    }
    let bounds = (0..m)
        .map(|i| {
            max_local_steps(base.gamma, delta_c, cluster.round_trip(i), cluster.step_time(i))
                .map(|b| b.min(tau_max))
                .map_err(|e| match e {
                    Error::InfeasibleRate { interval, overhead, .. } => Error::InfeasibleRate {
                        worker: i,
                        interval,
                        overhead,
                    },
                    other => other,
                })
        })
        .collect::<Result<Vec<u64>>>()?;
    let mut combos: Vec<Vec<u64>> = vec![vec![]];
    for &b in &bounds {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (1..=b).map(move |t| {
                    let mut c = c.clone();
                    c.push(t);
                    c
                })
            })
            .collect();
    }
    let evaluate = |taus: &Vec<u64>| -> Result<Option<f64>> {
        let params = AdspParams {
            fixed_increment: Some(delta_c),
            local_step_caps: Some(taus.clone()),
            ..base.clone()
        };
        Ok(run(task, cluster, &SyncPolicy::Adsp(params), hp, stop, seed)?.convergence_time)
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(combos.len()).max(1);
    let chunk = combos.len().div_ceil(threads);
    let results: Vec<Result<Option<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = combos
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(evaluate).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("search thread panicked"))
            .collect()
    });
    let mut table = Vec::with_capacity(combos.len());
    for (c, r) in combos.into_iter().zip(results) {
        table.push((c, r?));
    }
    let key = |t: &Option<f64>| t.unwrap_or(f64::INFINITY);
    let best = table
        .iter()
        .min_by(|a, b| key(&a.1).total_cmp(&key(&b.1)))
        .expect("grid is nonempty");
    Ok(AdspPlusResult {
        taus: best.0.clone(),
        convergence_time: best.1,
        table: table.clone(),
    })
}

/// One verification line: theory against measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub theory: f64,
    pub empirical: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl CheckReport {
    /// Passes when `|empirical - theory| <= tolerance * |theory|`.
    pub fn relative(name: &str, theory: f64, empirical: f64, tolerance: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            theory,
            empirical,
            tolerance,
            passed: (empirical - theory).abs() <= tolerance * theory.abs(),
            note: String::new(),
        }
    }

    /// Passes when `empirical < tolerance`.
    pub fn below(name: &str, theory: f64, empirical: f64, tolerance: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            theory,
            empirical,
            tolerance,
            passed: empirical < tolerance,
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}
