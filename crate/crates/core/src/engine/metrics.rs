use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::EpochDecision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub time: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerLedger {
    pub worker: usize,
    pub comp_s: f64,
    pub comm_s: f64,
    pub blocked_s: f64,
    pub commits: u64,
    pub local_steps: u64,
}

impl WorkerLedger {
    pub fn new(worker: usize) -> Self {
        WorkerLedger {
            worker,
            comp_s: 0.0,
            comm_s: 0.0,
            blocked_s: 0.0,
            commits: 0,
            local_steps: 0,
        }
    }
}

/// Snapshot taken at each checkpoint tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub time: f64,
    /// Commits issued per worker.
    pub commits: Vec<u64>,
    /// Commits applied at the PS per worker.
    pub applied: Vec<u64>,
    pub local_steps: Vec<u64>,
    /// ADSP commit targets for the period starting here.
    #[serde(default)]
    pub rates: Vec<u64>,
    #[serde(default)]
    pub c_target: Option<u64>,
    /// Local-step period in force (Fixed ADACOMM / ADACOMM / BSP).
    #[serde(default)]
    pub tau: Option<u64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: String,
    pub run_id: String,
    pub seed: u64,
    pub loss_trace: Vec<LossSample>,
    pub ledgers: Vec<WorkerLedger>,
    pub checkpoints: Vec<Checkpoint>,
    /// Foreign commits applied between a worker's consecutive commits.
    pub staleness: Vec<u64>,
    pub total_steps: u64,
    pub elapsed: f64,
    pub convergence_time: Option<f64>,
    pub final_loss: f64,
    #[serde(default)]
    pub decisions: Vec<EpochDecision>,
}

impl RunMetrics {
    pub fn workers(&self) -> usize {
        self.ledgers.len()
    }

    /// Commits per worker at the end of the run.
    pub fn commits(&self) -> Vec<u64> {
        self.ledgers.iter().map(|l| l.commits).collect()
    }

    /// Loss values only, one per PS step (the first entry is the initial loss).
    pub fn losses(&self) -> Vec<f64> {
        self.loss_trace.iter().map(|s| s.loss).collect()
    }

    /// Largest pairwise commit-count gap over all checkpoints.
    pub fn max_commit_gap(&self) -> u64 {
        self.checkpoints
            .iter()
            .map(|c| {
                let hi = c.commits.iter().max().copied().unwrap_or(0);
                let lo = c.commits.iter().min().copied().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }

    /// Mean per-worker local steps per second between the first checkpoint at
    /// or after `warmup` and the last checkpoint.
    pub fn throughput(&self, warmup: f64) -> Option<f64> {
        let first = self.checkpoints.iter().find(|c| c.time >= warmup)?;
        let last = self.checkpoints.last()?;
        let span = last.time - first.time;
        if span <= 0.0 {
            return None;
        }
        let m = first.local_steps.len() as f64;
        let steps: u64 = last
            .local_steps
            .iter()
            .zip(&first.local_steps)
            .map(|(b, a)| b - a)
            .sum();
        Some(steps as f64 / span / m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn loss_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.loss_trace {
            w.serialize(LossRow {
                time: s.time,
                loss: s.loss,
                policy: &self.policy,
                run_id: &self.run_id,
            })
            .map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn ledger_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.ledgers {
            w.serialize(LedgerRow {
                worker: l.worker,
                comp_s: l.comp_s,
                comm_s: l.comm_s,
                blocked_s: l.blocked_s,
                commits: l.commits,
            })
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

#[derive(Serialize)]
struct LossRow<'a> {
    time: f64,
    loss: f64,
    policy: &'a str,
    run_id: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCsvRow {
    pub time: f64,
    pub loss: f64,
    pub policy: String,
    pub run_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub worker: usize,
    pub comp_s: f64,
    pub comm_s: f64,
    pub blocked_s: f64,
    pub commits: u64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_csv<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_err)
}

/// Earliest time at which the variance of the last `window` losses drops
/// below `eps_var`.
pub fn detect_convergence(trace: &[LossSample], window: usize, eps_var: f64) -> Option<f64> {
    let mut tracker = ConvergenceTracker::new(window, eps_var);
    trace.iter().find(|s| tracker.push(s.loss)).map(|s| s.time)
}

/// Same rule applied to the loss read off a uniform time grid, so the window
/// spans the same virtual time whatever the commit frequency. The value at a
/// grid point is the latest loss at or before it; grid points after the last
/// sample are not evaluated.
pub fn detect_convergence_on_grid(trace: &[LossSample], interval: f64, window: usize, eps_var: f64) -> Option<f64> {
    let first = trace.first()?;
    let mut mon = ConvergenceMonitor::new(window, eps_var, Some(interval), first.loss);
    if let Some(t) = mon.initial() {
        return Some(t);
    }
    trace[1..].iter().find_map(|s| mon.observe(s.time, s.loss))
}

/// Online convergence check used by the engines.
#[derive(Debug, Clone)]
pub(crate) struct ConvergenceMonitor {
    tracker: ConvergenceTracker,
    interval: Option<f64>,
    next: f64,
    last: f64,
    hit: Option<f64>,
}

impl ConvergenceMonitor {
    pub fn new(window: usize, eps_var: f64, interval: Option<f64>, loss0: f64) -> Self {
        let mut tracker = ConvergenceTracker::new(window, eps_var);
        let hit = tracker.push(loss0).then_some(0.0);
        ConvergenceMonitor {
            tracker,
            interval,
            next: interval.unwrap_or(0.0),
            last: loss0,
            hit,
        }
    }

    pub fn initial(&self) -> Option<f64> {
        self.hit
    }

    /// Feed a new loss; returns the convergence time the first time it is found.
    pub fn observe(&mut self, now: f64, loss: f64) -> Option<f64> {
        if self.hit.is_some() {
            self.last = loss;
            return None;
        }
        match self.interval {
            None => {
                if self.tracker.push(loss) {
                    self.hit = Some(now);
                }
            }
            Some(dt) => {
                while self.next < now {
                    if self.tracker.push(self.last) {
                        self.hit = Some(self.next);
                        break;
                    }
                    self.next += dt;
                }
            }
        }
        self.last = loss;
        self.hit
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvergenceTracker {
    window: usize,
    eps_var: f64,
    buf: std::collections::VecDeque<f64>,
}

impl ConvergenceTracker {
    pub fn new(window: usize, eps_var: f64) -> Self {
        ConvergenceTracker {
            window: window.max(1),
            eps_var,
            buf: std::collections::VecDeque::with_capacity(window.max(1) + 1),
        }
    }

    pub fn push(&mut self, loss: f64) -> bool {
        self.buf.push_back(loss);
        if self.buf.len() > self.window {
            self.buf.pop_front();
        }
        if self.buf.len() < self.window {
            return false;
        }
        let n = self.buf.len() as f64;
        let mean = self.buf.iter().sum::<f64>() / n;
        let var = self.buf.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var < self.eps_var
    }
}

/// Per-worker `(comm + blocked) / elapsed`.
pub fn waiting_fraction(metrics: &RunMetrics) -> Vec<f64> {
    metrics
        .ledgers
        .iter()
        .map(|l| {
            if metrics.elapsed > 0.0 {
                ((l.comm_s + l.blocked_s) / metrics.elapsed).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn mean_waiting_fraction(metrics: &RunMetrics) -> f64 {
    let w = waiting_fraction(metrics);
    if w.is_empty() {
        0.0
    } else {
        w.iter().sum::<f64>() / w.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(losses: &[f64]) -> Vec<LossSample> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossSample { time: i as f64, loss })
            .collect()
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(detect_convergence(&trace(&[2.0; 30]), 10, 1e-12), Some(9.0));
        let osc: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(detect_convergence(&trace(&osc), 10, 1e-3), None);
        assert_eq!(detect_convergence(&trace(&[1.0; 5]), 10, 1.0), None);
    }

    #[test]
    fn grid_detection_ignores_update_frequency() {
        let curve = |every: f64| -> Vec<LossSample> {
            (0..=4000)
                .map(|k| k as f64 * every)
                .take_while(|&t| t <= 4000.0)
                .map(|time| LossSample { time, loss: (-time / 100.0).exp() })
                .collect()
        };
        let (dense, sparse) = (curve(1.0), curve(20.0));
        let by_step = (detect_convergence(&dense, 10, 1e-8).unwrap(), detect_convergence(&sparse, 10, 1e-8).unwrap());
        assert!(by_step.1 > by_step.0 + 200.0, "{by_step:?}");
        let a = detect_convergence_on_grid(&dense, 20.0, 10, 1e-8).unwrap();
        let b = detect_convergence_on_grid(&sparse, 20.0, 10, 1e-8).unwrap();
        assert!((a - b).abs() <= 20.0, "{a} {b}");
        assert_eq!(detect_convergence_on_grid(&trace(&[2.0; 30]), 1.0, 10, 1e-12), Some(9.0));
    }

    #[test]
    fn csv_round_trip() {
        let m = RunMetrics {
            policy: "adsp".into(),
            run_id: "abc-s1".into(),
            seed: 1,
            loss_trace: trace(&[1.0 / 3.0, 0.1 + 0.2, 1e-300, 12345.678901234567]),
            ledgers: vec![WorkerLedger {
                worker: 0,
                comp_s: 0.1 + 0.7,
                comm_s: 2.0 / 3.0,
                blocked_s: 0.0,
                commits: 7,
                local_steps: 11,
            }],
            checkpoints: vec![],
            staleness: vec![0, 1, 2],
            total_steps: 7,
            elapsed: 3.0,
            convergence_time: None,
            final_loss: 0.3,
            decisions: vec![],
        };
        let rows: Vec<LossCsvRow> = parse_csv(&m.loss_csv().unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        for (r, s) in rows.iter().zip(&m.loss_trace) {
            assert_eq!((r.time, r.loss), (s.time, s.loss));
            assert_eq!(r.policy, "adsp");
        }
        assert!(m.loss_csv().unwrap().starts_with("time,loss,policy,run_id\n"));
        let ledger: Vec<LedgerRow> = parse_csv(&m.ledger_csv().unwrap()).unwrap();
        assert_eq!(ledger[0].comp_s, m.ledgers[0].comp_s);
        assert_eq!(ledger[0].comm_s, m.ledgers[0].comm_s);
        assert!(m.ledger_csv().unwrap().starts_with("worker,comp_s,comm_s,blocked_s,commits\n"));
        assert_eq!(RunMetrics::from_json(&m.to_json().unwrap()).unwrap(), m);
    }
}
