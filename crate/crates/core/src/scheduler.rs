//! ADSP commit-rate scheduling: per-period commit targets, the online
//! reward built from a fitted `1/t` loss curve, and the sequential `+1`
//! search over commit targets run at each epoch boundary.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sync::{max_feasible_rate, AdspParams};

/// `loss(t) = 1 / (a1^2 t + a2) + a3`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardFit {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Root-mean-square residual over the fitted samples.
    pub residual: f64,
}

impl RewardFit {
    pub fn eval(&self, t: f64) -> f64 {
        1.0 / (self.a1 * self.a1 * t + self.a2) + self.a3
    }
}

/// Per-worker commit rates for the next period: `C_target - c_i`.
pub fn commit_rate_targets(c_target: u64, commits: &[u64]) -> Result<Vec<u64>> {
    let max = commits.iter().copied().max().unwrap_or(0);
    if c_target <= max {
        return Err(Error::TargetTooSmall {
            target: c_target,
            max_commits: max,
        });
    }
    Ok(commits.iter().map(|c| c_target - c).collect())
}

fn model(p: &Vector3<f64>, t: f64) -> f64 {
    1.0 / (p[0] * t + p[1]) + p[2]
}

fn sse(p: &Vector3<f64>, samples: &[(f64, f64)]) -> f64 {
    samples.iter().map(|&(t, l)| (model(p, t) - l).powi(2)).sum()
}

fn denominators_positive(p: &Vector3<f64>, samples: &[(f64, f64)]) -> bool {
    p[0] >= 0.0 && samples.iter().all(|&(t, _)| p[0] * t + p[1] > 0.0)
}

/// Levenberg-Marquardt on `(s = a1^2, a2, a3)` with `s >= 0`.
fn refine(mut p: Vector3<f64>, samples: &[(f64, f64)]) -> Vector3<f64> {
    let mut cost = sse(&p, samples);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(t, l) in samples {
            let den = p[0] * t + p[1];
            let inv2 = 1.0 / (den * den);
            let j = Vector3::new(-t * inv2, -inv2, 1.0);
            let r = model(&p, t) - l;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * (jtj[(k, k)].abs() + 1e-300);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = p + step;
            cand[0] = cand[0].max(0.0);
            if denominators_positive(&cand, samples) {
                let c = sse(&cand, samples);
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    p = cand;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-15);
                    improved = true;
                    if rel < 1e-15 {
                        return p;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved || cost < 1e-30 {
            break;
        }
    }
    p
}

/// Least-squares fit of `loss(t) = 1/(a1^2 t + a2) + a3` from a grid of
/// starting points (a3 at fractions of the smallest loss; `a1^2`, `a2`
/// solved through the first and last samples).
pub fn fit_reward_curve(samples: &[(f64, f64)]) -> Result<RewardFit> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: samples.len(),
        });
    }
    if samples.iter().any(|(t, l)| !t.is_finite() || !l.is_finite()) {
        return Err(Error::NonFinite { what: "loss samples" });
    }
    let mut pts = samples.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("samples", "sample times must be distinct"));
    }
    let (t0, l0) = pts[0];
    let (t1, l1) = pts[pts.len() - 1];
    let lmin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let lmax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let scale = lmax.abs().max(lmin.abs()).max(1e-300);
    if lmax - lmin <= 1e-12 * scale || l1 >= l0 {
        return Err(Error::FitFailure("loss does not decrease over the window".into()));
    }

    let span = lmax - lmin;
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for frac in [0.9, 0.0, 0.5, 0.99, -1.0, -10.0] {
        let a3 = if frac >= 0.0 { lmin - (1.0 - frac) * lmin.abs().max(span) } else { lmin + frac * span };
        let (y0, y1) = (1.0 / (l0 - a3), 1.0 / (l1 - a3));
        let s = (y1 - y0) / (t1 - t0);
        let a2 = y0 - s * t0;
        if !(s > 0.0) || !s.is_finite() || !a2.is_finite() {
            continue;
        }
        let p0 = Vector3::new(s, a2, a3);
        if !denominators_positive(&p0, &pts) {
            continue;
        }
        let p = refine(p0, &pts);
        let c = sse(&p, &pts);
        if c.is_finite() && best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, p));
        }
    }
    let (cost, p) = best.ok_or_else(|| Error::FitFailure("no admissible starting point".into()))?;
    if !denominators_positive(&p, &pts) || p[0] * (t1 - t0) <= 1e-12 * p[1].abs() {
        return Err(Error::FitFailure("degenerate curve".into()));
    }
    Ok(RewardFit {
        a1: p[0].sqrt(),
        a2: p[1],
        a3: p[2],
        residual: (cost / pts.len() as f64).sqrt(),
    })
}

/// Loss-decrease speed: the reciprocal of the time at which the fitted curve
/// reaches `loss_ref`.
pub fn reward_from_fit(fit: &RewardFit, loss_ref: f64) -> Result<f64> {
    if !(loss_ref > fit.a3) {
        return Err(Error::UnreachableLoss { loss: loss_ref });
    }
    let den = 1.0 / (loss_ref - fit.a3) - fit.a2;
    if !(den > 0.0) {
        return Err(Error::UnreachableLoss { loss: loss_ref });
    }
    Ok(fit.a1 * fit.a1 / den)
}

/// Negative least-squares slope of loss against time.
pub fn slope_reward(samples: &[(f64, f64)]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mt = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let ml = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(t, l) in samples {
        num += (t - mt) * (l - ml);
        den += (t - mt) * (t - mt);
    }
    if den == 0.0 {
        0.0
    } else {
        -num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Fit,
    Slope,
}

/// Loss samples of one probe window, with its curve fit over training time.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeWindow {
    pub samples: Vec<(f64, f64)>,
    pub fit: Option<RewardFit>,
}

impl ProbeWindow {
    pub fn new(samples: Vec<(f64, f64)>) -> Self {
        let fit = fit_reward_curve(&samples).ok();
        ProbeWindow { samples, fit }
    }

    pub fn final_loss(&self) -> f64 {
        self.samples
            .iter()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map_or(f64::NAN, |s| s.1)
    }

    pub fn reward_at(&self, loss_ref: f64) -> Option<f64> {
        let r = reward_from_fit(self.fit.as_ref()?, loss_ref).ok()?;
        r.is_finite().then_some(r)
    }

    pub fn slope_reward(&self) -> f64 {
        slope_reward(&self.samples)
    }
}

/// Reward of a single window: reciprocal time for the fitted curve to reach
/// 90% of the window's final loss, or the slope when the fit is degenerate.
pub fn probe_reward(samples: &[(f64, f64)]) -> (f64, RewardKind) {
    let w = ProbeWindow::new(samples.to_vec());
    match w.reward_at(0.9 * w.final_loss()) {
        Some(r) => (r, RewardKind::Fit),
        None => (w.slope_reward(), RewardKind::Slope),
    }
}

/// Rewards of two consecutive windows at a shared reference loss (90% of
/// the lower final loss), so both measure time to the same target.
pub fn compare_windows(prev: &ProbeWindow, cur: &ProbeWindow) -> (f64, f64, RewardKind) {
    let loss_ref = 0.9 * prev.final_loss().min(cur.final_loss());
    match (prev.reward_at(loss_ref), cur.reward_at(loss_ref)) {
        (Some(a), Some(b)) => (a, b, RewardKind::Fit),
        _ => (prev.slope_reward(), cur.slope_reward(), RewardKind::Slope),
    }
}

/// Sequential `C, C+1, C+2, ...` search. Stops at the first candidate whose
/// reward does not beat its predecessor, at the feasibility cap, or when the
/// probe budget runs out.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitRateSearch {
    start: u64,
    cap: Option<u64>,
    budget: usize,
    candidates: Vec<u64>,
    rewards: Vec<f64>,
    decision: Option<u64>,
}

impl CommitRateSearch {
    pub fn new(start: u64, cap: Option<u64>, budget: usize) -> Self {
        let mut s = CommitRateSearch {
            start,
            cap,
            budget: budget.max(1),
            candidates: vec![start],
            rewards: Vec::new(),
            decision: None,
        };
        if cap.is_some_and(|c| c <= start) {
            // nothing above the start is feasible
            s.decision = Some(start);
            s.candidates.clear();
        }
        s
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    /// Candidate awaiting evaluation, or `None` once decided.
    pub fn current(&self) -> Option<u64> {
        if self.decision.is_some() {
            None
        } else {
            self.candidates.last().copied()
        }
    }

    pub fn decision(&self) -> Option<u64> {
        self.decision
    }

    pub fn candidates(&self) -> &[u64] {
        &self.candidates
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn report(&mut self, reward: f64) {
        let prev = self.rewards.last().copied();
        self.step(prev, reward);
    }

    /// Report a reward together with the predecessor's reward re-evaluated
    /// on the same footing.
    pub fn report_against(&mut self, prev: f64, reward: f64) {
        self.step(Some(prev), reward);
    }

    fn step(&mut self, prev: Option<f64>, reward: f64) {
        let Some(current) = self.current() else {
            return;
        };
        self.rewards.push(reward);
        if prev.is_some_and(|p| !(reward > p)) {
            self.decision = Some(current - 1);
            return;
        }
        let next = current + 1;
        if self.cap.is_some_and(|c| next > c) || self.candidates.len() >= self.budget {
            self.decision = Some(current);
            return;
        }
        self.candidates.push(next);
    }

    /// Settle on the best candidate seen so far (used when an epoch ends
    /// before the search does).
    pub fn force_decide(&mut self) -> u64 {
        if let Some(d) = self.decision {
            return d;
        }
        let evaluated = self.rewards.len();
        let d = if evaluated == 0 {
            self.start
        } else {
            self.candidates[evaluated - 1]
        };
        self.candidates.truncate(evaluated);
        self.decision = Some(d);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub chosen: u64,
    pub candidates: Vec<u64>,
    pub rewards: Vec<f64>,
}

/// Drive a [`CommitRateSearch`] with a synchronous evaluator.
pub fn decide_commit_rate(
    start: u64,
    cap: Option<u64>,
    budget: usize,
    mut evaluate: impl FnMut(u64) -> f64,
) -> SearchOutcome {
    let mut search = CommitRateSearch::new(start, cap, budget);
    while let Some(c) = search.current() {
        search.report(evaluate(c));
    }
    SearchOutcome {
        chosen: search.decision().unwrap_or(start),
        candidates: search.candidates().to_vec(),
        rewards: search.rewards().to_vec(),
    }
}

/// One epoch's search record, emitted in the run output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDecision {
    pub epoch: u64,
    pub start_time: f64,
    pub candidates: Vec<u64>,
    pub rewards: Vec<f64>,
    pub reward_kinds: Vec<RewardKind>,
    pub chosen: u64,
    /// Per-period commit increment used for the rest of the epoch.
    pub increment: u64,
}

#[derive(Debug, Clone)]
struct Probe {
    candidate: u64,
    periods_left: u64,
    samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
struct ActiveSearch {
    search: CommitRateSearch,
    epoch: u64,
    start_time: f64,
    kinds: Vec<RewardKind>,
    probe: Option<Probe>,
    last_window: Option<ProbeWindow>,
}

/// Commit targets for the period that starts at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodPlan {
    pub c_target: u64,
    pub rates: Vec<u64>,
    /// Extra loss sample to take inside the period (probe window midpoint).
    pub sample_at: Option<f64>,
}

/// Scheduler state across checkpoints. Candidate `C` of an epoch whose
/// search starts at `C_start = max c_i + 1` maps to the per-period
/// increment `C - C_start + 1`; the commit target then advances by that
/// increment at every checkpoint so that each `C_target - c_i` stays >= 1.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    params: AdspParams,
    overheads: Vec<f64>,
    period: u64,
    c_target: u64,
    increment: u64,
    active: Option<ActiveSearch>,
    log: Vec<EpochDecision>,
}

impl SchedulerState {
    pub fn new(params: AdspParams, overheads: Vec<f64>) -> Self {
        let increment = params.fixed_increment.unwrap_or(1);
        SchedulerState {
            params,
            overheads,
            period: 0,
            c_target: 0,
            increment,
            active: None,
            log: Vec::new(),
        }
    }

    pub fn c_target(&self) -> u64 {
        self.c_target
    }

    pub fn increment(&self) -> u64 {
        self.increment
    }

    pub fn epoch(&self) -> u64 {
        self.period / self.params.periods_per_epoch()
    }

    pub fn decisions(&self) -> &[EpochDecision] {
        &self.log
    }

    pub fn into_decisions(self) -> Vec<EpochDecision> {
        self.log
    }

    pub fn is_searching(&self) -> bool {
        self.active.is_some()
    }

    /// Largest feasible `C_target` given current commit counts.
    fn target_cap(&self, commits: &[u64]) -> Option<u64> {
        commits
            .iter()
            .zip(&self.overheads)
            .filter_map(|(&c, &o)| max_feasible_rate(self.params.gamma, o).map(|n| c + n))
            .min()
    }

    fn infeasible(&self, commits: &[u64]) -> Error {
        let (worker, &overhead) = self
            .overheads
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one worker");
        let _ = commits;
        Error::InfeasibleRate {
            worker,
            interval: self.params.gamma,
            overhead,
        }
    }

    /// Loss sample taken inside a probe window.
    pub fn on_sample(&mut self, now: f64, loss: f64) {
        if let Some(probe) = self.active.as_mut().and_then(|a| a.probe.as_mut()) {
            if probe.samples.last().is_none_or(|s| s.0 < now) {
                probe.samples.push((now, loss));
            }
        }
    }

    fn finish_search(&mut self, mut active: ActiveSearch, start_max: u64) {
        let chosen = active.search.force_decide();
        let increment = chosen.saturating_sub(start_max).max(1);
        self.increment = increment;
        let n = active.search.rewards().len();
        active.kinds.truncate(n);
        self.log.push(EpochDecision {
            epoch: active.epoch,
            start_time: active.start_time,
            candidates: active.search.candidates().to_vec(),
            rewards: active.search.rewards().to_vec(),
            reward_kinds: active.kinds,
            chosen,
            increment,
        });
    }

    /// Checkpoint handler. `commits` are the commits each worker has issued
    /// so far; `loss` is the current global loss.
    pub fn on_checkpoint(&mut self, now: f64, commits: &[u64], loss: f64) -> Result<PeriodPlan> {
        let max_c = commits.iter().copied().max().unwrap_or(0);
        let epoch_len = self.params.periods_per_epoch();
        let per_probe = self.params.periods_per_probe();

        // close or extend the running probe
        if let Some(mut active) = self.active.take() {
            let start_max = active.search.start() - 1;
            if let Some(mut probe) = active.probe.take() {
                if probe.samples.last().is_none_or(|s| s.0 < now) {
                    probe.samples.push((now, loss));
                }
                probe.periods_left -= 1;
                if probe.periods_left == 0 {
                    let window = ProbeWindow::new(probe.samples);
                    match active.last_window.take() {
                        Some(prev) => {
                            let (r_prev, r, kind) = compare_windows(&prev, &window);
                            active.search.report_against(r_prev, r);
                            active.kinds.push(kind);
                        }
                        None => {
                            let (r, kind) = probe_reward(&window.samples);
                            active.search.report(r);
                            active.kinds.push(kind);
                        }
                    }
                    active.last_window = Some(window);
                } else {
                    active.probe = Some(probe);
                }
            }
            if active.search.decision().is_some() || self.period.is_multiple_of(epoch_len) {
                self.finish_search(active, start_max);
            } else {
                self.active = Some(active);
            }
        }

        if self.period.is_multiple_of(epoch_len) && self.params.fixed_increment.is_none() {
            let start = max_c + 1;
            let cap = self.target_cap(commits);
            if cap.is_some_and(|c| c < start) {
                return Err(self.infeasible(commits));
            }
            self.active = Some(ActiveSearch {
                search: CommitRateSearch::new(start, cap, self.params.probe_budget),
                epoch: self.period / epoch_len,
                start_time: now,
                kinds: Vec::new(),
                probe: None,
                last_window: None,
            });
            if let Some(active) = &self.active {
                if active.search.decision().is_some() {
                    let active = self.active.take().unwrap();
                    self.finish_search(active, max_c);
                }
            }
        }

        let mut sample_at = None;
        let increment = match self.active.as_mut() {
            Some(active) => {
                let candidate = active.search.current().expect("undecided search has a candidate");
                if active.probe.is_none() {
                    active.probe = Some(Probe {
                        candidate,
                        periods_left: per_probe,
                        samples: vec![(now, loss)],
                    });
                    let mid = now + 0.5 * self.params.eval_window;
                    // the midpoint only needs its own tick if it is not a checkpoint
                    let k = 0.5 * self.params.eval_window / self.params.gamma;
                    if (k - k.round()).abs() > 1e-9 {
                        sample_at = Some(mid);
                    }
                }
                let probe = active.probe.as_ref().unwrap();
                probe.candidate - (active.search.start() - 1)
            }
            None => self.increment,
        };

        let mut c_target = (self.c_target + increment).max(max_c + 1);
        if let Some(cap) = self.target_cap(commits) {
            if cap < max_c + 1 {
                return Err(self.infeasible(commits));
            }
            c_target = c_target.min(cap);
        }
        self.c_target = c_target;
        self.period += 1;
        let rates = commit_rate_targets(c_target, commits)?;
        Ok(PeriodPlan {
            c_target,
            rates,
            sample_at,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(a1: f64, a2: f64, a3: f64, ts: &[f64]) -> Vec<(f64, f64)> {
        ts.iter().map(|&t| (t, 1.0 / (a1 * a1 * t + a2) + a3)).collect()
    }

    #[test]
    fn targets_examples() {
        assert_eq!(commit_rate_targets(6, &[3, 4, 5]).unwrap(), vec![3, 2, 1]);
        assert_eq!(commit_rate_targets(1, &[0, 0, 0]).unwrap(), vec![1, 1, 1]);
        assert!(matches!(
            commit_rate_targets(5, &[3, 4, 5]),
            Err(Error::TargetTooSmall { .. })
        ));
    }

    #[test]
    fn fit_recovers_synthetic_curve() {
        let samples = gen(1.0, 2.0, 0.1, &[0.0, 30.0, 60.0]);
        let fit = fit_reward_curve(&samples).unwrap();
        for &(t, l) in &samples {
            assert!((fit.eval(t) - l).abs() < 1e-6);
        }
        assert!((fit.a1 - 1.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.a2 - 2.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.a3 - 0.1).abs() < 1e-5, "{fit:?}");
    }

    #[test]
    fn fit_exact_hand_values() {
        // a1 = 1, a2 = 1, a3 = 0: l(0) = 1, l(1) = 1/2, l(3) = 1/4
        let fit = fit_reward_curve(&[(0.0, 1.0), (1.0, 0.5), (3.0, 0.25)]).unwrap();
        assert!(fit.residual < 1e-9);
        assert!((fit.a1 - 1.0).abs() < 1e-6 && (fit.a2 - 1.0).abs() < 1e-6 && fit.a3.abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_flat_and_short() {
        assert!(matches!(
            fit_reward_curve(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]),
            Err(Error::FitFailure(_))
        ));
        assert!(matches!(
            fit_reward_curve(&[(0.0, 1.0), (1.0, 0.5)]),
            Err(Error::InsufficientData { .. })
        ));
        let (r, kind) = probe_reward(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]);
        assert_eq!(kind, RewardKind::Slope);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn reward_examples() {
        let fit = RewardFit {
            a1: 1.0,
            a2: 2.0,
            a3: 0.1,
            residual: 0.0,
        };
        // 1 / (1/0.1 - 2) = 0.125
        assert!((reward_from_fit(&fit, 0.2).unwrap() - 0.125).abs() < 1e-12);
        for t0 in [0.5, 3.0, 40.0] {
            let r = reward_from_fit(&fit, fit.eval(t0)).unwrap();
            assert!((r - 1.0 / t0).abs() < 1e-9 * (1.0 / t0));
        }
        let double = RewardFit { a1: 2.0, ..fit };
        assert!((reward_from_fit(&double, 0.2).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            reward_from_fit(&fit, 0.1),
            Err(Error::UnreachableLoss { .. })
        ));
    }

    #[test]
    fn decreasing_loss_gives_positive_reward() {
        let samples = gen(0.3, 1.5, 0.05, &[100.0, 130.0, 160.0]);
        let (r, kind) = probe_reward(&samples);
        assert_eq!(kind, RewardKind::Fit);
        assert!(r > 0.0);
    }

    #[test]
    fn search_examples() {
        let peaked = |c: u64| -((c as f64) - 8.0).powi(2);
        let out = decide_commit_rate(5, None, 10, peaked);
        assert_eq!(out.chosen, 8);
        assert_eq!(out.candidates, vec![5, 6, 7, 8, 9]);

        let falling = |c: u64| -(c as f64);
        assert_eq!(decide_commit_rate(5, None, 10, falling).chosen, 5);

        let rising = |c: u64| c as f64;
        let out = decide_commit_rate(5, Some(6), 10, rising);
        assert_eq!(out.chosen, 6);
        assert_eq!(out.candidates, vec![5, 6]);

        let out = decide_commit_rate(1, None, 10, rising);
        assert_eq!(out.chosen, 10);
        assert_eq!(out.candidates.len(), 10);
    }

    #[test]
    fn search_picks_local_maximum() {
        // chosen reward is >= both evaluated neighbours
        for peak in 3..15u64 {
            let f = |c: u64| 1.0 / (1.0 + (c as f64 - peak as f64).abs());
            let out = decide_commit_rate(2, None, 20, f);
            assert_eq!(out.chosen, peak.max(2));
        }
    }

    #[test]
    fn scheduler_fixed_increment_keeps_rates_positive() {
        let params = AdspParams {
            fixed_increment: Some(3),
            ..AdspParams::default()
        };
        let mut s = SchedulerState::new(params, vec![1.0, 2.0]);
        let mut commits = vec![0u64, 0];
        for p in 0..30 {
            let plan = s.on_checkpoint(60.0 * p as f64, &commits, 1.0).unwrap();
            assert!(plan.rates.iter().all(|&r| r >= 1));
            assert_eq!(plan.rates, vec![3, 3]);
            for (c, r) in commits.iter_mut().zip(&plan.rates) {
                *c += r;
            }
        }
    }

    #[test]
    fn scheduler_caps_infeasible_rates() {
        // overhead 7 s: at most 8 commits per 60 s period
        let params = AdspParams {
            fixed_increment: Some(20),
            ..AdspParams::default()
        };
        let mut s = SchedulerState::new(params, vec![0.0, 7.0]);
        let plan = s.on_checkpoint(0.0, &[0, 0], 1.0).unwrap();
        assert_eq!(plan.rates, vec![8, 8]);

        let params = AdspParams {
            fixed_increment: Some(1),
            ..AdspParams::default()
        };
        let mut s = SchedulerState::new(params, vec![0.0, 61.0]);
        assert!(matches!(
            s.on_checkpoint(0.0, &[0, 0], 1.0),
            Err(Error::InfeasibleRate { worker: 1, .. })
        ));
    }

    #[test]
    fn scheduler_search_probes_one_period_each() {
        let params = AdspParams::default();
        let mut s = SchedulerState::new(params, vec![0.5; 3]);
        let mut commits = vec![0u64; 3];
        let mut loss = 1.0;
        let mut increments = Vec::new();
        for p in 0..20 {
            let now = 60.0 * p as f64;
            let plan = s.on_checkpoint(now, &commits, loss).unwrap();
            if let Some(t) = plan.sample_at {
                assert!((t - now - 30.0).abs() < 1e-9);
                s.on_sample(t, loss * 0.9);
            }
            increments.push(plan.rates[0]);
            for (c, r) in commits.iter_mut().zip(&plan.rates) {
                *c += r;
            }
            // faster decrease with more commits, saturating at 4
            loss *= 0.9f64.powi(plan.rates[0].min(4) as i32);
        }
        assert_eq!(&increments[..4], &[1, 2, 3, 4]);
        let d = &s.decisions()[0];
        assert_eq!(d.epoch, 0);
        assert!(d.candidates.len() >= 2);
        assert_eq!(d.increment, increments[10]);
    }
}
