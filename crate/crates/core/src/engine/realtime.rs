//! Wall-clock runtime: one thread per worker, a serializing PS thread and a
//! coordinator thread for checkpoints. Actors share nothing mutable and
//! talk only over channels; network latency is modelled by stamping each
//! message with a delivery time.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::metrics::{Checkpoint, ConvergenceMonitor, LossSample, RunMetrics, WorkerLedger};
use super::queue::Reply;
use super::sim::{period_fires, worker_rngs, BatchSource};
use super::{validate, ClusterSpec, StopRule};
use crate::error::{Error, Result};
use crate::params::{Hyperparams, ParamVector};
use crate::scheduler::{EpochDecision, SchedulerState};
use crate::sync::{adacomm_update_tau, on_step_complete, Action, CommitMsg, PsState, StepContext, SyncPolicy};
use crate::workloads::TrainingTask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealtimeOptions {
    /// Wall-clock seconds per virtual second.
    pub time_scale: f64,
}

impl Default for RealtimeOptions {
    fn default() -> Self {
        RealtimeOptions { time_scale: 0.002 }
    }
}

#[derive(Clone, Copy)]
struct Clock {
    start: Instant,
    scale: f64,
}

impl Clock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() / self.scale
    }

    fn until(&self, t: f64) -> Duration {
        Duration::from_secs_f64(((t - self.now()) * self.scale).max(0.0))
    }
}

struct Envelope {
    deliver_at: f64,
    seq: u64,
    msg: CommitMsg,
    reply: Reply,
}

impl PartialEq for Envelope {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Envelope {}
impl PartialOrd for Envelope {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Envelope {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .deliver_at
            .total_cmp(&self.deliver_at)
            .then(other.seq.cmp(&self.seq))
    }
}

enum PsMsg {
    Commit { msg: CommitMsg, reply: Reply, deliver_at: f64 },
    SetTau(u64),
}

enum WorkerMsg {
    Params {
        w: ParamVector,
        reply: Reply,
        min_clock: u64,
        tau: u64,
        deliver_at: f64,
    },
    Rates { start: f64, fires: VecDeque<f64> },
    Stop { at: f64 },
}

enum CoordMsg {
    Progress { worker: usize, commits: u64, local_steps: u64 },
    Loss { at: f64, loss: f64 },
    Stop,
}

struct PsOutcome {
    trace: Vec<LossSample>,
    staleness: Vec<u64>,
    total_steps: u64,
    convergence_time: Option<f64>,
    end: f64,
    final_loss: f64,
    error: Option<Error>,
}

struct CoordOutcome {
    checkpoints: Vec<Checkpoint>,
    decisions: Vec<EpochDecision>,
    error: Option<Error>,
}

/// Threaded counterpart of [`super::run`]. Not bit-deterministic; the same
/// invariants hold.
pub fn run_realtime(
    task: &TrainingTask,
    cluster: &ClusterSpec,
    policy: &SyncPolicy,
    hp: &Hyperparams,
    stop: &StopRule,
    seed: u64,
    opts: RealtimeOptions,
) -> Result<RunMetrics> {
    validate(task, cluster, policy, hp, stop)?;
    if !(opts.time_scale > 0.0 && opts.time_scale.is_finite()) {
        return Err(Error::invalid("time_scale", "must be positive"));
    }
    let m = cluster.workers();
    let shards = task.shards(m, cluster.data_skew, seed)?;
    let (ps_tx, ps_rx) = channel::<PsMsg>();
    let (coord_tx, coord_rx) = channel::<CoordMsg>();
    let mut worker_tx = Vec::with_capacity(m);
    let mut worker_rx = Vec::with_capacity(m);
    for _ in 0..m {
        let (tx, rx) = channel::<WorkerMsg>();
        worker_tx.push(tx);
        worker_rx.push(rx);
    }
    let clock = Clock {
        start: Instant::now(),
        scale: opts.time_scale,
    };

    let (ps_out, coord_out, ledgers) = std::thread::scope(|scope| {
        let ps_handle = {
            let worker_tx = worker_tx.clone();
            let coord_tx = coord_tx.clone();
            scope.spawn(move || ps_actor(task, cluster, policy, hp, stop, clock, ps_rx, worker_tx, coord_tx))
        };
        let coord_handle = {
            let worker_tx = worker_tx.clone();
            let ps_tx = ps_tx.clone();
            scope.spawn(move || coordinator(cluster, policy, seed, clock, coord_rx, worker_tx, ps_tx))
        };
        let mut handles = Vec::with_capacity(m);
        for (i, (rx, shard)) in worker_rx.into_iter().zip(shards).enumerate() {
            let ps_tx = ps_tx.clone();
            let coord_tx = coord_tx.clone();
            handles.push(scope.spawn(move || {
                let (batch_rng, _) = worker_rngs(seed, i);
                let mut w = WorkerActor::new(i, task, cluster, policy, hp, clock, rx, ps_tx, coord_tx, BatchSource::new(shard, batch_rng, hp.batch_size));
                w.run();
                w.finish()
            }));
        }
        drop(worker_tx);
        drop(ps_tx);
        drop(coord_tx);
        let ps_out = ps_handle.join().expect("ps thread panicked");
        let ledgers: Vec<WorkerLedger> = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
        let coord_out = coord_handle.join().expect("coordinator thread panicked");
        (ps_out, coord_out, ledgers)
    });

    if let Some(e) = ps_out.error.or(coord_out.error) {
        return Err(e);
    }
    Ok(RunMetrics {
        policy: policy.label().to_string(),
        run_id: format!("rt-s{seed}"),
        seed,
        loss_trace: ps_out.trace,
        ledgers,
        checkpoints: coord_out.checkpoints,
        staleness: ps_out.staleness,
        total_steps: ps_out.total_steps,
        elapsed: ps_out.end,
        convergence_time: ps_out.convergence_time,
        final_loss: ps_out.final_loss,
        decisions: coord_out.decisions,
    })
}

#[allow(clippy::too_many_arguments)]
fn ps_actor(
    task: &TrainingTask,
    cluster: &ClusterSpec,
    policy: &SyncPolicy,
    hp: &Hyperparams,
    stop: &StopRule,
    clock: Clock,
    rx: Receiver<PsMsg>,
    workers: Vec<Sender<WorkerMsg>>,
    coord: Sender<CoordMsg>,
) -> PsOutcome {
    let m = cluster.workers();
    let mut ps = PsState::new(ParamVector::zeros(task.dim()), m);
    let mut loss = task.global_loss_unchecked(&ps.w_global);
    let mut out = PsOutcome {
        trace: vec![LossSample { time: 0.0, loss }],
        staleness: Vec::new(),
        total_steps: 0,
        convergence_time: None,
        end: 0.0,
        final_loss: loss,
        error: None,
    };
    let mut conv = ConvergenceMonitor::new(stop.window, stop.eps_var, stop.eval_interval, loss);
    out.convergence_time = conv.initial();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut committed_before = vec![false; m];
    let mut round = 0usize;
    let mut tau = match policy {
        SyncPolicy::FixedAdaComm { tau } => *tau,
        SyncPolicy::AdaComm { tau0, .. } => *tau0,
        _ => 1,
    };
    let mut pending_pulls: Vec<usize> = Vec::new();
    let max_time = stop.max_time.unwrap_or(f64::INFINITY);

    let send = |ps: &PsState, j: usize, reply: Reply, tau: u64, now: f64| {
        let _ = workers[j].send(WorkerMsg::Params {
            w: ps.w_global.clone(),
            reply,
            min_clock: ps.min_clock(),
            tau,
            deliver_at: now + 0.5 * cluster.round_trip(j),
        });
    };

    let end = 'outer: loop {
        let now = clock.now();
        if now >= max_time {
            break max_time;
        }
        let next = heap
            .peek()
            .map(|e: &Envelope| e.deliver_at)
            .unwrap_or(f64::INFINITY)
            .min(max_time);
        match rx.recv_timeout(clock.until(next)) {
            Ok(PsMsg::Commit { msg, reply, deliver_at }) => {
                heap.push(Envelope {
                    deliver_at,
                    seq,
                    msg,
                    reply,
                });
                seq += 1;
            }
            Ok(PsMsg::SetTau(t)) => tau = t,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break clock.now().min(max_time),
        }
        while heap.peek().is_some_and(|e| e.deliver_at <= clock.now()) {
            let env = heap.pop().unwrap();
            let now = clock.now();
            let i = env.msg.worker;
            let applied = match ps.on_commit(&env.msg, hp) {
                Ok(a) => a,
                Err(e) => {
                    out.error = Some(e);
                    break 'outer now;
                }
            };
            if committed_before[i] {
                out.staleness.push(applied.staleness);
            }
            committed_before[i] = true;
            loss = task.global_loss_unchecked(&ps.w_global);
            if !loss.is_finite() {
                out.error = Some(Error::NonFinite { what: "global loss" });
                break 'outer now;
            }
            out.trace.push(LossSample { time: now, loss });
            let _ = coord.send(CoordMsg::Loss { at: now, loss });
            if let Some(t) = conv.observe(now, loss) {
                out.convergence_time = Some(t);
                if stop.converge {
                    break 'outer now;
                }
            }
            if stop.max_steps.is_some_and(|s| ps.step >= s) {
                break 'outer now;
            }
            match env.reply {
                Reply::Barrier => {
                    round += 1;
                    if round == m {
                        round = 0;
                        for j in 0..m {
                            send(&ps, j, Reply::Barrier, tau, now);
                        }
                    }
                }
                Reply::Adopt | Reply::Resume => send(&ps, i, env.reply, tau, now),
                Reply::Pull | Reply::None => {
                    if env.reply == Reply::Pull {
                        pending_pulls.push(i);
                    }
                    if let SyncPolicy::Ssp { slack } = *policy {
                        let min = ps.min_clock();
                        pending_pulls.retain(|&j| {
                            if ps.vector_clock[j] - min <= slack {
                                send(&ps, j, Reply::Pull, tau, now);
                                false
                            } else {
                                true
                            }
                        });
                    }
                }
            }
        }
    };
    for w in &workers {
        let _ = w.send(WorkerMsg::Stop { at: end });
    }
    let _ = coord.send(CoordMsg::Stop);
    out.total_steps = ps.step;
    out.end = end;
    out.final_loss = loss;
    out
}

fn coordinator(
    cluster: &ClusterSpec,
    policy: &SyncPolicy,
    seed: u64,
    clock: Clock,
    rx: Receiver<CoordMsg>,
    workers: Vec<Sender<WorkerMsg>>,
    ps: Sender<PsMsg>,
) -> CoordOutcome {
    let m = cluster.workers();
    let adsp = match policy {
        SyncPolicy::Adsp(p) => Some(p.clone()),
        _ => None,
    };
    let tick = match policy {
        SyncPolicy::Adsp(p) => p.gamma,
        SyncPolicy::AdaComm { check_interval, .. } => *check_interval,
        _ => 60.0,
    };
    let mut scheduler = adsp.as_ref().map(|p| SchedulerState::new(p.clone(), cluster.round_trips()));
    let mut timer_rngs: Vec<_> = (0..m).map(|i| worker_rngs(seed, i).1).collect();
    let mut commits = vec![0u64; m];
    let mut steps = vec![0u64; m];
    let mut loss = f64::NAN;
    let mut interval = (0.0, 0u64);
    let mut history = Vec::new();
    let mut tau = match policy {
        SyncPolicy::FixedAdaComm { tau } => *tau,
        SyncPolicy::AdaComm { tau0, .. } => *tau0,
        _ => 1,
    };
    let mut out = CoordOutcome {
        checkpoints: Vec::new(),
        decisions: Vec::new(),
        error: None,
    };
    let mut next_tick = 0.0;
    let mut eval_at: Option<f64> = None;

    'run: loop {
        let due = eval_at.map_or(next_tick, |e| e.min(next_tick));
        loop {
            match rx.recv_timeout(clock.until(due)) {
                Ok(CoordMsg::Progress {
                    worker,
                    commits: c,
                    local_steps,
                }) => {
                    commits[worker] = commits[worker].max(c);
                    steps[worker] = steps[worker].max(local_steps);
                }
                Ok(CoordMsg::Loss { at, loss: l }) => {
                    loss = l;
                    if let Some(s) = scheduler.as_mut() {
                        s.on_sample(at, l);
                    }
                    interval.0 += l;
                    interval.1 += 1;
                }
                Ok(CoordMsg::Stop) | Err(RecvTimeoutError::Disconnected) => break 'run,
                Err(RecvTimeoutError::Timeout) => break,
            }
        }
        let now = due;
        if eval_at.is_some_and(|e| e <= now) {
            eval_at = None;
            if let Some(s) = scheduler.as_mut() {
                s.on_sample(now, loss);
            }
            if now < next_tick {
                continue;
            }
        }
        let mut rates = Vec::new();
        let mut c_target = None;
        if let (Some(s), Some(p)) = (scheduler.as_mut(), adsp.as_ref()) {
            let cur = if loss.is_nan() { 0.0 } else { loss };
            match s.on_checkpoint(now, &commits, cur) {
                Ok(plan) => {
                    for (i, &dc) in plan.rates.iter().enumerate() {
                        let fires = period_fires(now, p.gamma, dc, cluster.round_trip(i), p.timer_jitter, &mut timer_rngs[i]);
                        let _ = workers[i].send(WorkerMsg::Rates {
                            start: now,
                            fires,
                        });
                    }
                    eval_at = plan.sample_at;
                    rates = plan.rates;
                    c_target = Some(plan.c_target);
                }
                Err(e) => {
                    out.error = Some(e);
                    for w in &workers {
                        let _ = w.send(WorkerMsg::Stop { at: now });
                    }
                    break 'run;
                }
            }
        }
        if let SyncPolicy::AdaComm { tau0, multiplier, .. } = *policy {
            if now > 0.0 {
                history.push(if interval.1 > 0 { interval.0 / interval.1 as f64 } else { loss });
                tau = adacomm_update_tau(tau, tau0, multiplier, &history);
                let _ = ps.send(PsMsg::SetTau(tau));
            }
        }
        interval = (0.0, 0);
        out.checkpoints.push(Checkpoint {
            time: now,
            commits: commits.clone(),
            applied: Vec::new(),
            local_steps: steps.clone(),
            rates,
            c_target,
            tau: matches!(policy, SyncPolicy::Bsp | SyncPolicy::FixedAdaComm { .. } | SyncPolicy::AdaComm { .. })
                .then_some(tau),
            loss,
        });
        next_tick += tick;
    }
    out.decisions = scheduler.map(|s| s.into_decisions()).unwrap_or_default();
    out
}

enum Wake {
    Reached,
    Interrupted,
    Stopped,
}

struct WorkerActor<'a> {
    id: usize,
    task: &'a TrainingTask,
    policy: &'a SyncPolicy,
    hp: &'a Hyperparams,
    clock: Clock,
    rx: Receiver<WorkerMsg>,
    ps: Sender<PsMsg>,
    coord: Sender<CoordMsg>,
    batches: BatchSource,
    step_time: f64,
    round_trip: f64,
    local: ParamVector,
    acc: ParamVector,
    cum: ParamVector,
    inflight: VecDeque<ParamVector>,
    adopt: VecDeque<(f64, ParamVector)>,
    replies: VecDeque<(ParamVector, Reply, u64, u64, f64)>,
    fires: VecDeque<f64>,
    ledger: WorkerLedger,
    steps_since_commit: u64,
    tau: u64,
    cached_min: u64,
    cap: Option<u64>,
    overlap: bool,
    stop_at: Option<f64>,
}

impl<'a> WorkerActor<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: usize,
        task: &'a TrainingTask,
        cluster: &ClusterSpec,
        policy: &'a SyncPolicy,
        hp: &'a Hyperparams,
        clock: Clock,
        rx: Receiver<WorkerMsg>,
        ps: Sender<PsMsg>,
        coord: Sender<CoordMsg>,
        batches: BatchSource,
    ) -> Self {
        let dim = task.dim();
        let (cap, overlap) = match policy {
            SyncPolicy::Adsp(p) => (p.local_step_caps.as_ref().map(|c| c[id]), p.overlap_commits),
            _ => (None, false),
        };
        WorkerActor {
            id,
            task,
            policy,
            hp,
            clock,
            rx,
            ps,
            coord,
            batches,
            step_time: cluster.step_time(id),
            round_trip: cluster.round_trip(id),
            local: ParamVector::zeros(dim),
            acc: ParamVector::zeros(dim),
            cum: ParamVector::zeros(dim),
            inflight: VecDeque::new(),
            adopt: VecDeque::new(),
            replies: VecDeque::new(),
            fires: VecDeque::new(),
            ledger: WorkerLedger::new(id),
            steps_since_commit: 0,
            tau: match policy {
                SyncPolicy::FixedAdaComm { tau } => *tau,
                SyncPolicy::AdaComm { tau0, .. } => *tau0,
                _ => 1,
            },
            cached_min: 0,
            cap,
            overlap,
            stop_at: None,
        }
    }

    fn is_adsp(&self) -> bool {
        matches!(self.policy, SyncPolicy::Adsp(_))
    }

    fn handle(&mut self, msg: WorkerMsg) -> Wake {
        match msg {
            WorkerMsg::Params {
                w,
                reply,
                min_clock,
                tau,
                deliver_at,
            } => {
                if reply == Reply::Adopt {
                    self.adopt.push_back((deliver_at, w));
                } else {
                    self.replies.push_back((w, reply, min_clock, tau, deliver_at));
                }
                Wake::Interrupted
            }
            WorkerMsg::Rates { start, fires } => {
                // overdue fires from the previous period still count there
                let mut merged: VecDeque<f64> = self.fires.iter().copied().filter(|&f| f <= start).collect();
                merged.extend(fires);
                self.fires = merged;
                Wake::Interrupted
            }
            WorkerMsg::Stop { at } => {
                self.stop_at = Some(at);
                Wake::Stopped
            }
        }
    }

    /// Sleep until virtual time `t`, returning early when a message arrives.
    fn sleep_until(&mut self, t: f64) -> Wake {
        if self.stop_at.is_some() {
            return Wake::Stopped;
        }
        match self.rx.recv_timeout(self.clock.until(t)) {
            Ok(msg) => self.handle(msg),
            Err(RecvTimeoutError::Timeout) => Wake::Reached,
            Err(RecvTimeoutError::Disconnected) => {
                self.stop_at = Some(self.clock.now());
                Wake::Stopped
            }
        }
    }

    /// Sleep through to `t`, handling messages on the way.
    fn sleep_through(&mut self, t: f64) -> bool {
        loop {
            match self.sleep_until(t) {
                Wake::Reached => return true,
                Wake::Stopped => return false,
                Wake::Interrupted => {
                    if self.clock.now() >= t {
                        return true;
                    }
                }
            }
        }
    }

    fn book(&mut self, since: f64, comm_budget: Option<f64>, blocked: bool) {
        let now = self.clock.now().min(self.stop_at.unwrap_or(f64::INFINITY));
        let len = (now - since).max(0.0);
        match (comm_budget, blocked) {
            (Some(c), _) => {
                let c = len.min(c);
                self.ledger.comm_s += c;
                self.ledger.blocked_s += len - c;
            }
            (None, true) => self.ledger.blocked_s += len,
            (None, false) => self.ledger.comp_s += len,
        }
    }

    fn apply_adoptions(&mut self) {
        let now = self.clock.now();
        while self.adopt.front().is_some_and(|(t, _)| *t <= now) {
            let (_, w) = self.adopt.pop_front().unwrap();
            let snap = self.inflight.pop_front().unwrap_or_else(|| self.cum.clone());
            let mut local = w;
            local.axpy(-1.0, &self.cum);
            local.axpy(1.0, &snap);
            self.local = local;
        }
    }

    fn send_commit(&mut self, reply: Reply) -> bool {
        let now = self.clock.now();
        let dim = self.acc.dim();
        let update = std::mem::replace(&mut self.acc, ParamVector::zeros(dim));
        self.ledger.commits += 1;
        self.steps_since_commit = 0;
        if reply == Reply::Adopt {
            self.inflight.push_back(self.cum.clone());
        }
        let _ = self.coord.send(CoordMsg::Progress {
            worker: self.id,
            commits: self.ledger.commits,
            local_steps: self.ledger.local_steps,
        });
        self.ps
            .send(PsMsg::Commit {
                msg: CommitMsg {
                    worker: self.id,
                    update,
                    sent_at: now,
                },
                reply,
                deliver_at: now + 0.5 * self.round_trip,
            })
            .is_ok()
    }

    /// Wait for a non-adopt reply and for its delivery time.
    fn await_reply(&mut self) -> Option<(ParamVector, u64, u64)> {
        loop {
            if let Some((w, _, min, tau, at)) = self.replies.pop_front() {
                if !self.sleep_through(at) {
                    return None;
                }
                return Some((w, min, tau));
            }
            if self.stop_at.is_some() {
                return None;
            }
            match self.rx.recv() {
                Ok(msg) => {
                    self.handle(msg);
                }
                Err(_) => return None,
            }
        }
    }

    /// ADSP timer expiry. Returns false when the run stopped.
    fn fire(&mut self) -> bool {
        self.fires.pop_front();
        if self.overlap {
            return self.send_commit(Reply::Adopt);
        }
        let since = self.clock.now();
        if !self.send_commit(Reply::Resume) {
            return false;
        }
        let reply = self.await_reply();
        self.book(since, Some(f64::INFINITY), false);
        match reply {
            Some((w, _, _)) => {
                self.local = w;
                true
            }
            None => false,
        }
    }

    fn next_fire(&self) -> Option<f64> {
        if self.is_adsp() {
            self.fires.front().copied()
        } else {
            None
        }
    }

    /// One mini-batch of compute, interrupted by timer fires. Returns false
    /// when the run stopped.
    fn compute(&mut self) -> bool {
        let mut remaining = self.step_time;
        while remaining > 0.0 {
            let start = self.clock.now();
            let end = start + remaining;
            match self.next_fire() {
                Some(f) if f < end => {
                    let wake = if f > start { self.sleep_until(f) } else { Wake::Reached };
                    self.book(start, None, false);
                    remaining -= (self.clock.now() - start).max(0.0);
                    match wake {
                        Wake::Stopped => return false,
                        Wake::Interrupted => continue,
                        Wake::Reached => {
                            if !self.fire() {
                                return false;
                            }
                        }
                    }
                }
                _ => {
                    let wake = self.sleep_until(end);
                    self.book(start, None, false);
                    remaining -= (self.clock.now() - start).max(0.0);
                    if let Wake::Stopped = wake {
                        return false;
                    }
                }
            }
            self.apply_adoptions();
        }
        true
    }

    fn run(&mut self) {
        loop {
            self.apply_adoptions();
            if self.cap.is_some_and(|c| self.steps_since_commit >= c) {
                // idle until the next timer
                let since = self.clock.now();
                let ok = loop {
                    match self.fires.front().copied() {
                        Some(f) => {
                            let ok = self.sleep_through(f);
                            break ok;
                        }
                        None => match self.rx.recv() {
                            Ok(msg) => {
                                if let Wake::Stopped = self.handle(msg) {
                                    break false;
                                }
                            }
                            Err(_) => break false,
                        },
                    }
                };
                self.book(since, None, true);
                if !ok || !self.fire() {
                    return;
                }
                continue;
            }
            let grad = self.task.batch_gradient_unchecked(&self.local, self.batches.next());
            if !self.compute() {
                return;
            }
            let lr = self.hp.local_lr(self.ledger.local_steps);
            self.local.axpy(-lr, &grad);
            self.acc.axpy(lr, &grad);
            self.cum.axpy(lr, &grad);
            self.ledger.local_steps += 1;
            self.steps_since_commit += 1;
            let _ = self.coord.send(CoordMsg::Progress {
                worker: self.id,
                commits: self.ledger.commits,
                local_steps: self.ledger.local_steps,
            });
            let ctx = StepContext {
                own_steps: self.ledger.local_steps,
                steps_since_commit: self.steps_since_commit,
                min_peer_steps: self.cached_min,
                tau: self.tau,
            };
            let action = on_step_complete(self.policy, &ctx);
            let wait = match (self.policy, action) {
                (SyncPolicy::Adsp(_), _) => None,
                (SyncPolicy::Tap, _) => {
                    if !self.send_commit(Reply::Adopt) {
                        return;
                    }
                    None
                }
                (SyncPolicy::Ssp { .. }, Action::Block) => Some(Reply::Pull),
                (SyncPolicy::Ssp { .. }, _) => {
                    if !self.send_commit(Reply::None) {
                        return;
                    }
                    None
                }
                (_, Action::CommitNow) => Some(Reply::Barrier),
                _ => None,
            };
            if let Some(reply) = wait {
                let since = self.clock.now();
                if !self.send_commit(reply) {
                    return;
                }
                let got = self.await_reply();
                self.book(since, Some(self.round_trip), false);
                match got {
                    Some((w, min, tau)) => {
                        self.local = w;
                        self.cached_min = min;
                        self.tau = tau;
                    }
                    None => return,
                }
            }
        }
    }

    fn finish(self) -> WorkerLedger {
        self.ledger
    }
}
