use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{Checkpoint, ConvergenceMonitor, LossSample, RunMetrics, WorkerLedger};
use super::queue::{EventKind, EventQueue, Reply};
use super::{ClusterSpec, StopRule};
use crate::error::{Error, Result};
use crate::params::{Hyperparams, ParamVector};
use crate::scheduler::SchedulerState;
use crate::sync::{
    adacomm_update_tau, adsp_on_timeout, on_step_complete, Action, AdspParams, CommitMsg, PsState, StepContext,
    SyncPolicy, TimerJitter, WorkerState,
};
use crate::workloads::TrainingTask;

/// Interval between metric checkpoints for policies without a check period.
const DEFAULT_TICK: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Computing { since: f64 },
    /// ADSP commit round trip; all of it is communication.
    Paused { since: f64 },
    /// Synchronous wait: the first `comm` seconds are communication, the
    /// rest is blocked.
    Waiting { since: f64, comm: f64 },
    Idle { since: f64 },
}

/// Rng stream layout per worker.
pub(crate) fn worker_rngs(seed: u64, worker: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut batches = ChaCha8Rng::seed_from_u64(seed);
    batches.set_stream(2 * worker as u64 + 1);
    let mut timers = ChaCha8Rng::seed_from_u64(seed);
    timers.set_stream(2 * worker as u64 + 2);
    (batches, timers)
}

/// Cycles a shard with a fresh shuffle per pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchSource {
    shard: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch: Vec<usize>,
    size: usize,
}

impl BatchSource {
    pub fn new(mut shard: Vec<usize>, mut rng: ChaCha8Rng, batch_size: usize) -> Self {
        shard.shuffle(&mut rng);
        let size = batch_size.min(shard.len()).max(1);
        BatchSource {
            shard,
            cursor: 0,
            rng,
            batch: Vec::with_capacity(size),
            size,
        }
    }

    pub fn next(&mut self) -> &[usize] {
        self.batch.clear();
        while self.batch.len() < self.size {
            if self.cursor == self.shard.len() {
                self.shard.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            self.batch.push(self.shard[self.cursor]);
            self.cursor += 1;
        }
        &self.batch
    }
}

/// Commit instants for one check period.
pub(crate) fn period_fires(
    start: f64,
    gamma: f64,
    delta_c: u64,
    round_trip: f64,
    jitter: TimerJitter,
    rng: &mut ChaCha8Rng,
) -> VecDeque<f64> {
    match jitter {
        TimerJitter::None => (1..=delta_c)
            .map(|k| start + gamma * k as f64 / delta_c as f64 - round_trip)
            .collect(),
        TimerJitter::Poisson => {
            let slack = (gamma - delta_c as f64 * round_trip).max(0.0);
            let mut u: Vec<f64> = (0..delta_c).map(|_| rng.random::<f64>() * slack).collect();
            u.sort_by(f64::total_cmp);
            u.iter()
                .enumerate()
                .map(|(k, x)| start + x + k as f64 * round_trip)
                .collect()
        }
    }
}

struct SimWorker {
    st: WorkerState,
    step_time: f64,
    round_trip: f64,
    batches: BatchSource,
    timer_rng: ChaCha8Rng,
    activity: Activity,
    step_gen: u64,
    grad: Option<ParamVector>,
    step_end: f64,
    paused_remaining: Option<f64>,
    steps_since_commit: u64,
    tau: u64,
    /// Sum of all local updates; used to re-apply in-flight work on top of
    /// an adopted reply.
    cum: ParamVector,
    inflight: VecDeque<ParamVector>,
    cached_min: u64,
    ledger: WorkerLedger,
    timer_gen: u64,
    fires: VecDeque<f64>,
    cap: Option<u64>,
    committed_before: bool,
}

impl SimWorker {
    fn close(&mut self, now: f64) {
        let l = &mut self.ledger;
        match self.activity {
            Activity::Computing { since } => l.comp_s += now - since,
            Activity::Paused { since } => l.comm_s += now - since,
            Activity::Waiting { since, comm } => {
                let len = now - since;
                let c = len.min(comm);
                l.comm_s += c;
                l.blocked_s += len - c;
            }
            Activity::Idle { since } => l.blocked_s += now - since,
        }
    }
}

pub(crate) struct Sim<'a> {
    task: &'a TrainingTask,
    policy: &'a SyncPolicy,
    hp: &'a Hyperparams,
    stop: &'a StopRule,
    seed: u64,
    q: EventQueue,
    now: f64,
    ps: PsState,
    workers: Vec<SimWorker>,
    loss: f64,
    trace: Vec<LossSample>,
    staleness: Vec<u64>,
    checkpoints: Vec<Checkpoint>,
    conv: ConvergenceMonitor,
    convergence_time: Option<f64>,
    round_count: usize,
    round_tau: u64,
    pending_pulls: Vec<usize>,
    scheduler: Option<SchedulerState>,
    adsp: Option<AdspParams>,
    tick: f64,
    interval_loss: (f64, u64),
    loss_history: Vec<f64>,
    done: Option<f64>,
}

impl<'a> Sim<'a> {
    pub fn new(
        task: &'a TrainingTask,
        cluster: &'a ClusterSpec,
        policy: &'a SyncPolicy,
        hp: &'a Hyperparams,
        stop: &'a StopRule,
        seed: u64,
    ) -> Result<Self> {
        let m = cluster.workers();
        let w0 = ParamVector::zeros(task.dim());
        let shards = task.shards(m, cluster.data_skew, seed)?;
        let tau = match policy {
            SyncPolicy::FixedAdaComm { tau } => *tau,
            SyncPolicy::AdaComm { tau0, .. } => *tau0,
            _ => 1,
        };
        let adsp = match policy {
            SyncPolicy::Adsp(p) => Some(p.clone()),
            _ => None,
        };
        let workers = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| {
                let (batch_rng, timer_rng) = worker_rngs(seed, i);
                SimWorker {
                    st: WorkerState::new(i, &w0),
                    step_time: cluster.step_time(i),
                    round_trip: cluster.round_trip(i),
                    batches: BatchSource::new(shard, batch_rng, hp.batch_size),
                    timer_rng,
                    activity: Activity::Idle { since: 0.0 },
                    step_gen: 0,
                    grad: None,
                    step_end: 0.0,
                    paused_remaining: None,
                    steps_since_commit: 0,
                    tau,
                    cum: ParamVector::zeros(task.dim()),
                    inflight: VecDeque::new(),
                    cached_min: 0,
                    ledger: WorkerLedger::new(i),
                    timer_gen: 0,
                    fires: VecDeque::new(),
                    cap: adsp.as_ref().and_then(|p| p.local_step_caps.as_ref().map(|c| c[i])),
                    committed_before: false,
                }
            })
            .collect();
        let tick = match policy {
            SyncPolicy::Adsp(p) => p.gamma,
            SyncPolicy::AdaComm { check_interval, .. } => *check_interval,
            _ => DEFAULT_TICK,
        };
        let scheduler = adsp.as_ref().map(|p| SchedulerState::new(p.clone(), cluster.round_trips()));
        let loss = task.global_loss_unchecked(&w0);
        Ok(Sim {
            task,
            policy,
            hp,
            stop,
            seed,
            q: EventQueue::default(),
            now: 0.0,
            ps: PsState::new(w0, m),
            workers,
            loss,
            trace: vec![LossSample { time: 0.0, loss }],
            staleness: Vec::new(),
            checkpoints: Vec::new(),
            conv: ConvergenceMonitor::new(stop.window, stop.eps_var, stop.eval_interval, loss),
            convergence_time: None,
            round_count: 0,
            round_tau: tau,
            pending_pulls: Vec::new(),
            scheduler,
            adsp,
            tick,
            interval_loss: (0.0, 0),
            loss_history: Vec::new(),
            done: None,
        })
    }

    pub fn run(mut self) -> Result<RunMetrics> {
        if let Some(t) = self.conv.initial() {
            self.convergence_time = Some(t);
        }
        for i in 0..self.workers.len() {
            self.start_step(i);
        }
        self.q.push(0.0, EventKind::CheckpointTick);
        while let Some(ev) = self.q.pop() {
            if let Some(max) = self.stop.max_time {
                if ev.time > max {
                    self.done = Some(max);
                    break;
                }
            }
            self.now = ev.time;
            self.handle(ev.kind)?;
            if self.done.is_some() {
                break;
            }
        }
        let end = self.done.unwrap_or(self.now);
        Ok(self.into_metrics(end))
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::StepComplete { worker, gen } => {
                if self.workers[worker].step_gen == gen {
                    self.finish_step(worker)?;
                }
            }
            EventKind::CommitArrive { worker, update, reply } => self.commit_arrive(worker, update, reply)?,
            EventKind::ParamsArrive {
                worker,
                w,
                reply,
                min_clock,
                tau,
            } => self.params_arrive(worker, w, reply, min_clock, tau),
            EventKind::TimerFire { worker, gen } => {
                if self.workers[worker].timer_gen == gen {
                    self.timer_fire(worker)?;
                }
            }
            EventKind::CheckpointTick => self.checkpoint()?,
            EventKind::EvalTick => {
                if let Some(s) = self.scheduler.as_mut() {
                    s.on_sample(self.now, self.loss);
                }
            }
        }
        Ok(())
    }

    fn start_step(&mut self, i: usize) {
        let now = self.now;
        let w = &mut self.workers[i];
        let batch = w.batches.next();
        w.grad = Some(self.task.batch_gradient_unchecked(&w.st.local_model, batch));
        w.step_end = now + w.step_time;
        w.step_gen += 1;
        w.activity = Activity::Computing { since: now };
        self.q.push(w.step_end, EventKind::StepComplete { worker: i, gen: w.step_gen });
    }

    fn send_commit(&mut self, i: usize, reply: Reply) {
        let now = self.now;
        let w = &mut self.workers[i];
        let dim = w.st.accumulator.dim();
        let update = std::mem::replace(&mut w.st.accumulator, ParamVector::zeros(dim));
        w.st.commits += 1;
        w.steps_since_commit = 0;
        if reply == Reply::Adopt {
            w.inflight.push_back(w.cum.clone());
        }
        self.q.push(
            now + 0.5 * w.round_trip,
            EventKind::CommitArrive {
                worker: i,
                update,
                reply,
            },
        );
    }

    fn finish_step(&mut self, i: usize) -> Result<()> {
        let now = self.now;
        let track_cum = matches!(self.policy, SyncPolicy::Tap)
            || self.adsp.as_ref().is_some_and(|p| p.overlap_commits);
        let w = &mut self.workers[i];
        w.close(now);
        let grad = w.grad.take().expect("step in progress has a gradient");
        let lr = self.hp.local_lr(w.st.local_steps);
        w.st.local_model.axpy(-lr, &grad);
        w.st.accumulator.axpy(lr, &grad);
        if track_cum {
            w.cum.axpy(lr, &grad);
        }
        if !w.st.local_model.is_finite() {
            return Err(Error::NonFinite { what: "local model" });
        }
        w.st.local_steps += 1;
        w.steps_since_commit += 1;
        let ctx = StepContext {
            own_steps: w.st.local_steps,
            steps_since_commit: w.steps_since_commit,
            min_peer_steps: w.cached_min,
            tau: w.tau,
        };
        let action = on_step_complete(self.policy, &ctx);
        match (self.policy, action) {
            (SyncPolicy::Adsp(_), _) => {
                if w.cap.is_some_and(|c| w.steps_since_commit >= c) {
                    w.activity = Activity::Idle { since: now };
                } else {
                    self.start_step(i);
                }
            }
            (SyncPolicy::Tap, _) => {
                self.send_commit(i, Reply::Adopt);
                self.start_step(i);
            }
            (SyncPolicy::Ssp { .. }, Action::Block) => {
                w.activity = Activity::Waiting {
                    since: now,
                    comm: w.round_trip,
                };
                self.send_commit(i, Reply::Pull);
            }
            (SyncPolicy::Ssp { .. }, _) => {
                self.send_commit(i, Reply::None);
                self.start_step(i);
            }
            (_, Action::CommitNow) => {
                w.activity = Activity::Waiting {
                    since: now,
                    comm: w.round_trip,
                };
                self.send_commit(i, Reply::Barrier);
            }
            _ => self.start_step(i),
        }
        Ok(())
    }

    fn timer_fire(&mut self, i: usize) -> Result<()> {
        let now = self.now;
        let p = self.adsp.as_ref().expect("timers only run under ADSP");
        let (gamma, overlap) = (p.gamma, p.overlap_commits);
        let w = &mut self.workers[i];
        let (msg, _) = adsp_on_timeout(&mut w.st, now, gamma, w.round_trip)?;
        w.steps_since_commit = 0;
        let reply = if overlap {
            w.inflight.push_back(w.cum.clone());
            if let Activity::Idle { .. } = w.activity {
                w.close(now);
                self.start_step(i);
            }
            Reply::Adopt
        } else {
            match w.activity {
                Activity::Computing { .. } => {
                    w.close(now);
                    w.paused_remaining = Some((w.step_end - now).max(0.0));
                    w.step_gen += 1;
                    w.activity = Activity::Paused { since: now };
                }
                Activity::Idle { .. } => {
                    w.close(now);
                    w.paused_remaining = None;
                    w.activity = Activity::Paused { since: now };
                }
                Activity::Paused { .. } | Activity::Waiting { .. } => {}
            }
            Reply::Resume
        };
        let w = &mut self.workers[i];
        self.q.push(
            now + 0.5 * w.round_trip,
            EventKind::CommitArrive {
                worker: i,
                update: msg.update,
                reply,
            },
        );
        if let Some(next) = w.fires.pop_front() {
            w.st.timer_deadline = next;
            self.q.push(next, EventKind::TimerFire { worker: i, gen: w.timer_gen });
        } else {
            w.st.timer_deadline = f64::INFINITY;
        }
        Ok(())
    }

    fn record_loss(&mut self) -> Result<()> {
        self.loss = self.task.global_loss_unchecked(&self.ps.w_global);
        if !self.loss.is_finite() {
            return Err(Error::NonFinite { what: "global loss" });
        }
        self.trace.push(LossSample {
            time: self.now,
            loss: self.loss,
        });
        self.interval_loss.0 += self.loss;
        self.interval_loss.1 += 1;
        if let Some(sch) = self.scheduler.as_mut() {
            sch.on_sample(self.now, self.loss);
        }
        if let Some(t) = self.conv.observe(self.now, self.loss) {
            self.convergence_time = Some(t);
            if self.stop.converge {
                self.done = Some(self.now);
            }
        }
        if self.stop.max_steps.is_some_and(|s| self.ps.step >= s) {
            self.done = Some(self.now);
        }
        Ok(())
    }

    fn commit_arrive(&mut self, i: usize, update: ParamVector, reply: Reply) -> Result<()> {
        let msg = CommitMsg {
            worker: i,
            update,
            sent_at: self.now - 0.5 * self.workers[i].round_trip,
        };
        let applied = self.ps.on_commit(&msg, self.hp)?;
        let w = &mut self.workers[i];
        if w.committed_before {
            self.staleness.push(applied.staleness);
        }
        w.committed_before = true;
        self.record_loss()?;
        match reply {
            Reply::None => self.release_pulls(),
            Reply::Pull => {
                self.pending_pulls.push(i);
                self.release_pulls();
            }
            Reply::Barrier => {
                self.round_count += 1;
                if self.round_count == self.workers.len() {
                    self.round_count = 0;
                    for j in 0..self.workers.len() {
                        self.reply(j, Reply::Barrier);
                    }
                }
            }
            Reply::Adopt | Reply::Resume => self.reply(i, reply),
        }
        Ok(())
    }

    fn reply(&mut self, j: usize, reply: Reply) {
        let at = self.now + 0.5 * self.workers[j].round_trip;
        self.q.push(
            at,
            EventKind::ParamsArrive {
                worker: j,
                w: self.ps.w_global.clone(),
                reply,
                min_clock: self.ps.min_clock(),
                tau: self.round_tau,
            },
        );
    }

    fn release_pulls(&mut self) {
        let SyncPolicy::Ssp { slack } = *self.policy else {
            return;
        };
        let min = self.ps.min_clock();
        let pending = std::mem::take(&mut self.pending_pulls);
        for j in pending {
            if self.ps.vector_clock[j] - min <= slack {
                self.reply(j, Reply::Pull);
            } else {
                self.pending_pulls.push(j);
            }
        }
    }

    fn params_arrive(&mut self, i: usize, w_new: ParamVector, reply: Reply, min_clock: u64, tau: u64) {
        let now = self.now;
        let w = &mut self.workers[i];
        match reply {
            Reply::Adopt => {
                let snap = w.inflight.pop_front().expect("reply matches an in-flight commit");
                let mut local = w_new;
                local.axpy(-1.0, &w.cum);
                local.axpy(1.0, &snap);
                w.st.local_model = local;
            }
            Reply::Resume => {
                w.close(now);
                w.st.local_model = w_new;
                match w.paused_remaining.take() {
                    Some(rem) => {
                        w.step_end = now + rem;
                        w.step_gen += 1;
                        w.activity = Activity::Computing { since: now };
                        self.q.push(w.step_end, EventKind::StepComplete { worker: i, gen: w.step_gen });
                    }
                    None => self.start_step(i),
                }
            }
            Reply::Barrier | Reply::Pull => {
                w.close(now);
                w.st.local_model = w_new;
                w.cached_min = min_clock;
                w.tau = tau;
                self.start_step(i);
            }
            Reply::None => {}
        }
    }

    fn checkpoint(&mut self) -> Result<()> {
        let now = self.now;
        let commits: Vec<u64> = self.workers.iter().map(|w| w.st.commits).collect();
        let mut rates = Vec::new();
        let mut c_target = None;
        if let (Some(s), Some(p)) = (self.scheduler.as_mut(), self.adsp.as_ref()) {
            let plan = s.on_checkpoint(now, &commits, self.loss)?;
            for (w, &dc) in self.workers.iter_mut().zip(&plan.rates) {
                w.st.target_rate = dc;
                w.timer_gen += 1;
                w.fires = period_fires(now, p.gamma, dc, w.round_trip, p.timer_jitter, &mut w.timer_rng);
                if let Some(first) = w.fires.pop_front() {
                    w.st.timer_deadline = first;
                    self.q.push(first, EventKind::TimerFire { worker: w.st.id, gen: w.timer_gen });
                }
            }
            if let Some(t) = plan.sample_at {
                self.q.push(t, EventKind::EvalTick);
            }
            rates = plan.rates;
            c_target = Some(plan.c_target);
        }
        if let SyncPolicy::AdaComm { tau0, multiplier, .. } = *self.policy {
            if now > 0.0 {
                let (sum, n) = self.interval_loss;
                self.loss_history.push(if n > 0 { sum / n as f64 } else { self.loss });
                self.round_tau = adacomm_update_tau(self.round_tau, tau0, multiplier, &self.loss_history);
            }
        }
        self.interval_loss = (0.0, 0);
        let tau = match self.policy {
            SyncPolicy::Bsp | SyncPolicy::FixedAdaComm { .. } | SyncPolicy::AdaComm { .. } => Some(self.round_tau),
            _ => None,
        };
        self.checkpoints.push(Checkpoint {
            time: now,
            commits,
            applied: self.ps.vector_clock.clone(),
            local_steps: self.workers.iter().map(|w| w.st.local_steps).collect(),
            rates,
            c_target,
            tau,
            loss: self.loss,
        });
        self.q.push(now + self.tick, EventKind::CheckpointTick);
        Ok(())
    }

    fn into_metrics(mut self, end: f64) -> RunMetrics {
        let ledgers = self
            .workers
            .iter_mut()
            .map(|w| {
                w.close(end);
                let mut l = w.ledger.clone();
                l.commits = w.st.commits;
                l.local_steps = w.st.local_steps;
                l
            })
            .collect();
        let decisions = self.scheduler.map(|s| s.into_decisions()).unwrap_or_default();
        RunMetrics {
            policy: self.policy.label().to_string(),
            run_id: format!("sim-s{}", self.seed),
            seed: self.seed,
            loss_trace: self.trace,
            ledgers,
            checkpoints: self.checkpoints,
            staleness: self.staleness,
            total_steps: self.ps.step,
            elapsed: end,
            convergence_time: self.convergence_time,
            final_loss: self.loss,
            decisions,
        }
    }
}
