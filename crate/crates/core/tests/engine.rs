use adsp::engine::{
    detect_convergence, parse_csv, run, run_realtime, ClusterSpec, LedgerRow, LossCsvRow, RealtimeOptions, RunMetrics,
    StopRule,
};
use adsp::params::Hyperparams;
use adsp::sync::{AdspParams, SyncPolicy, TimerJitter};
use adsp::workloads::{make_quadratic, TrainingTask};

fn task() -> TrainingTask {
    make_quadratic(10, 500, 5.0, 3).unwrap()
}

fn adsp(fixed: Option<u64>) -> SyncPolicy {
    SyncPolicy::Adsp(AdspParams {
        fixed_increment: fixed,
        epoch_len: 300.0,
        ..Default::default()
    })
}

fn go(cluster: &ClusterSpec, policy: &SyncPolicy, stop: &StopRule) -> RunMetrics {
    run(&task(), cluster, policy, &Hyperparams::for_workers(cluster.workers()), stop, 5).unwrap()
}

#[test]
fn single_worker_policies_reduce_to_sequential_sgd() {
    let cluster = ClusterSpec::homogeneous(1, 1.0, 0.0);
    let stop = StopRule::steps(300);
    let base = go(&cluster, &SyncPolicy::Bsp, &stop);
    for p in [SyncPolicy::Tap, SyncPolicy::Ssp { slack: 3 }, SyncPolicy::FixedAdaComm { tau: 1 }] {
        let r = go(&cluster, &p, &stop);
        let a: Vec<f64> = base.loss_trace.iter().map(|s| s.loss).collect();
        let b: Vec<f64> = r.loss_trace.iter().map(|s| s.loss).collect();
        assert_eq!(a, b, "{}", p.label());
    }
    assert_eq!(base.total_steps, 300);
    assert!(base.final_loss < base.loss_trace[0].loss * 0.1);
}

#[test]
fn seeds_are_reproducible_and_distinct() {
    let cluster = ClusterSpec::with_heterogeneity(4, 2.0, 1.0).unwrap();
    let hp = Hyperparams::for_workers(4);
    let stop = StopRule::time(900.0);
    let policy = SyncPolicy::Adsp(AdspParams {
        timer_jitter: TimerJitter::Poisson,
        ..Default::default()
    });
    let a = run(&task(), &cluster, &policy, &hp, &stop, 1).unwrap();
    let b = run(&task(), &cluster, &policy, &hp, &stop, 1).unwrap();
    let c = run(&task(), &cluster, &policy, &hp, &stop, 2).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_ne!(a.loss_csv().unwrap(), c.loss_csv().unwrap());
}

#[test]
fn bsp_blocks_everyone_but_the_slowest() {
    let cluster = ClusterSpec::new(vec![1.0, 1.0, 0.5, 0.25], vec![0.5; 4]);
    let r = go(&cluster, &SyncPolicy::Bsp, &StopRule::time(600.0));
    let slowest = 3;
    for l in &r.ledgers {
        if l.worker == slowest {
            assert_eq!(l.blocked_s, 0.0);
        } else {
            assert!(l.blocked_s > 0.0, "worker {} never blocked", l.worker);
        }
    }
}

#[test]
fn ledgers_never_exceed_elapsed_time() {
    let cluster = ClusterSpec::with_heterogeneity(5, 3.0, 1.5).unwrap();
    for p in [
        SyncPolicy::Bsp,
        SyncPolicy::Ssp { slack: 2 },
        SyncPolicy::Tap,
        SyncPolicy::FixedAdaComm { tau: 4 },
        SyncPolicy::AdaComm { tau0: 2, check_interval: 60.0, multiplier: 2.0 },
        adsp(None),
    ] {
        let r = go(&cluster, &p, &StopRule::time(1200.0));
        for l in &r.ledgers {
            let used = l.comp_s + l.comm_s + l.blocked_s;
            assert!(used <= r.elapsed + 1e-6, "{}: worker {} used {used} of {}", p.label(), l.worker, r.elapsed);
        }
    }
}

#[test]
fn ssp_keeps_workers_within_slack() {
    let cluster = ClusterSpec::new(vec![2.0, 1.0, 0.3], vec![0.2; 3]);
    for s in [0, 1, 3] {
        let r = go(&cluster, &SyncPolicy::Ssp { slack: s }, &StopRule::time(600.0));
        for c in &r.checkpoints {
            let hi = *c.local_steps.iter().max().unwrap();
            let lo = *c.local_steps.iter().min().unwrap();
            assert!(hi - lo <= s + 1, "slack {s}: gap {} at t={}", hi - lo, c.time);
        }
    }
}

#[test]
fn adsp_keeps_commits_balanced_without_blocking() {
    let cluster = ClusterSpec::new(vec![2.0, 1.0, 0.5, 0.2], vec![1.0, 0.5, 2.0, 0.5]);
    let r = go(&cluster, &adsp(None), &StopRule::time(3000.0));
    assert!(r.max_commit_gap() <= 1);
    assert!(r.ledgers.iter().all(|l| l.blocked_s == 0.0));
    assert!(!r.decisions.is_empty());
}

#[test]
fn infeasible_overhead_is_reported() {
    let cluster = ClusterSpec::homogeneous(2, 1.0, 61.0);
    let err = run(&task(), &cluster, &adsp(Some(1)), &Hyperparams::for_workers(2), &StopRule::time(600.0), 1).unwrap_err();
    assert!(matches!(err, adsp::Error::InfeasibleRate { .. }), "{err}");
}

#[test]
fn artifacts_round_trip() {
    let cluster = ClusterSpec::with_heterogeneity(3, 2.0, 1.0).unwrap();
    let r = go(&cluster, &adsp(Some(2)), &StopRule::time(600.0));
    assert_eq!(RunMetrics::from_json(&r.to_json().unwrap()).unwrap(), r);
    let rows: Vec<LossCsvRow> = parse_csv(&r.loss_csv().unwrap()).unwrap();
    assert_eq!(rows.len(), r.loss_trace.len());
    assert!(rows.iter().zip(&r.loss_trace).all(|(a, b)| a.time == b.time && a.loss == b.loss));
    let ledger: Vec<LedgerRow> = parse_csv(&r.ledger_csv().unwrap()).unwrap();
    assert_eq!(ledger.len(), 3);
}

#[test]
fn convergence_stop_matches_offline_detection() {
    let cluster = ClusterSpec::homogeneous(2, 1.0, 0.5);
    let stop = StopRule::until_converged(20_000.0, 1e-10);
    let r = go(&cluster, &SyncPolicy::Bsp, &stop);
    let t = r.convergence_time.expect("converges");
    assert_eq!(detect_convergence(&r.loss_trace, stop.window, stop.eps_var), Some(t));
    assert_eq!(r.loss_trace.last().unwrap().time, t);
}

#[test]
fn realtime_engine_agrees_with_simulation() {
    let task = task();
    let cluster = ClusterSpec::new(vec![1.0, 1.0, 0.5], vec![1.0; 3]);
    let hp = Hyperparams::for_workers(3);
    let stop = StopRule::time(600.0);
    let policy = adsp(Some(2));
    let sim = run(&task, &cluster, &policy, &hp, &stop, 9).unwrap();
    let rt = run_realtime(&task, &cluster, &policy, &hp, &stop, 9, RealtimeOptions { time_scale: 0.002 }).unwrap();
    assert!(rt.ledgers.iter().all(|l| l.blocked_s == 0.0));
    assert!(rt.max_commit_gap() <= 1, "gap {}", rt.max_commit_gap());
    assert_eq!(rt.total_steps, rt.commits().iter().sum::<u64>());
    let rel = (rt.final_loss - sim.final_loss).abs() / sim.final_loss;
    assert!(rel < 0.10, "realtime {} vs sim {}", rt.final_loss, sim.final_loss);
}

#[test]
fn realtime_bsp_runs_to_completion() {
    let task = task();
    let cluster = ClusterSpec::new(vec![1.0, 0.5], vec![0.5; 2]);
    let hp = Hyperparams::for_workers(2);
    let r = run_realtime(&task, &cluster, &SyncPolicy::Bsp, &hp, &StopRule::time(200.0), 3, RealtimeOptions::default()).unwrap();
    assert!(r.total_steps > 10);
    assert!(r.final_loss < r.loss_trace[0].loss);
    assert!(r.run_id.starts_with("rt-"));
}
