//! Command-line front end: `run`, `compare`, `sweep`, `verify`.
//!
//! Exit codes: 0 success, 1 config error, 2 run failure, 3 verification
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    implicit_momentum, policy_speeds, regret_curve, staleness_fit, tail_non_increasing, CheckReport, TheoryInputs,
};
use crate::config::{write_atomic, ExperimentConfig, PolicyConfig, Resolved};
use crate::engine::{mean_waiting_fraction, run, run_realtime, RealtimeOptions, RunMetrics, StopRule};
use crate::error::Error;
use crate::params::LrSchedule;
use crate::sync::{max_feasible_rate, SyncPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUN: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "adsp", version, about = "Parameter-synchronization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured policy once and write its artifacts.
    Run(Common),
    /// Run several policies on the same task, cluster and seed.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policy specs: bsp, tap, ssp:S, fixed_adacomm:T,
        /// adacomm[:T0], adsp[:DC].
        #[arg(long, default_value = "bsp,ssp:2,fixed_adacomm:8,adsp")]
        policies: String,
    },
    /// One run per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
    },
    /// Check the theory against measurements on the configured cluster.
    Verify(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the threaded real-time engine instead of the simulator.
    #[arg(long)]
    realtime: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[value(name = "delta_c")]
    DeltaC,
    #[value(name = "h")]
    H,
    #[value(name = "extra_delay")]
    ExtraDelay,
    #[value(name = "m")]
    M,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::DeltaC => "delta_c",
            SweepParam::H => "h",
            SweepParam::ExtraDelay => "extra_delay",
            SweepParam::M => "m",
        }
    }
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: format!("config error: {e}"),
        }
    }

    fn run(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_RUN,
            message: format!("run failed: {e}"),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Output goes to `out`, diagnostics to `err`.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "{}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    match cli.command {
        Command::Run(c) => cmd_run(&c, out),
        Command::Compare { common, policies } => cmd_compare(&common, &policies, out),
        Command::Sweep { common, param, values } => cmd_sweep(&common, param, &values, out),
        Command::Verify(c) => cmd_verify(&c, out),
    }
}

struct Session {
    config: ExperimentConfig,
    seed: u64,
    out_dir: PathBuf,
    realtime: bool,
    format: Format,
}

impl Session {
    fn open(c: &Common) -> Result<Self, Failure> {
        let config = ExperimentConfig::load(&c.config).map_err(Failure::config)?;
        Ok(Session {
            seed: c.seed.unwrap_or(config.seed),
            out_dir: c.out.clone().unwrap_or_else(|| config.out_dir.clone()),
            realtime: c.realtime,
            format: c.format,
            config,
        })
    }

    fn execute(&self, config: &ExperimentConfig, r: &Resolved) -> crate::Result<RunMetrics> {
        let mut m = if self.realtime {
            run_realtime(&r.task, &r.cluster, &r.policy, &r.hp, &r.stop, self.seed, RealtimeOptions::default())?
        } else {
            run(&r.task, &r.cluster, &r.policy, &r.hp, &r.stop, self.seed)?
        };
        m.run_id = config.run_id(self.seed);
        if self.realtime {
            m.run_id.push_str("-rt");
        }
        Ok(m)
    }

    fn write_artifacts(&self, m: &RunMetrics) -> Result<(), Failure> {
        let base = self.out_dir.join(&m.run_id);
        let io = |r: crate::Result<()>| r.map_err(Failure::run);
        io(write_atomic(&with_suffix(&base, ".json"), m.to_json().map_err(Failure::run)?.as_bytes()))?;
        io(write_atomic(&with_suffix(&base, ".loss.csv"), m.loss_csv().map_err(Failure::run)?.as_bytes()))?;
        io(write_atomic(&with_suffix(&base, ".ledger.csv"), m.ledger_csv().map_err(Failure::run)?.as_bytes()))?;
        Ok(())
    }
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize)]
struct Summary {
    policy: String,
    run_id: String,
    convergence_time: Option<f64>,
    steps_to_converge: Option<u64>,
    final_loss: f64,
    waiting_fraction: f64,
    total_steps: u64,
}

impl Summary {
    fn of(m: &RunMetrics, label: String) -> Self {
        Summary {
            policy: label,
            run_id: m.run_id.clone(),
            convergence_time: m.convergence_time,
            steps_to_converge: m
                .convergence_time
                .map(|_| m.ledgers.iter().map(|l| l.local_steps).sum()),
            final_loss: m.final_loss,
            waiting_fraction: mean_waiting_fraction(m),
            total_steps: m.total_steps,
        }
    }
}

fn render<T: Serialize>(rows: &[T], format: Format) -> Result<String, Failure> {
    match format {
        Format::Json => serde_json::to_string_pretty(rows).map_err(Failure::run),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(Failure::run)?;
            }
            let bytes = w.into_inner().map_err(|e| Failure::run(e.to_string()))?;
            String::from_utf8(bytes).map_err(Failure::run)
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(Failure::run)?;
    if !text.ends_with('\n') {
        out.write_all(b"\n").map_err(Failure::run)?;
    }
    Ok(())
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn policy_label(p: &SyncPolicy) -> String {
    match p {
        SyncPolicy::Ssp { slack } => format!("ssp:{slack}"),
        SyncPolicy::FixedAdaComm { tau } => format!("fixed_adacomm:{tau}"),
        SyncPolicy::AdaComm { tau0, .. } => format!("adacomm:{tau0}"),
        SyncPolicy::Adsp(a) => match a.fixed_increment {
            Some(d) => format!("adsp:{d}"),
            None => "adsp".into(),
        },
        other => other.label().into(),
    }
}

fn cmd_run(c: &Common, out: &mut dyn Write) -> Result<i32, Failure> {
    let s = Session::open(c)?;
    let resolved = s.config.resolve().map_err(Failure::config)?;
    let m = s.execute(&s.config, &resolved).map_err(Failure::run)?;
    s.write_artifacts(&m)?;
    emit(out, &render(&[Summary::of(&m, policy_label(&resolved.policy))], s.format)?)?;
    Ok(EXIT_OK)
}

/// Parses one compare spec into a policy section, inheriting the configured
/// ADSP or ADACOMM keys when the kinds match.
pub fn parse_policy_spec(spec: &str, base: &PolicyConfig) -> crate::Result<PolicyConfig> {
    let spec = spec.trim();
    let (kind, arg) = match spec.split_once(':') {
        Some((k, a)) => (k.trim(), Some(a.trim())),
        None => (spec, None),
    };
    let num = |a: Option<&str>, what: &str| -> crate::Result<Option<u64>> {
        a.map(|v| {
            v.parse::<u64>()
                .map_err(|_| Error::config("--policies", format!("`{spec}`: {what} must be a nonnegative integer")))
        })
        .transpose()
    };
    let inherit = if base.kind == kind { base.clone() } else { PolicyConfig::default() };
    let mut p = PolicyConfig {
        kind: kind.to_string(),
        ..PolicyConfig::default()
    };
    match kind {
        "bsp" | "tap" => {
            if arg.is_some() {
                return Err(Error::config("--policies", format!("`{spec}`: {kind} takes no argument")));
            }
        }
        "ssp" => p.slack = num(arg, "slack")?.or(inherit.slack),
        "fixed_adacomm" | "fixed" => {
            p.kind = "fixed_adacomm".into();
            p.tau = num(arg, "tau")?.or(inherit.tau);
        }
        "adacomm" => {
            p = PolicyConfig { kind: p.kind, ..inherit };
            if let Some(t) = num(arg, "tau0")? {
                p.tau0 = Some(t);
            }
        }
        "adsp" => {
            p = PolicyConfig { kind: p.kind, ..inherit };
            if let Some(d) = num(arg, "commit rate")? {
                p.fixed_increment = Some(d);
            }
        }
        _ => return Err(Error::config("--policies", format!("unknown policy `{kind}`"))),
    }
    Ok(p)
}

fn cmd_compare(c: &Common, specs: &str, out: &mut dyn Write) -> Result<i32, Failure> {
    let s = Session::open(c)?;
    let mut variants = Vec::new();
    for spec in specs.split(',').filter(|x| !x.trim().is_empty()) {
        let mut cfg = s.config.clone();
        cfg.policy = parse_policy_spec(spec, &s.config.policy).map_err(Failure::config)?;
        let r = cfg.resolve().map_err(Failure::config)?;
        variants.push((cfg, r));
    }
    if variants.is_empty() {
        return Err(Failure::config("--policies lists no policy"));
    }
    let mut rows = Vec::new();
    for (cfg, r) in &variants {
        let m = s
            .execute(cfg, r)
            .map_err(|e| Failure::run(format!("{}: {e}", policy_label(&r.policy))))?;
        s.write_artifacts(&m)?;
        rows.push(Summary::of(&m, policy_label(&r.policy)));
    }
    let table = render(&rows, s.format)?;
    let name = format!("compare-{}.{}", s.config.run_id(s.seed), extension(s.format));
    write_atomic(&s.out_dir.join(name), table.as_bytes()).map_err(Failure::run)?;
    emit(out, &table)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    param: &'static str,
    value: String,
    convergence_time: String,
    final_loss: String,
    waiting_fraction: String,
}

fn apply_sweep(cfg: &mut ExperimentConfig, param: SweepParam, value: &str) -> crate::Result<()> {
    let bad = |what: &str| Error::config("--values", format!("`{value}` is not a valid {what}"));
    match param {
        SweepParam::DeltaC => {
            if cfg.policy.kind != "adsp" {
                return Err(Error::config("--param", "delta_c applies only to an adsp policy"));
            }
            cfg.policy.fixed_increment = Some(value.parse().map_err(|_| bad("commit rate"))?);
        }
        SweepParam::H => {
            if cfg.cluster.speeds.is_some() {
                return Err(Error::config("--param", "h needs a heterogeneity preset cluster, not explicit speeds"));
            }
            cfg.cluster.heterogeneity = Some(value.parse().map_err(|_| bad("heterogeneity degree"))?);
        }
        SweepParam::ExtraDelay => cfg.cluster.extra_delay = value.parse().map_err(|_| bad("delay"))?,
        SweepParam::M => {
            if cfg.cluster.speeds.is_some() || cfg.cluster.overheads.is_some() {
                return Err(Error::config("--param", "m needs a preset cluster with a shared overhead"));
            }
            cfg.cluster.workers = Some(value.parse().map_err(|_| bad("worker count"))?);
            if cfg.cluster.heterogeneity.is_none() {
                cfg.cluster.heterogeneity = Some(1.0);
            }
        }
    }
    Ok(())
}

fn cmd_sweep(c: &Common, param: SweepParam, values: &str, out: &mut dyn Write) -> Result<i32, Failure> {
    let s = Session::open(c)?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Failure::config("--values lists no value"));
    }
    // parameter/policy mismatches are config errors; a value the cluster
    // cannot run is an infeasible row
    let mut members = Vec::new();
    for v in &values {
        let mut cfg = s.config.clone();
        apply_sweep(&mut cfg, param, v).map_err(Failure::config)?;
        members.push((v.clone(), cfg.resolve().map(|r| (cfg, r))));
    }
    let results: Vec<crate::Result<RunMetrics>> = std::thread::scope(|scope| {
        let handles: Vec<_> = members
            .iter()
            .map(|(_, m)| {
                let s = &s;
                scope.spawn(move || match m {
                    Ok((cfg, r)) => s.execute(cfg, r),
                    Err(e) => Err(e.clone()),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep member panicked")).collect()
    });
    let mut rows = Vec::new();
    for ((v, _), res) in members.iter().zip(results) {
        match res {
            Ok(m) => {
                s.write_artifacts(&m)?;
                rows.push(SweepRow {
                    param: param.name(),
                    value: v.clone(),
                    convergence_time: m.convergence_time.map_or(String::new(), |t| t.to_string()),
                    final_loss: m.final_loss.to_string(),
                    waiting_fraction: mean_waiting_fraction(&m).to_string(),
                });
            }
            Err(e) if infeasible(&e) => rows.push(SweepRow {
                param: param.name(),
                value: v.clone(),
                convergence_time: "infeasible".into(),
                final_loss: String::new(),
                waiting_fraction: String::new(),
            }),
            Err(e) => return Err(Failure::run(format!("{} = {v}: {e}", param.name()))),
        }
    }
    let table = render(&rows, s.format)?;
    let name = format!("sweep-{}-{}.{}", param.name(), s.config.run_id(s.seed), extension(s.format));
    write_atomic(&s.out_dir.join(name), table.as_bytes()).map_err(Failure::run)?;
    emit(out, &table)?;
    Ok(EXIT_OK)
}

fn infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::InfeasibleRate { .. } | Error::Config { .. } | Error::InvalidArgument { .. } | Error::Underdetermined { .. }
    )
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    run_id: String,
    passed: bool,
    checks: Vec<CheckReport>,
}

// flat row so every CSV record has the same columns
#[derive(Debug, Serialize)]
struct CheckRow<'a> {
    name: &'a str,
    passed: bool,
    theory: f64,
    empirical: f64,
    tolerance: f64,
    note: &'a str,
}

impl<'a> From<&'a CheckReport> for CheckRow<'a> {
    fn from(c: &'a CheckReport) -> Self {
        CheckRow {
            name: &c.name,
            passed: c.passed,
            theory: c.theory,
            empirical: c.empirical,
            tolerance: c.tolerance,
            note: &c.note,
        }
    }
}

const THROUGHPUT_TOL: f64 = 0.02;
const STALENESS_MEAN_TOL: f64 = 0.02;
const REGRET_TOL: f64 = 0.05;
const VERIFY_HORIZON: f64 = 6000.0;
const VERIFY_WARMUP: f64 = 600.0;
const REGRET_STEPS: u64 = 20_000;

fn cmd_verify(c: &Common, out: &mut dyn Write) -> Result<i32, Failure> {
    let s = Session::open(c)?;
    let r = s.config.resolve().map_err(Failure::config)?;
    let checks = verify_checks(&s, &r)?;
    let passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        run_id: s.config.run_id(s.seed),
        passed,
        checks,
    };
    let json = serde_json::to_string_pretty(&report).map_err(Failure::run)?;
    write_atomic(&s.out_dir.join(format!("verify-{}.json", report.run_id)), json.as_bytes()).map_err(Failure::run)?;
    match s.format {
        Format::Json => emit(out, &json)?,
        Format::Csv => {
            let rows: Vec<CheckRow> = report.checks.iter().map(CheckRow::from).collect();
            emit(out, &render(&rows, Format::Csv)?)?
        }
    }
    if passed {
        Ok(EXIT_OK)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("verification failed: {}", failed.join(", ")),
        })
    }
}

fn verify_checks(s: &Session, r: &Resolved) -> Result<Vec<CheckReport>, Failure> {
    let cluster = &r.cluster;
    let m = cluster.workers();
    let base_adsp = match &r.policy {
        SyncPolicy::Adsp(a) => a.clone(),
        _ => s.config.policy.adsp_params(),
    };
    let delta_c = s.config.verify.delta_c.unwrap_or(2);
    let fixed = SyncPolicy::Adsp(crate::sync::AdspParams {
        fixed_increment: Some(delta_c),
        ..base_adsp.clone()
    });
    let horizon = StopRule::time(VERIFY_HORIZON);
    let go = |policy: &SyncPolicy, hp: &crate::params::Hyperparams, stop: &StopRule| {
        run(&r.task, cluster, policy, hp, stop, s.seed).map_err(|e| Failure::run(format!("{}: {e}", policy_label(policy))))
    };
    let mut checks = Vec::new();

    let adsp_run = go(&fixed, &r.hp, &horizon)?;
    let blocked = adsp_run.ledgers.iter().map(|l| l.blocked_s).fold(0.0, f64::max);
    checks.push(CheckReport::relative("adsp_blocked_seconds", 0.0, blocked, 0.0));
    checks.push(CheckReport::below("adsp_commit_gap", 1.0, adsp_run.max_commit_gap() as f64, 1.5));

    // staleness: measured mean against the geometric mean (1 - p) / p
    let p = s.config.verify.staleness_p.unwrap_or(1.0 / m as f64);
    let n = adsp_run.staleness.len().max(1) as f64;
    let mean = adsp_run.staleness.iter().sum::<u64>() as f64 / n;
    let expected = if p > 0.0 { (1.0 - p) / p } else { f64::INFINITY };
    let inputs = crate::analysis::TheoryInputs::from_cluster(cluster, base_adsp.gamma, delta_c);
    let (p_closed, _) = implicit_momentum(&inputs).map_err(Failure::run)?;
    let mut note = format!("p = {p:.4} over {} commits", adsp_run.staleness.len());
    if adsp_run.staleness.len() >= 1000 {
        let tv = staleness_fit(&adsp_run.staleness, p).map_err(Failure::run)?;
        let tv_closed = staleness_fit(&adsp_run.staleness, p_closed).map_err(Failure::run)?;
        note.push_str(&format!("; TV {tv:.3}; closed-form p = {p_closed:.4} gives TV {tv_closed:.3}"));
    }
    checks.push(CheckReport::relative("staleness_mean", expected, mean, STALENESS_MEAN_TOL).with_note(note));

    let tau = 4;
    for policy in [SyncPolicy::Bsp, SyncPolicy::FixedAdaComm { tau }, fixed.clone()] {
        let theory = policy_speeds(&inputs, &policy).map_err(Failure::run)?;
        let measured = if matches!(policy, SyncPolicy::Adsp(_)) {
            adsp_run.throughput(VERIFY_WARMUP)
        } else {
            go(&policy, &r.hp, &horizon)?.throughput(VERIFY_WARMUP)
        }
        .unwrap_or(0.0);
        checks.push(CheckReport::relative(
            &format!("throughput_{}", policy_label(&policy)),
            theory,
            measured,
            THROUGHPUT_TOL,
        ));
    }

    let mut hp = r.hp;
    hp.lr_schedule = LrSchedule::InverseSqrt;
    hp.global_lr = 1.0;
    let regret_run = go(&fixed, &hp, &StopRule::steps(REGRET_STEPS))?;
    let losses: Vec<f64> = regret_run.loss_trace.iter().skip(1).map(|x| x.loss).collect();
    let curve = regret_curve(&losses, r.task.optimal_loss()).map_err(Failure::run)?;
    let ok = tail_non_increasing(&curve, 0.5, REGRET_TOL);
    let (mid, last) = (curve[curve.len() / 2].normalized, curve[curve.len() - 1].normalized);
    checks.push(CheckReport {
        name: "regret_tail_non_increasing".into(),
        theory: mid,
        empirical: last,
        tolerance: REGRET_TOL,
        passed: ok,
        note: format!("R(T)/sqrt(T) at T/2 and T over {} PS steps", curve.len()),
    });

    let cap = (0..m)
        .filter_map(|i| max_feasible_rate(base_adsp.gamma, cluster.round_trip(i)))
        .min()
        .unwrap_or(1)
        .clamp(1, 12);
    let momenta: Vec<f64> = (1..=cap)
        .map(|d| implicit_momentum(&TheoryInputs::from_cluster(cluster, base_adsp.gamma, d)).map(|x| x.1))
        .collect::<crate::Result<_>>()
        .map_err(Failure::run)?;
    let monotone = momenta.windows(2).all(|w| if m > 1 { w[1] < w[0] } else { w[1] <= w[0] });
    checks.push(CheckReport {
        name: "implicit_momentum_falls_with_rate".into(),
        theory: momenta[0],
        empirical: *momenta.last().unwrap(),
        tolerance: 0.0,
        passed: monotone,
        note: format!("1 - p for commit rates 1..={cap}"),
    });
    Ok(checks)
}
