//! Experiment configuration: a strict TOML file with dotted sections.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [task]
//! kind = "quadratic"
//! dim = 20
//! examples = 2000
//!
//! [cluster]
//! workers = 6
//! heterogeneity = 3.0
//! overhead = 2.0
//!
//! [policy]
//! kind = "adsp"
//! epoch_len = 300.0
//!
//! [stop]
//! max_time = 40000.0
//! converge = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{validate, ClusterSpec, StopRule};
use crate::error::{Error, Result};
use crate::params::{Hyperparams, LrSchedule};
use crate::sync::{AdspParams, SyncPolicy, TimerJitter};
use crate::workloads::{TaskKind, TaskSpec, TrainingTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub dim: usize,
    pub examples: usize,
    #[serde(default = "default_condition")]
    pub condition: f64,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub reg: Option<f64>,
    #[serde(default = "default_task_seed")]
    pub seed: u64,
}

fn default_condition() -> f64 {
    10.0
}

fn default_task_seed() -> u64 {
    1
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        let mut s = match self.kind {
            TaskKind::Quadratic => TaskSpec::quadratic(self.dim, self.examples, self.condition, self.seed),
            TaskKind::Logistic => TaskSpec::logistic(self.dim, self.examples, self.condition, self.seed),
        };
        if let Some(n) = self.noise {
            s.noise = n;
        }
        if let Some(r) = self.reg {
            s.reg = r;
        }
        s
    }
}

/// Either explicit `speeds` or a `heterogeneity` preset; overheads either per
/// worker or one shared value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub speeds: Option<Vec<f64>>,
    #[serde(default)]
    pub heterogeneity: Option<f64>,
    #[serde(default)]
    pub overhead: Option<f64>,
    #[serde(default)]
    pub overheads: Option<Vec<f64>>,
    #[serde(default)]
    pub extra_delay: f64,
    #[serde(default)]
    pub data_skew: f64,
}

impl ClusterConfig {
    pub fn build(&self) -> Result<ClusterSpec> {
        let mut spec = match (&self.speeds, self.heterogeneity) {
            (Some(_), Some(_)) => {
                return Err(Error::config("cluster.heterogeneity", "give either speeds or heterogeneity, not both"))
            }
            (Some(v), None) => {
                if let Some(m) = self.workers {
                    if m != v.len() {
                        return Err(Error::config(
                            "cluster.speeds",
                            format!("{} speeds for {m} workers", v.len()),
                        ));
                    }
                }
                ClusterSpec::new(v.clone(), vec![0.0; v.len()])
            }
            (None, Some(h)) => {
                let m = self
                    .workers
                    .ok_or_else(|| Error::config("cluster.workers", "required with a heterogeneity preset"))?;
                ClusterSpec::with_heterogeneity(m, h, 0.0).map_err(|e| Error::config("cluster.heterogeneity", e.to_string()))?
            }
            (None, None) => {
                return Err(Error::config(
                    "cluster.speeds",
                    "missing: give per-worker speeds or a heterogeneity preset with workers",
                ))
            }
        };
        let m = spec.workers();
        spec.overheads = match (&self.overheads, self.overhead) {
            (Some(_), Some(_)) => return Err(Error::config("cluster.overhead", "give either overhead or overheads, not both")),
            (Some(o), None) => {
                if o.len() != m {
                    return Err(Error::config("cluster.overheads", format!("{} overheads for {m} workers", o.len())));
                }
                o.clone()
            }
            (None, Some(o)) => vec![o; m],
            (None, None) => return Err(Error::config("cluster.overheads", "missing: give overhead or overheads")),
        };
        spec.extra_delay = self.extra_delay;
        spec.data_skew = self.data_skew;
        spec.validate()?;
        Ok(spec)
    }
}

/// Flat policy section; only the keys belonging to `kind` may be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: String,
    pub slack: Option<u64>,
    pub tau: Option<u64>,
    pub tau0: Option<u64>,
    pub check_interval: Option<f64>,
    pub multiplier: Option<f64>,
    pub gamma: Option<f64>,
    pub epoch_len: Option<f64>,
    pub eval_window: Option<f64>,
    pub fixed_increment: Option<u64>,
    pub overlap_commits: Option<bool>,
    pub timer_jitter: Option<TimerJitter>,
    pub probe_budget: Option<usize>,
}

impl PolicyConfig {
    fn used_keys(kind: &str) -> Option<&'static [&'static str]> {
        Some(match kind {
            "bsp" | "tap" => &[],
            "ssp" => &["slack"],
            "fixed_adacomm" => &["tau"],
            "adacomm" => &["tau0", "check_interval", "multiplier"],
            "adsp" => &[
                "gamma",
                "epoch_len",
                "eval_window",
                "fixed_increment",
                "overlap_commits",
                "timer_jitter",
                "probe_budget",
            ],
            _ => return None,
        })
    }

    fn set_keys(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut note = |set: bool, k: &'static str| {
            if set {
                v.push(k)
            }
        };
        note(self.slack.is_some(), "slack");
        note(self.tau.is_some(), "tau");
        note(self.tau0.is_some(), "tau0");
        note(self.check_interval.is_some(), "check_interval");
        note(self.multiplier.is_some(), "multiplier");
        note(self.gamma.is_some(), "gamma");
        note(self.epoch_len.is_some(), "epoch_len");
        note(self.eval_window.is_some(), "eval_window");
        note(self.fixed_increment.is_some(), "fixed_increment");
        note(self.overlap_commits.is_some(), "overlap_commits");
        note(self.timer_jitter.is_some(), "timer_jitter");
        note(self.probe_budget.is_some(), "probe_budget");
        v
    }

    /// ADSP parameters from this section, defaults where unset.
    pub fn adsp_params(&self) -> AdspParams {
        let d = AdspParams::default();
        AdspParams {
            gamma: self.gamma.unwrap_or(d.gamma),
            epoch_len: self.epoch_len.unwrap_or(d.epoch_len),
            eval_window: self.eval_window.unwrap_or(d.eval_window),
            fixed_increment: self.fixed_increment,
            overlap_commits: self.overlap_commits.unwrap_or(false),
            timer_jitter: self.timer_jitter.unwrap_or_default(),
            local_step_caps: None,
            probe_budget: self.probe_budget.unwrap_or(d.probe_budget),
        }
    }

    pub fn build(&self) -> Result<SyncPolicy> {
        let used = Self::used_keys(&self.kind).ok_or_else(|| {
            Error::config(
                "policy.kind",
                format!("unknown policy `{}` (bsp, ssp, tap, fixed_adacomm, adacomm, adsp)", self.kind),
            )
        })?;
        if let Some(k) = self.set_keys().into_iter().find(|k| !used.contains(k)) {
            return Err(Error::config(format!("policy.{k}"), format!("not used by policy `{}`", self.kind)));
        }
        let need = |v: Option<u64>, k: &str| v.ok_or_else(|| Error::config(format!("policy.{k}"), "missing"));
        let policy = match self.kind.as_str() {
            "bsp" => SyncPolicy::Bsp,
            "tap" => SyncPolicy::Tap,
            "ssp" => SyncPolicy::Ssp {
                slack: need(self.slack, "slack")?,
            },
            "fixed_adacomm" => SyncPolicy::FixedAdaComm { tau: need(self.tau, "tau")? },
            "adacomm" => SyncPolicy::AdaComm {
                tau0: self.tau0.unwrap_or(1),
                check_interval: self.check_interval.unwrap_or(60.0),
                multiplier: self.multiplier.unwrap_or(2.0),
            },
            _ => SyncPolicy::Adsp(self.adsp_params()),
        };
        policy
            .validate()
            .map_err(|e| Error::config(format!("policy.{}", arg_name(&e).unwrap_or("kind")), e.to_string()))?;
        Ok(policy)
    }
}

fn arg_name(e: &Error) -> Option<&'static str> {
    match e {
        Error::InvalidArgument { name, .. } => Some(name),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub global_lr: Option<f64>,
    pub local_lr: Option<f64>,
    pub local_lr_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub batch_size: Option<usize>,
}

impl HyperConfig {
    pub fn build(&self, m: usize) -> Result<Hyperparams> {
        let mut hp = Hyperparams::for_workers(m);
        if let Some(v) = self.global_lr {
            hp.global_lr = v;
        }
        if let Some(v) = self.local_lr {
            hp.local_lr_init = v;
        }
        if let Some(v) = self.local_lr_decay {
            hp.local_lr_decay = v;
        }
        if let Some(v) = self.momentum {
            hp.momentum = v;
        }
        if let Some(v) = self.lr_schedule {
            hp.lr_schedule = v;
        }
        if let Some(v) = self.batch_size {
            hp.batch_size = v;
        }
        hp.validate().map_err(|e| {
            let field = match arg_name(&e) {
                Some("local_lr_init") => "local_lr",
                Some(n) => n,
                None => "hyper",
            };
            Error::config(format!("hyper.{field}"), e.to_string())
        })?;
        Ok(hp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub cluster: ClusterConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    pub stop: StopRule,
    #[serde(default)]
    pub verify: VerifyConfig,
}

/// Knobs for the `verify` command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Geometric parameter the staleness check compares against; defaults to
    /// the commit-rate form `rate_i / sum of rates`.
    pub staleness_p: Option<f64>,
    /// Commit rate used by the fixed-rate checks; defaults to 2.
    pub delta_c: Option<u64>,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs, validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub task: TrainingTask,
    pub cluster: ClusterSpec,
    pub policy: SyncPolicy,
    pub hp: Hyperparams,
    pub stop: StopRule,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_from_message(&msg).unwrap_or_else(|| "config".into());
            Error::config(field, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Builds and cross-validates every piece before any run starts.
    pub fn resolve(&self) -> Result<Resolved> {
        let cluster = self.cluster.build()?;
        let policy = self.policy.build()?;
        let hp = self.hyper.build(cluster.workers())?;
        let task = self
            .task
            .spec()
            .build()
            .map_err(|e| Error::config(format!("task.{}", arg_name(&e).unwrap_or("dim")), e.to_string()))?;
        let stop = self.stop.clone();
        validate(&task, &cluster, &policy, &hp, &stop)?;
        Ok(Resolved {
            task,
            cluster,
            policy,
            hp,
            stop,
        })
    }

    /// SHA-256 over the canonical JSON of everything that affects results
    /// except the seed; the output directory is excluded too.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.out_dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(digest)
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", &self.hash()[..12])
    }
}

// toml reports the offending key inside backticks; prefer that as the field.
fn field_from_message(msg: &str) -> Option<String> {
    let start = msg.find('`')?;
    let rest = &msg[start + 1..];
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

/// Write through a sibling temp file and rename, so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
