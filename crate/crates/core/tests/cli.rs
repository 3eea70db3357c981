use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_adsp");

const TASK: &str = r#"
[task]
kind = "quadratic"
dim = 10
examples = 400
condition = 5.0
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("{TASK}\n{body}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn adsp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Parses CSV text into header-keyed rows.
fn rows(text: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect()
        })
        .collect()
}

const HETERO: &str = r#"
[cluster]
workers = 4
heterogeneity = 2.0
overhead = 1.0

[policy]
kind = "adsp"
epoch_len = 300.0

[stop]
max_time = 20000.0
converge = true
eps_var = 1e-12
eval_interval = 30.0
"#;

#[test]
fn single_worker_bsp_smoke_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "bsp.toml",
        r#"
[cluster]
speeds = [1.0]
overhead = 0.0

[policy]
kind = "bsp"

[stop]
max_steps = 200
"#,
    );
    let out = dir.path().join("out");
    let o = adsp(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0]["policy"], "bsp");
    assert_eq!(r[0]["total_steps"], "200");
    let id = &r[0]["run_id"];
    for suffix in [".json", ".loss.csv", ".ledger.csv"] {
        assert!(out.join(format!("{id}{suffix}")).is_file(), "missing {id}{suffix}");
    }
}

#[test]
fn missing_speeds_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        r#"
[cluster]
overhead = 1.0

[policy]
kind = "bsp"

[stop]
max_time = 100.0
"#,
    );
    let o = adsp(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cluster.speeds"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_flag_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "typo.toml", &HETERO.replace("overhead = 1.0", "overhed = 1.0"));
    let o = adsp(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("overhed"), "{}", stderr(&o));
    assert_eq!(adsp(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(adsp(&["--help"]).status.code(), Some(0));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = adsp(&["run", "--config", &cfg, "--seed", "7", "--out", a.to_str().unwrap(), "--format", "json"]);
    let ob = adsp(&["run", "--config", &cfg, "--seed", "7", "--out", b.to_str().unwrap(), "--format", "json"]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    assert_eq!(oa.stdout, ob.stdout);
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let oc = adsp(&["run", "--config", &cfg, "--seed", "8", "--out", a.to_str().unwrap(), "--format", "json"]);
    assert_ne!(oa.stdout, oc.stdout);
}

#[test]
fn compare_orders_adsp_first_and_reports_waiting() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    let out = dir.path().join("out");
    let o = adsp(&["compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--policies", "bsp,ssp:2,fixed:8,adsp"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    let labels: Vec<&str> = r.iter().map(|x| x["policy"].as_str()).collect();
    assert_eq!(labels, ["bsp", "ssp:2", "fixed_adacomm:8", "adsp"]);
    let time = |i: usize| r[i]["convergence_time"].parse::<f64>().unwrap();
    let wait = |i: usize| r[i]["waiting_fraction"].parse::<f64>().unwrap();
    assert!(time(3) < time(2) && time(3) < time(1) && time(3) < time(0));
    assert!(wait(3) < wait(0));
    let mut ids: Vec<&str> = r.iter().map(|x| x["run_id"].as_str()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 4);
    assert!(std::fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("compare-")));
}

#[test]
fn bsp_equals_fixed_tau_one_on_a_homogeneous_free_cluster() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "h.toml",
        r#"
[cluster]
workers = 3
heterogeneity = 1.0
overhead = 0.0

[policy]
kind = "bsp"

[stop]
max_time = 300.0
"#,
    );
    let o = adsp(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--policies", "bsp,fixed_adacomm:1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    for col in ["final_loss", "total_steps", "waiting_fraction"] {
        assert_eq!(r[0][col], r[1][col], "{col}");
    }
}

#[test]
fn sweep_marks_infeasible_rates() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    let o = adsp(&[
        "sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--param", "delta_c", "--values", "1,2,60",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 3);
    assert!(r[0]["convergence_time"].parse::<f64>().is_ok());
    assert!(r[1]["convergence_time"].parse::<f64>().is_ok());
    assert_eq!(r[2]["convergence_time"], "infeasible");
    let bad = adsp(&["sweep", "--config", &cfg, "--param", "delta_c", "--values", "x"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn sweep_over_workers_and_heterogeneity() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    for (param, values) in [("m", "2,4"), ("h", "1,3"), ("extra_delay", "0,2")] {
        let o = adsp(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--param", param, "--values", values]);
        assert_eq!(o.status.code(), Some(0), "{param}: {}", stderr(&o));
        assert_eq!(rows(&stdout(&o)).len(), 2);
    }
}

#[test]
fn verify_passes_by_default_and_fails_on_a_wrong_law() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    let o = adsp(&["verify", "--config", &cfg, "--out", out, "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 7);

    let wrong = write_config(dir.path(), "wrong.toml", &format!("{HETERO}\n[verify]\nstaleness_p = 0.5\n"));
    let o = adsp(&["verify", "--config", &wrong, "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("staleness_mean"), "{}", stderr(&o));
}

#[test]
fn verify_single_worker() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "one.toml",
        r#"
[cluster]
speeds = [1.0]
overhead = 1.0

[policy]
kind = "adsp"

[stop]
max_time = 3000.0
"#,
    );
    let o = adsp(&["verify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn in_process_entry_point_matches_binary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "adsp.toml", HETERO);
    let args = ["adsp", "run", "--config", &cfg, "--out", dir.path().to_str().unwrap()];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    assert_eq!(adsp::cli::main_with_args(args, &mut out, &mut err), 0);
    assert_eq!(out, adsp(&args[1..]).stdout);
}
