use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plmpc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plmpc"))
        .args(args)
        .env("PLMPC_OUT_DIR", out)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = plmpc(
        &["run", "--scenario", "s3_tv_cost", "--cycles", "2"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let dir = tmp.path().join("s3_tv_cost");
    let csv = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    let m = manifest(&dir);
    assert_eq!(m["exit_status"], 0);
    assert_eq!(m["settings_hash"].as_str().unwrap().len(), 64);
    for f in m["files"].as_array().unwrap() {
        assert!(dir.join(f.as_str().unwrap()).exists());
    }
    assert!(!dir.join("manifest.json.tmp").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["period_costs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["properties"]["passed"], true);
}

#[test]
fn missing_scenario_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = plmpc(&["run", "--scenario", "missing.cfg"], tmp.path());
    assert_eq!(code(&o), 2);
    let m = manifest(&tmp.path().join("missing"));
    assert_eq!(m["exit_status"], 2);
    assert!(m["error"]["message"].as_str().is_some());
}

#[test]
fn malformed_scenario_is_a_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    fs::write(&path, "period = banana\n").unwrap();
    let o = plmpc(&["check", "--scenario", path.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_seed_override_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seed = String::from("t,x0,x1,u0\n");
    for t in 0..=100 {
        let u = if t == 100 {
            String::new()
        } else if t == 40 {
            "0.5".into()
        } else {
            "0".into()
        };
        seed += &format!("{t},0,0,{u}\n");
    }
    let path = tmp.path().join("seed.csv");
    fs::write(&path, seed).unwrap();
    let o = plmpc(
        &[
            "run",
            "--scenario",
            "s1_tv_dynamics",
            "--cycles",
            "2",
            "--seed-override",
            path.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
    let m = manifest(&tmp.path().join("s1_tv_dynamics"));
    assert_eq!(m["error"]["kind"], "seed_validation");
}

#[test]
fn valid_seed_override_is_used() {
    let tmp = tempfile::tempdir().unwrap();
    let mut seed = String::from("t,x0,x1,u0\n");
    for t in 0..=100 {
        seed += &format!("{t},0,0,{}\n", if t == 100 { "" } else { "0" });
    }
    let path = tmp.path().join("seed.csv");
    fs::write(&path, seed).unwrap();
    let o = plmpc(
        &[
            "check",
            "--scenario",
            "s1_tv_dynamics",
            "--cycles",
            "2",
            "--seed-override",
            path.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("result: PASS"));
}

#[test]
fn jobs_run_scenarios_into_separate_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let o = plmpc(
        &[
            "run",
            "--scenario",
            "s1_tv_dynamics",
            "--scenario",
            "s3_tv_cost",
            "--cycles",
            "2",
            "--jobs",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.find("s1_tv_dynamics").unwrap() < stdout.find("s3_tv_cost").unwrap());
    for s in ["s1_tv_dynamics", "s3_tv_cost"] {
        assert!(tmp.path().join(s).join("trajectory.csv").exists());
    }
}

#[test]
fn export_slices_cover_every_tick() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&plmpc(
            &["run", "--scenario", "s1_tv_dynamics", "--cycles", "2"],
            tmp.path()
        )),
        0
    );
    let run = tmp.path().join("s1_tv_dynamics");
    let o = plmpc(
        &["export-figures-data", "--run", run.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let slices = run.join("figures");
    for f in ["state.csv", "input.csv", "lmpc_cost.csv"] {
        assert_eq!(
            fs::read_to_string(slices.join(f)).unwrap().lines().count(),
            201,
            "{f}"
        );
    }
    let state = fs::read_to_string(slices.join("state.csv")).unwrap();
    assert!(state.starts_with("t,x0,x0_lo,x0_hi,x1,x1_lo,x1_hi\n0,0,-0.3,0.3,0,,\n"));
    let cost = fs::read_to_string(slices.join("lmpc_cost.csv")).unwrap();
    let first = cost.lines().skip(1).find(|l| !l.ends_with(',')).unwrap();
    assert!(first.starts_with("100,"));
}

#[test]
fn export_of_an_empty_directory_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = plmpc(
        &["export-figures-data", "--run", tmp.path().to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_arguments_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&plmpc(&["run"], tmp.path())), 2);
    assert_eq!(
        code(&plmpc(
            &["run", "--scenario", "s1_tv_dynamics", "--jobs", "0"],
            tmp.path()
        )),
        2
    );
    assert_eq!(code(&plmpc(&["frobnicate"], tmp.path())), 2);
}
