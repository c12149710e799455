//! End-to-end runs of the binary: outputs and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn case(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
}

fn run(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treegrid"))
        .args(args)
        .env("TREEGRID_OUT", out_dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn decompose_text() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["decompose", case("ref8.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(
        stdout(&o),
        "areas: 1\n  area 0: buses 1 2 3 4 5 6 7 8\nbridges: none\ntie lines: none\n\
         internal lines: 1 2 3 4 5 6 7 8 9 10 11\n"
    );
}

#[test]
fn decompose_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["decompose", case("ref8.json").to_str().unwrap(), "--json"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["areas"].as_array().unwrap().len(), 1);
    assert_eq!(v["internal_lines"].as_array().unwrap().len(), 11);
    assert!(v["bridges"].as_array().unwrap().is_empty());
}

#[test]
fn plan_writes_a_tree_partitioned_case() {
    let dir = tempfile::tempdir().unwrap();
    let revised = dir.path().join("revised.json");
    let o = run(&["plan", case("ref8.json").to_str().unwrap(), "--out", revised.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("bridges: "));
    let o = run(&["decompose", revised.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("areas: 2\n"), "{}", stdout(&o));
}

#[test]
fn plan_overload_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["plan", case("ref8.json").to_str().unwrap(), "--switch", "1"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(o.stdout.is_empty());
}

#[test]
fn non_critical_uc_cascade() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["cascade", case("ref8.json").to_str().unwrap(), "--fail", "3"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().next(), Some("stages=1, lifts=0, llr=0"));
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    // one stage record and the summary
    assert_eq!(trace.lines().count(), 2);
    let stage: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(stage["verdict"], "equilibrium");
    assert!(stage["tripped"].as_array().unwrap().is_empty());
}

#[test]
fn critical_uc_cascade_lifts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["cascade", case("ref8.json").to_str().unwrap(), "--fail", "6"], dir.path());
    assert_eq!(code(&o), 0);
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.starts_with("stages=1, lifts=2, llr=0."), "{first}");
}

#[test]
fn agc_cascade_propagates() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["cascade", case("ref8.json").to_str().unwrap(), "--fail", "2", "--controller", "agc"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("stages=2, "));
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.starts_with("{\"record\":\"stage\"")).count(), 2);
}

#[test]
fn unservable_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["cascade", case("ref8.json").to_str().unwrap(), "--fail", "1", "--controller", "agc"], dir.path());
    assert_eq!(code(&o), 7);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot be balanced"));
    // the partial trace is still written
    assert!(dir.path().join("trace.jsonl").exists());
}

#[test]
fn stage_cap_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = case("ref8.json");
    let args = ["cascade", path.to_str().unwrap(), "--fail", "2", "--controller", "agc", "--stage-cap", "1"];
    assert_eq!(code(&run(&args, dir.path())), 6);
}

#[test]
fn unknown_line_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["cascade", case("ref8.json").to_str().unwrap(), "--fail", "99"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn io_and_parse_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&run(&["decompose", missing.to_str().unwrap()], dir.path())), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"version\": 1,").unwrap();
    assert_eq!(code(&run(&["decompose", bad.to_str().unwrap()], dir.path())), 2);
    let extra = dir.path().join("extra.json");
    let text = std::fs::read_to_string(case("ref8.json")).unwrap().replacen("\"version\": 1,", "\"version\": 1, \"x\": 0,", 1);
    std::fs::write(&extra, text).unwrap();
    assert_eq!(code(&run(&["decompose", extra.to_str().unwrap()], dir.path())), 2);
    let o = run(&["decompose", extra.to_str().unwrap(), "--lenient"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field x"));
}

#[test]
fn detect_reports_oracle_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["detect", case("ref8.json").to_str().unwrap(), "--fail", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("oracle agrees (Feasible)"), "{}", stdout(&o));
    assert!(dir.path().join("dual_trace.csv").exists());
}

#[test]
fn solve_prints_equilibrium() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", case("ref8.json").to_str().unwrap(), "--fail", "3"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn study_outputs_are_deterministic_across_jobs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (dir, jobs) in dirs.iter().zip(["1", "3"]) {
        let o = run(
            &[
                "study",
                case("mesh30.json").to_str().unwrap(),
                "--profiles",
                "2",
                "--alpha",
                "0.9,0.8",
                "--seed",
                "5",
                "--jobs",
                jobs,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n == "report.json"));
    assert!(names.iter().any(|n| n.to_string_lossy().starts_with("ccdf_llr_")));
    for name in names {
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn study_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.toml");
    std::fs::write(&cfg, "profiles = 1\nalphas = [0.9]\ncontrollers = [\"uc\"]\nseed = 3\n").unwrap();
    let o = run(
        &["study", case("mesh30.json").to_str().unwrap(), "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 1);
    std::fs::write(&cfg, "profiles = 0\n").unwrap();
    let o = run(
        &["study", case("mesh30.json").to_str().unwrap(), "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 3);
}
