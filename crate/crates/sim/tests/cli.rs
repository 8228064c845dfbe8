use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bwbroker")).args(args).env_remove("BWBROKER_LOG").output().expect("spawn")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_file_is_input_error() {
    let o = bin(&["run", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
    assert_eq!(bin(&["alloc", "/nonexistent/policy.json"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn alloc_prints_the_worked_example() {
    let o = bin(&["alloc", &scenario("vm_dfs_policy.json"), &scenario("vm_dfs_demands.json")]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    let alloc: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[2])).collect();
    assert_eq!(alloc, [("11", "500Mb/s"), ("12", "500Mb/s"), ("21", "4Gb/s"), ("22", "4Gb/s")]);

    let o = bin(&["alloc", &scenario("vm_dfs_policy.json"), &scenario("vm_dfs_demands_idle.json")]);
    assert!(stdout(&o).lines().any(|l| l.split_whitespace().take(3).eq(["21", "10Gb/s", "8Gb/s"])));
}

#[test]
fn alloc_without_demands_shows_static_caps() {
    let o = bin(&["alloc", &scenario("vm_dfs_policy.json")]);
    let enforced: Vec<String> = stdout(&o).lines().skip(1).map(|l| l.split_whitespace().nth(3).unwrap().to_string()).collect();
    assert_eq!(enforced, ["1Gb/s", "1Gb/s", "8Gb/s", "8Gb/s"]);
}

#[test]
fn alloc_bench_reports_time() {
    let o = bin(&["alloc", &scenario("vm_dfs_policy.json"), "--bench", "1000"]);
    assert!(stdout(&o).contains("water_fill N=1000:"));
}

#[test]
fn bound_rows_and_quantile() {
    let o = bin(&["bound", "--conv-iters", "15", "--size", "200kB", "--size", "1MB"]);
    let text = stdout(&o);
    assert!(text.contains("38.30ms") && text.contains("27.67ms"), "{text}");

    let o = bin(&["bound", "--conv-iters", "15", "--rho", "0.99"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverges"));

    let o = bin(&["bound", "--quantile", "0.99", "--rho", "0.8"]);
    assert!(stdout(&o).contains("18.421ms"));
}

#[test]
fn run_writes_traces_and_reflects_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, min: u32| {
        let text = format!(
            r#"{{"horizon": "200ms",
                "topology": {{"racks": 2, "hosts_per_rack": 2, "nic_rate": "1G", "uplink": "1G"}},
                "services": [{{"id": 1}}],
                "workloads": [{{"kind": "rpc", "service": 1, "size": "10kB", "load": "200M"}}],
                "assertions": [{{"metric": "completed_flows", "service": 1, "min": {min}}}]}}"#
        );
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let out = dir.path().join("out");
    let o = bin(&["run", &write("ok.json", 10), "--out", out.to_str().unwrap(), "--gnuplot"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["util.csv", "alloc.csv", "flows.csv", "queues.csv", "fabric.csv", "control.csv", "summary.json", "util.gp"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());

    let o = bin(&["run", &write("bad.json", 1_000_000), "--out", dir.path().join("out2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn log_level_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bwbroker"))
        .args(["run", &scenario("mixed.json"), "--out", dir.path().to_str().unwrap()])
        .env("BWBROKER_LOG", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).contains("running mixed for 4s"));
}
