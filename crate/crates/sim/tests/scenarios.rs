use bwbroker::policy::Direction;
use bwbroker::units::{Limit, MBPS, NS_PER_SEC};
use bwbroker_sim::trace::Scope;
use bwbroker_sim::{run, Scenario, TraceSet};

const MS: u64 = NS_PER_SEC / 1000;

fn sim(json: &str) -> TraceSet {
    run(&Scenario::from_json(json).expect("valid scenario")).expect("runs")
}

fn two_racks(extra: &str) -> String {
    let extra = if extra.contains("\"horizon\"") { extra.to_string() } else { format!(r#""horizon": "300ms", {extra}"#) };
    format!(
        r#"{{
        "topology": {{"racks": 2, "hosts_per_rack": 2, "nic_rate": "10G", "uplink": "10G", "spine_links": 1}},
        "services": [{{"id": 1}}, {{"id": 2}}],
        "outputs": {{"util_bin": "10ms"}},
        {extra}
    }}"#
    )
}

#[test]
fn empty_workload_is_silent() {
    let t = sim(&two_racks(r#""workloads": []"#));
    for scope in [Scope::Rack(0, Direction::Tx), Scope::Rack(1, Direction::Rx), Scope::Fabric] {
        assert!(t.series(scope, None).iter().all(|&x| x == 0.0));
    }
    assert!(t.flows.is_empty());
}

#[test]
fn lone_flow_fills_the_path() {
    let t = sim(&two_racks(
        r#""workloads": [{"kind": "long_lived", "service": 1, "src": {"hosts": [0]}, "dst": {"hosts": [2]}}]"#,
    ));
    let u = t.mean_util(Scope::Rack(0, Direction::Tx), Some(1), 50 * MS, 300 * MS).unwrap();
    assert!(u > 0.9 * 10e9, "{u}");
}

#[test]
fn two_flows_share_a_bottleneck_fairly() {
    let t = sim(&two_racks(
        r#""brokers": {"shaper": false, "rack_broker": false, "fabric_broker": false},
        "workloads": [
            {"kind": "long_lived", "service": 1, "src": {"hosts": [0]}, "dst": {"hosts": [2]}},
            {"kind": "long_lived", "service": 2, "src": {"hosts": [1]}, "dst": {"hosts": [3]}}
        ]"#,
    ));
    let a = t.mean_util(Scope::Rack(0, Direction::Tx), Some(1), 50 * MS, 300 * MS).unwrap();
    let b = t.mean_util(Scope::Rack(0, Direction::Tx), Some(2), 50 * MS, 300 * MS).unwrap();
    let ratio = a / b;
    assert!((0.7..=1.43).contains(&ratio), "{a} vs {b}");
    assert!(a + b > 0.85 * 10e9);
}

#[test]
fn downed_uplink_carries_nothing_until_restored() {
    let t = sim(&two_racks(
        r#""horizon": "1s",
        "workloads": [{"kind": "long_lived", "service": 1, "src": {"hosts": [0]}, "dst": {"hosts": [2]}}],
        "events": [
            {"at": "100ms", "kind": "link_toggle", "link": "rack:0:up", "up": false},
            {"at": "200ms", "kind": "link_toggle", "link": "rack:0:up", "up": true}
        ]"#,
    ));
    let rx = |from, to| t.mean_util(Scope::Rack(1, Direction::Rx), Some(1), from * MS, to * MS).unwrap();
    assert_eq!(rx(110, 200), 0.0);
    assert!(rx(50, 100) > 5e9);
    // Recovery waits out the backed-off retransmission timer.
    assert!(rx(700, 1000) > 5e9, "{}", rx(700, 1000));
}

#[test]
fn next_lowest_host_takes_over_fabric_reports() {
    let t = sim(r#"{
        "horizon": "3s",
        "topology": {"racks": 2, "hosts_per_rack": 3, "nic_rate": "1G", "uplink": "1G", "spine_links": 1},
        "services": [{"id": 1}],
        "brokers": {"rack_interval": "50ms", "rack_timeout": "200ms", "fabric_interval": "100ms", "fabric_timeout": "500ms"},
        "fabric_caps": [{"service": 1, "cap": "300M"}],
        "workloads": [{"kind": "long_lived", "service": 1, "src": {"hosts": [1, 2]}, "dst": {"racks": [1]}}],
        "events": [{"at": "1s", "kind": "kill_rack_broker", "host": 0}],
        "outputs": {"util_bin": "100ms"}
    }"#);
    // Host 1 reports for rack 0 from then on, so the senders stay capped.
    assert!(!t.control.iter().any(|c| c.event == "fabric_expire"));
    let late: Vec<_> = t.fabric.iter().filter(|f| f.rack == 0 && f.time > 2 * NS_PER_SEC).collect();
    assert!(!late.is_empty() && late.iter().all(|f| f.limit == Limit::Finite(300 * MBPS)));
    let u = t.mean_util(Scope::Fabric, Some(1), 2 * NS_PER_SEC, 3 * NS_PER_SEC).unwrap();
    assert!(u < 1.1 * 300e6, "{u}");
}

#[test]
fn orphaned_shaper_falls_back_to_static() {
    let t = sim(r#"{
        "horizon": "1s",
        "topology": {"racks": 2, "hosts_per_rack": 2, "nic_rate": "1G", "uplink": "1G"},
        "services": [{"id": 1}],
        "brokers": {"rack_interval": "50ms", "rack_timeout": "200ms"},
        "workloads": [{"kind": "long_lived", "service": 1, "src": {"racks": [0]}, "dst": {"racks": [1]}}],
        "events": [{"at": "300ms", "kind": "kill_rack_broker", "host": 1}]
    }"#);
    let fb: Vec<_> = t.control.iter().filter(|c| c.event == "static_fallback").collect();
    assert_eq!(fb.len(), 1);
    assert_eq!(fb[0].detail, "host 1");
    // One timeout after the last output host 1 consumed before its broker died.
    assert!(fb[0].time > 400 * MS && fb[0].time <= 500 * MS, "{}", fb[0].time);
}

#[test]
fn seed_fixes_every_trace() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/mixed.json")).unwrap();
    let mut scn = Scenario::from_json(&text).unwrap();
    scn.horizon = NS_PER_SEC;
    let a = run(&scn).unwrap();
    let b = run(&scn).unwrap();
    assert_eq!(a.flows, b.flows);
    assert_eq!(a.alloc, b.alloc);
    assert_eq!(a.util, b.util);
    assert!(a.flows.len() > 10);
}

fn bundled(name: &str) -> Scenario {
    Scenario::load(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/").to_string() + name).unwrap()
}

#[test]
fn paced_senders_keep_the_receiver_queue_short() {
    let scn = bundled("receiver_queue.json");
    let t = run(&scn).unwrap();
    assert!(t.check(&scn.assertions).iter().all(|r| r.pass));
    let q = t.queues.iter().find(|q| q.link == "host:100:rx").unwrap();
    let load = q.tx_bytes as f64 * 8.0 / 20.0 / 100e6;
    assert!((0.85..=0.95).contains(&load), "{load}");
    assert_eq!(q.dropped, 0);
}

#[test]
fn every_bundled_scenario_parses() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("vm_dfs") {
            continue;
        }
        Scenario::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"));
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn receiver_meters_share_a_congested_core() {
    let mut scn = bundled("core_fairness.json");
    let t = run(&scn).unwrap();
    assert!(t.check(&scn.assertions).iter().all(|r| r.pass));
    // Without meters, drop-tail hands the uplink to one service.
    scn.brokers.shaper = false;
    let t = run(&scn).unwrap();
    assert!(t.check(&scn.assertions).iter().all(|r| !r.pass));
}
