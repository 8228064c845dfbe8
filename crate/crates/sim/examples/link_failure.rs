//! A scenario written inline: one flow across the spine while its rack uplink
//! goes down for 100ms.

use bwbroker::policy::Direction;
use bwbroker_sim::trace::Scope;
use bwbroker_sim::{run, Scenario};

const SCENARIO: &str = r#"{
    "horizon": "1s",
    "topology": {"racks": 2, "hosts_per_rack": 2, "nic_rate": "10G", "uplink": "10G", "spine_links": 1},
    "services": [{"id": 1}],
    "workloads": [{"kind": "long_lived", "service": 1, "src": {"hosts": [0]}, "dst": {"hosts": [2]}}],
    "events": [
        {"at": "100ms", "kind": "link_toggle", "link": "rack:0:up", "up": false},
        {"at": "200ms", "kind": "link_toggle", "link": "rack:0:up", "up": true}
    ],
    "outputs": {"util_bin": "50ms"}
}"#;

fn main() {
    let t = run(&Scenario::from_json(SCENARIO).unwrap()).unwrap();
    for (i, u) in t.series(Scope::Rack(1, Direction::Rx), Some(1)).iter().enumerate() {
        println!("{:>4}ms {:>6.2} Gb/s", i * 50, u / 1e9);
    }
    for c in &t.control {
        println!("{:>10}ns {} {}", c.time, c.event, c.detail);
    }
}
