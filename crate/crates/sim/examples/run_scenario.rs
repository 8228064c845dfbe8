//! Runs a scenario file (default: the bundled mixed workload) and prints its assertions.
//!
//!     cargo run --release --example run_scenario -- crates/sim/scenarios/latency_protection.json

use bwbroker_sim::{run, Scenario};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/mixed.json").into());
    let scn = Scenario::load(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let t = run(&scn).expect("simulation");
    println!("{} flows, {} completed", t.flows.len(), t.flows.iter().filter(|f| f.finish.is_some()).count());
    for r in t.check(&scn.assertions) {
        let v = r.value.map_or("n/a".into(), |v| format!("{v:.4e}"));
        println!("{} {:<60} {v}", if r.pass { "ok  " } else { "FAIL" }, r.label);
    }
}
