//! A tenant spread over 100 racks under a fabric-wide cap that moves every 50s.
//! Prints fabric usage every 5s and how long each cap change took to settle.

use bwbroker_sim::trace::Scope;
use bwbroker_sim::{run, Scenario};

fn main() {
    let mut scn = Scenario::load(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/fabric_convergence.json")).unwrap();
    scn.outputs.util_bin = 5_000_000_000;
    let t = run(&scn).unwrap();
    for (i, u) in t.series(Scope::Fabric, Some(1)).iter().enumerate() {
        println!("{:>4}s {:>7.1} Mb/s", i * 5, u / 1e6);
    }
    for c in t.convergence() {
        println!("cap {} Mb/s at {}s: settled after {:?}s", c.cap_bits_per_s / 1_000_000, c.at_s, c.converged_after_s);
    }
}
