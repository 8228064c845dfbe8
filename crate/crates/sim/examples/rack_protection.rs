//! Two services leaving one rack: A capped at 30G, B guaranteed 30G, rack class at 60G.
//! A stops at 12s and B takes over its share.

use bwbroker::policy::Direction;
use bwbroker_sim::trace::Scope;
use bwbroker_sim::{run, Scenario};

fn main() {
    let mut scn = Scenario::load(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/rack_protection.json")).unwrap();
    scn.outputs.util_bin = 1_000_000_000;
    let t = run(&scn).unwrap();
    let a = t.series(Scope::Rack(0, Direction::Tx), Some(1));
    let b = t.series(Scope::Rack(0, Direction::Tx), Some(2));
    println!("  s      A      B  (Gb/s)");
    for (i, (a, b)) in a.iter().zip(&b).enumerate() {
        println!("{i:>3} {:>6.1} {:>6.1}", a / 1e9, b / 1e9);
    }
}
