//! One service capped at 20Mb/s across four racks with uneven demand.

use bwbroker::fabric_broker::{FabricBroker, FabricBrokerConfig};
use bwbroker::rack_broker::{UsageEntry, UsageReport};
use bwbroker::units::{format_rate, Limit, MBPS};

fn main() {
    let mut fb = FabricBroker::new((0..4).map(|r| (r, 100 * MBPS)).collect(), FabricBrokerConfig::default());
    fb.set_cap(1, Some(20 * MBPS));
    for (rack, usage) in [(0, 2e6), (1, 9e6), (2, 30e6), (3, 0.0)] {
        let r = UsageReport { sender: rack, timestamp_us: 0, entries: vec![UsageEntry { service: 1, utilization: usage }] };
        fb.on_rack_report(r, 0).unwrap();
    }
    for ((rack, svc), limit) in fb.fabric_tick(0) {
        let shown = match limit {
            Limit::Finite(x) => format_rate(x),
            Limit::Unlimited => "no limit".into(),
        };
        println!("rack {rack} service {svc}: {shown}");
    }
}
