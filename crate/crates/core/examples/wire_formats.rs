//! Round-trips the broker wire records and prints their sizes.

use bwbroker::fabric_broker::{decode_limits, encode_limits, report_load, LimitPush};
use bwbroker::machine_shaper::FeedbackPacket;
use bwbroker::rack_broker::{decode_report, encode_report, UsageEntry, UsageReport};
use bwbroker::units::{Limit, MBPS, NS_PER_SEC};

fn main() {
    let report = UsageReport {
        sender: 3,
        timestamp_us: 1_000_000,
        entries: (0..1000).map(|s| UsageEntry { service: s, utilization: 2.5e8 }).collect(),
    };
    let bytes = encode_report(&report).unwrap();
    assert_eq!(decode_report(&bytes).unwrap(), report);
    println!("usage report, 1000 services: {} bytes", bytes.len());

    let push = LimitPush { rack: 7, timestamp_us: 0, limits: [(1, Limit::Finite(20 * MBPS)), (2, Limit::Unlimited)].into() };
    let b = encode_limits(&push).unwrap();
    assert_eq!(decode_limits(&b).unwrap(), push);
    println!("fabric limit push, 2 services: {} bytes", b.len());

    let fb = FeedbackPacket { src: 4, meter_service: 1, advertised: 3_000_000_000 };
    assert_eq!(FeedbackPacket::decode(&fb.encode()), Some(fb));
    println!("feedback packet: {} bytes", fb.encode().len());

    let load = report_load(10_000, 10_000, 10 * NS_PER_SEC);
    println!("10000 racks x 10kB every 10s at the fabric broker: {:.0} Mb/s", load / 1e6);
}
