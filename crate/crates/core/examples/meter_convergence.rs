//! K backlogged senders into one receiver meter: how many control intervals
//! until each sender is within 0.01% of its fair share.

use bwbroker::machine_shaper::RateMeter;
use bwbroker::units::GBPS;

fn main() {
    let interval = 500_000;
    for k in [2usize, 10, 100] {
        let mut m = RateMeter::new(1, 10 * GBPS, 10 * GBPS, interval);
        let fair = 10e9 / k as f64;
        let mut settled = None;
        for step in 0..200 {
            let r = m.rate_f64();
            if (r - fair).abs() <= 1e-4 * fair {
                settled.get_or_insert(step);
            } else {
                settled = None;
            }
            m.add_bytes(r * k as f64 * interval as f64 / 1e9 / 8.0);
            m.meter_update();
        }
        println!("K={k:>3}: settled after {:?} intervals, R = {:.4} Gb/s", settled, m.rate_f64() / 1e9);
    }
}
