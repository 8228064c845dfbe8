//! Fluid model of one receiver's rate meter and its senders.
//!
//! Each interval every sender transmits at `min(demand, R)` where `R` is the
//! rate advertised at the end of the previous interval; the meter then sees the
//! summed bytes and takes one control step.

use bwbroker::machine_shaper::RateMeter;
use bwbroker::units::{Bps, Nanos, NS_PER_SEC};

#[derive(Debug, Clone)]
pub struct FluidMeter {
    pub meter: RateMeter,
    /// Per-sender demand in bits/s; `None` means backlogged.
    pub demands: Vec<Option<Bps>>,
}

impl FluidMeter {
    pub fn new(capacity: Bps, line_rate: Bps, senders: usize, interval: Nanos) -> Self {
        FluidMeter { meter: RateMeter::new(0, capacity, line_rate, interval), demands: vec![None; senders] }
    }

    /// Sender rates implied by the currently advertised rate.
    pub fn sender_rates(&self) -> Vec<f64> {
        let r = self.meter.rate_f64();
        self.demands.iter().map(|d| d.map_or(r, |d| r.min(d as f64))).collect()
    }

    /// Runs one interval and returns the rates senders used during it.
    pub fn step(&mut self) -> Vec<f64> {
        let rates = self.sender_rates();
        let bits: f64 = rates.iter().sum::<f64>() * self.meter.interval as f64 / NS_PER_SEC as f64;
        self.meter.add_bytes(bits / 8.0);
        self.meter.meter_update();
        rates
    }

    /// Sender rates after each of `n` control steps (the first row is before any step).
    pub fn run(&mut self, n: usize) -> Vec<Vec<f64>> {
        let mut out = vec![self.sender_rates()];
        for _ in 0..n {
            self.step();
            out.push(self.sender_rates());
        }
        out
    }
}

/// First step index from which every sender stays within `tol` (relative) of `target`.
pub fn settled_after(trace: &[Vec<f64>], target: f64, tol: f64) -> Option<usize> {
    let ok = |row: &Vec<f64>| row.iter().all(|r| (r - target).abs() <= tol * target);
    let last_bad = trace.iter().rposition(|row| !ok(row));
    match last_bad {
        None => Some(0),
        Some(i) if i + 1 < trace.len() => Some(i + 1),
        Some(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bwbroker::units::GBPS;

    #[test]
    fn light_senders_leave_room_for_the_rest() {
        let mut f = FluidMeter::new(10 * GBPS, 10 * GBPS, 3, 500_000);
        f.demands[0] = Some(GBPS);
        let t = f.run(60);
        let last = t.last().unwrap();
        assert!((last[0] - 1e9).abs() < 1.0);
        assert!((last[1] - 4.5e9).abs() < 4.5e9 * 1e-4, "{last:?}");
    }

    #[test]
    fn settle_index() {
        let t = vec![vec![5.0], vec![1.5], vec![1.0], vec![1.0]];
        assert_eq!(settled_after(&t, 1.0, 0.01), Some(2));
        assert_eq!(settled_after(&t[..2], 1.0, 0.01), None);
    }
}
