//! Worst-case completion times for a latency-sensitive service sharing a 10G link,
//! next to the M/M/1 tail the same load would give.

use bwbroker::latency::{fct_bound, mm1_fct_quantile, sigma_from_convergence, ArrivalEnvelope, Mm1Model};
use bwbroker::units::GBPS;

fn main() {
    // 15 control intervals of 500us at line rate dominate the 64kB limiter burst.
    let sigma = sigma_from_convergence(10 * GBPS, 15, 500e-6, 64_000.0 * 8.0);
    println!("sigma = {:.2} MB", sigma / 8e6);
    for z in [200_000.0, 1_000_000.0] {
        let row: Vec<String> = [0.15, 0.5, 0.7, 0.8]
            .iter()
            .map(|&rho| {
                let env = ArrivalEnvelope::new(sigma, rho, 10 * GBPS).unwrap();
                format!("rho {rho}: {:6.2}ms", fct_bound(&env, z * 8.0).unwrap() * 1e3)
            })
            .collect();
        println!("{:>7}B  {}", z, row.join("  "));
    }
    let p99 = mm1_fct_quantile(&Mm1Model { mu: 1250.0, rho: 0.8 }, 0.99).unwrap();
    println!("M/M/1 p99 at rho 0.8: {:.2}ms", p99 * 1e3);
}
