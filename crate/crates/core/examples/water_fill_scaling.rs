//! Wall-clock cost of one flat water-fill as the number of services grows.

use std::time::Instant;

use bwbroker::allocator::water_fill;
use bwbroker::units::{Bps, Limit, GBPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [1_000usize, 10_000, 100_000] {
        let demands: Vec<Bps> = (0..n).map(|_| rng.gen_range(0..10 * GBPS)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let mins = vec![0; n];
        let maxes = vec![Limit::Unlimited; n];
        let capacity = n as Bps * GBPS;
        let reps = 20;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(water_fill(&demands, &weights, &mins, &maxes, capacity).unwrap());
        }
        let per = t.elapsed() / reps;
        println!("N={n:>7}  {:>8.3} ms  {:>6.1} ns/service", per.as_secs_f64() * 1e3, per.as_nanos() as f64 / n as f64);
    }
}
