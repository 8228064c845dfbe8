use std::collections::BTreeMap;

use bwbroker::latency::{check_envelope, fct_bound, fit_sigma, mm1_fct_quantile, ArrivalEnvelope, EnvelopeCheck, Mm1Model};
use bwbroker::machine_shaper::{ewha_update, TokenBucket, Verdict};
use bwbroker::policy::{ContentionPoint, Direction, PolicyNode, PolicyTree};
use bwbroker::rack_broker::{encode_report, RackBroker, RackBrokerConfig, UsageEntry, UsageReport};
use bwbroker::units::{Bps, GBPS, MBPS, NS_PER_SEC};
use proptest::prelude::*;

// Greedy sender through one bucket; returns (send time ns, bytes).
fn greedy(rate: Bps, burst: u64, sizes: &[u64]) -> Vec<(u64, u64)> {
    let mut b = TokenBucket::new(rate, burst, 0);
    let mut now = 0;
    let mut out = Vec::new();
    for &s in sizes {
        loop {
            match b.try_send(s, now).unwrap() {
                Verdict::Allowed => break,
                Verdict::DelayUntil(t) => now = t,
            }
        }
        out.push((now, s));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn limiter_never_beats_rate_plus_burst(
        rate_m in 1u64..10_000,
        burst_kb in 9u64..256,
        sizes in prop::collection::vec(64u64..9_000, 1..300),
    ) {
        let rate = rate_m * MBPS;
        let sent = greedy(rate, burst_kb * 1000, &sizes);
        for i in 0..sent.len() {
            let mut bytes = 0u64;
            for j in i..sent.len() {
                bytes += sent[j].1;
                let window = (sent[j].0 - sent[i].0) as f64 / NS_PER_SEC as f64;
                let allowed = rate as f64 * window / 8.0 + (burst_kb * 1000) as f64;
                prop_assert!(bytes as f64 <= allowed + 1.0, "{bytes} > {allowed} over [{i}, {j}]");
            }
        }
    }

    #[test]
    fn ewha_is_homogeneous(r in 1e3f64..1e11, ri in 1e3f64..1e11, k in 1e-3f64..1e3) {
        let a = ewha_update(r, ri, 0.125).unwrap();
        let b = ewha_update(k * r, k * ri, 0.125).unwrap();
        prop_assert!((b - k * a).abs() <= 1e-9 * b.abs());
    }

    #[test]
    fn bound_is_monotone(
        sigma in 0.0f64..1e9, z in 0.0f64..1e8, rho in 0.01f64..0.9, c in 1u64..100,
        dsigma in 1.0f64..1e6, dz in 1.0f64..1e6, drho in 0.001f64..0.09,
    ) {
        let cap = c * GBPS;
        let base = fct_bound(&ArrivalEnvelope::new(sigma, rho, cap).unwrap(), z).unwrap();
        prop_assert!(fct_bound(&ArrivalEnvelope::new(sigma + dsigma, rho, cap).unwrap(), z).unwrap() > base);
        prop_assert!(fct_bound(&ArrivalEnvelope::new(sigma, rho, cap).unwrap(), z + dz).unwrap() > base);
        prop_assert!(fct_bound(&ArrivalEnvelope::new(sigma, rho + drho, cap).unwrap(), z).unwrap() > base);
        prop_assert!(fct_bound(&ArrivalEnvelope::new(sigma, rho, cap + GBPS).unwrap(), z).unwrap() < base);
    }

    #[test]
    fn fitted_sigma_is_tight(gaps in prop::collection::vec(0.0f64..2e-6, 2..400)) {
        // 1500B packets into 10G at rho 0.9: anything faster than 1.33us spacing builds backlog.
        let mut t = 0.0;
        let trace: Vec<(f64, f64)> = gaps.iter().map(|g| { t += g; (t, 12_000.0) }).collect();
        let cap = 10 * GBPS;
        let Ok(sigma) = fit_sigma(&trace, 0.9, cap) else { return Ok(()) };
        prop_assert_eq!(check_envelope(&trace, &ArrivalEnvelope::new(sigma, 0.9, cap).unwrap()).unwrap(), EnvelopeCheck::Satisfied);
        if sigma >= 12_000.0 {
            let tighter = ArrivalEnvelope::new(sigma - 12_000.0, 0.9, cap).unwrap();
            prop_assert!(matches!(check_envelope(&trace, &tighter).unwrap(), EnvelopeCheck::ViolatedAt(..)));
        }
    }

    #[test]
    fn mm1_quantile_inverts_cdf(mu in 1.0f64..1e5, rho in 0.0f64..0.99, p in 0.0f64..0.999_999) {
        let m = Mm1Model { mu, rho };
        let t = mm1_fct_quantile(&m, p).unwrap();
        prop_assert!((m.cdf(t) - p).abs() < 1e-12);
    }

    #[test]
    fn every_replica_computes_the_same_allocation(
        usage in prop::collection::vec(prop::collection::vec(0.0f32..5e9, 3), 4),
        order in Just((1..=4u32).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let reports: Vec<UsageReport> = (1..=4u32)
            .map(|m| UsageReport {
                sender: m,
                timestamp_us: 10,
                entries: (0..3).map(|s| UsageEntry { service: m * 10 + s, utilization: usage[m as usize - 1][s as usize] }).collect(),
            })
            .collect();
        let mut outputs = Vec::new();
        for me in 1..=4u32 {
            let mut b = RackBroker::new(me, 1..=4, rack_tree(), rx_tree(), RackBrokerConfig::default()).unwrap();
            for &m in &order {
                b.on_report(reports[m as usize - 1].clone(), 0).unwrap();
            }
            b.tick(NS_PER_SEC).unwrap();
            outputs.push(b.uplink_policy());
        }
        prop_assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    }
}

// Three classes with a max, a min and a weight; one leaf per (machine, class).
fn rack_tree() -> PolicyTree {
    let mut t = PolicyTree::new(ContentionPoint::RackUp, Direction::Tx, 10 * GBPS)
        .with(PolicyNode::new(0, None))
        .with(PolicyNode::new(1, Some(0)).max(3 * GBPS))
        .with(PolicyNode::new(2, Some(0)).min(4 * GBPS))
        .with(PolicyNode::new(3, Some(0)).weight(2.0));
    for m in 1..=4u32 {
        for s in 0..3 {
            t = t.with(PolicyNode::new(m * 10 + s, Some(s + 1)).endpoint(m, s + 1));
        }
    }
    t
}

fn rx_tree() -> PolicyTree {
    PolicyTree::new(ContentionPoint::RackDown, Direction::Rx, 10 * GBPS).with(PolicyNode::new(1000, None))
}

#[test]
fn report_traffic_stays_under_3mbps() {
    // 40 machines, 1000 services, one report per second to each of 39 peers.
    let entries: Vec<UsageEntry> = (0..1000).map(|s| UsageEntry { service: s, utilization: 1e9 }).collect();
    let r = UsageReport { sender: 0, timestamp_us: 0, entries };
    let bytes = encode_report(&r).unwrap().len();
    let bps = (bytes * 8 * 39) as f64;
    assert!(bps < 3e6, "{bps}");
}

#[test]
fn idle_tree_yields_no_limits() {
    let mut b = RackBroker::new(1, 1..=4, rack_tree(), rx_tree(), RackBrokerConfig::default()).unwrap();
    let installs = b.tick(NS_PER_SEC).unwrap();
    assert!(installs.iter().all(|i| !i.limited));
    let caps: BTreeMap<_, _> = installs.iter().filter(|i| i.direction == Direction::Tx).map(|i| (i.leaf, i.capacity)).collect();
    assert_eq!(caps[&10], 3 * GBPS);
    assert_eq!(caps[&11], 10 * GBPS);
}
