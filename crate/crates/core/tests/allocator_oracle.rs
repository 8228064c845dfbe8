mod support;


use bwbroker::allocator::{aggregate_demands, compute_runtime_policy, distribute, water_fill, DemandVector};
use bwbroker::policy::{validate_tree, ContentionPoint, Direction, PolicyNode, PolicyTree};
use bwbroker::units::{Limit, GBPS, MBPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracle::{oracle_allocate, progressive_fill, random_instance};

const INF: u64 = u64::MAX / 4;

// VM (max 1G) and DFS (min 6G, max 8G) sharing a 10G rack downlink; one leaf of each per machine.
fn vm_dfs() -> PolicyTree {
    PolicyTree::new(ContentionPoint::RackDown, Direction::Rx, 10 * GBPS)
        .with(PolicyNode::new(0, None))
        .with(PolicyNode::new(1, Some(0)).max(GBPS))
        .with(PolicyNode::new(2, Some(0)).min(6 * GBPS).max(8 * GBPS))
        .with(PolicyNode::new(11, Some(1)).endpoint(1, 1))
        .with(PolicyNode::new(12, Some(1)).endpoint(2, 1))
        .with(PolicyNode::new(21, Some(2)).endpoint(1, 2))
        .with(PolicyNode::new(22, Some(2)).endpoint(2, 2))
}

#[test]
fn vm_dfs_all_active() {
    let t = vm_dfs();
    let d: DemandVector = [(11, INF), (12, INF), (21, INF), (22, INF)].into();
    let rp = compute_runtime_policy(&t, &d).unwrap();
    let got: Vec<_> = [11, 12, 21, 22].iter().map(|id| rp.leaves[id].allocation).collect();
    assert_eq!(got, vec![500 * MBPS, 500 * MBPS, 4 * GBPS, 4 * GBPS]);
    assert!(rp.leaves.values().all(|l| l.limited));
}

#[test]
fn vm_dfs_one_dfs_idle() {
    let t = vm_dfs();
    let d: DemandVector = [(11, INF), (12, INF), (21, INF), (22, 0)].into();
    let rp = compute_runtime_policy(&t, &d).unwrap();
    assert_eq!(rp.leaves[&21].allocation, 8 * GBPS);
    assert_eq!(rp.leaves[&22].allocation, 0);
    assert!(!rp.leaves[&22].limited);
}

#[test]
fn flat_example() {
    let out = water_fill(&[2 * GBPS, 4 * GBPS, 10 * GBPS], &[1.0; 3], &[0; 3], &[Limit::Unlimited; 3], 10 * GBPS).unwrap();
    let want = progressive_fill(10e9, &[(2e9, 0.0, 1.0), (4e9, 0.0, 1.0), (10e9, 0.0, 1.0)]);
    for (g, w) in out.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e6, "{out:?} vs {want:?}");
    }
    assert_eq!(out, vec![2 * GBPS, 4 * GBPS, 4 * GBPS]);
}

#[test]
fn random_hierarchies_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..300 {
        let (tree, demands) = random_instance(&mut rng, 6);
        validate_tree(&tree).expect("generator emits admissible trees");
        let agg = aggregate_demands(&tree, &demands).unwrap();
        let got = distribute(&tree, &agg).unwrap();
        let want = oracle_allocate(&tree, &demands);
        for (id, w) in &want {
            let g = got.rate(*id) as f64;
            assert!((g - w).abs() <= 1e6, "case {case} node {id}: {g} vs oracle {w}\n{tree:?}\n{demands:?}");
        }
    }
}

fn flat_case() -> impl Strategy<Value = (Vec<u64>, Vec<f64>, Vec<u64>, Vec<Limit>, u64)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![Just(0u64), 0u64..20_000, Just(INF)], n),
            prop::collection::vec(prop_oneof![Just(1.0f64), 0.5f64..4.0], n),
            prop::collection::vec(0u64..3_000, n),
            prop::collection::vec(prop::option::of(0u64..20_000), n),
            10_000u64..40_000,
        )
            .prop_map(|(d, w, m, x, cap)| {
                // Scale to Mb/s and keep guarantees admissible.
                let d: Vec<u64> = d.into_iter().map(|v| if v == INF { v } else { v * MBPS }).collect();
                let cap = cap * MBPS;
                let mut m: Vec<u64> = m.into_iter().map(|v| v * MBPS).collect();
                let total: u64 = m.iter().sum();
                if total > cap {
                    m.iter_mut().for_each(|v| *v = *v * (cap / MBPS) / (total / MBPS) / 2);
                }
                let x: Vec<Limit> = x
                    .into_iter()
                    .zip(&m)
                    .map(|(x, &mn)| x.map(|v| Limit::Finite(v * MBPS + mn)).unwrap_or(Limit::Unlimited))
                    .collect();
                (d, w, m, x, cap)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn flat_matches_progressive_filling((d, w, m, x, cap) in flat_case()) {
        let got = water_fill(&d, &w, &m, &x, cap).unwrap();
        let kids: Vec<(f64, f64, f64)> = (0..d.len())
            .map(|i| {
                let c = x[i].cap(d[i]) as f64;
                (c, (m[i] as f64).min(c), w[i])
            })
            .collect();
        let want = progressive_fill(cap as f64, &kids);
        for i in 0..d.len() {
            prop_assert!((got[i] as f64 - want[i]).abs() <= 1e6, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn conservation_guarantee_fairness((d, w, m, x, cap) in flat_case()) {
        let got = water_fill(&d, &w, &m, &x, cap).unwrap();
        let capped: Vec<u64> = (0..d.len()).map(|i| x[i].cap(d[i])).collect();
        let total: u128 = got.iter().map(|&v| v as u128).sum();
        let want_total = (cap as u128).min(capped.iter().map(|&v| v as u128).sum());
        prop_assert!(total <= want_total);
        prop_assert!(want_total - total <= d.len() as u128, "lost {} bits", want_total - total);
        for i in 0..d.len() {
            prop_assert!(got[i] <= capped[i]);
            prop_assert!(got[i] >= m[i].min(capped[i]));
        }
        // Unsatisfied services above their floors share one water level.
        let rising: Vec<usize> = (0..d.len()).filter(|&i| got[i] < capped[i] && got[i] > m[i]).collect();
        for &i in &rising {
            for &j in &rising {
                let lhs = got[i] as f64 / w[i];
                let rhs = got[j] as f64 / w[j];
                prop_assert!((lhs - rhs).abs() * w[i].max(w[j]) <= 1e6, "{i} {j}: {got:?}");
            }
        }
    }

    #[test]
    fn order_invariance((d, w, m, x, cap) in flat_case(), seed in any::<u64>()) {
        let got = water_fill(&d, &w, &m, &x, cap).unwrap();
        let mut perm: Vec<usize> = (0..d.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pd: Vec<_> = perm.iter().map(|&i| d[i]).collect();
        let pw: Vec<_> = perm.iter().map(|&i| w[i]).collect();
        let pm: Vec<_> = perm.iter().map(|&i| m[i]).collect();
        let px: Vec<_> = perm.iter().map(|&i| x[i]).collect();
        let pgot = water_fill(&pd, &pw, &pm, &px, cap).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(pgot[k], got[i]);
        }
    }

    #[test]
    fn idempotent_on_own_output((d, w, m, x, cap) in flat_case()) {
        let got = water_fill(&d, &w, &m, &x, cap).unwrap();
        let again = water_fill(&got, &w, &m, &x, cap).unwrap();
        prop_assert_eq!(again, got);
    }
}

#[test]
fn runtime_policy_respects_static_caps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let (tree, demands) = random_instance(&mut rng, 6);
        let rp = compute_runtime_policy(&tree, &demands).unwrap();
        for (id, leaf) in &rp.leaves {
            let cap = bwbroker::policy::effective_cap(&tree, *id).unwrap();
            assert!(leaf.capacity <= cap && leaf.allocation <= cap);
            let node = tree.node(*id).unwrap();
            assert!(leaf.allocation >= node.min_bw.min(leaf.demand));
        }
        let total: u64 = rp.leaves.values().map(|l| l.allocation).sum();
        assert!(total <= tree.capacity);
    }
}
