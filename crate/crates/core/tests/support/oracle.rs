// Brute-force reference for hierarchical weighted max-min allocation.
//
// Shares are handed out in small increments to whichever unsaturated children sit
// lowest on the weighted water line. Nothing here shares code with the allocator.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bwbroker::policy::{PolicyNode, PolicyTree};
use bwbroker::units::{Limit, GBPS, MBPS};
use rand::Rng;

/// Increment handed out per filling step, in bits/s.
pub const EPS: f64 = 0.1e6;

fn cap_of(l: Limit) -> f64 {
    match l {
        Limit::Finite(v) => v as f64,
        Limit::Unlimited => f64::INFINITY,
    }
}

/// Progressive filling of `budget` over children given as (cap, floor, weight).
pub fn progressive_fill(budget: f64, kids: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut a: Vec<f64> = kids.iter().map(|k| k.1).collect();
    let mut remaining = budget - a.iter().sum::<f64>();
    let mut steps = 0u64;
    loop {
        steps += 1;
        assert!(steps < 50_000_000, "filling stalled: budget {budget} kids {kids:?} a {a:?}");
        // One bit of slack: below that the level no longer moves in f64.
        if remaining <= 1.0 {
            break;
        }
        let active: Vec<usize> = (0..kids.len()).filter(|&i| a[i] < kids[i].0 - 1e-6).collect();
        if active.is_empty() {
            break;
        }
        let level = active.iter().map(|&i| a[i] / kids[i].2).fold(f64::INFINITY, f64::min);
        let tol = level * 1e-12 + 1e-9;
        let rising: Vec<usize> = active.iter().copied().filter(|&i| a[i] / kids[i].2 <= level + tol).collect();
        let wsum: f64 = rising.iter().map(|&i| kids[i].2).sum();
        let step = EPS.min(remaining);
        let next = level + step / wsum;
        let mut given = 0.0;
        for &i in &rising {
            let v = (kids[i].2 * next).min(kids[i].0).max(a[i]);
            given += v - a[i];
            a[i] = v;
        }
        remaining -= given;
        if given <= 0.0 {
            break;
        }
    }
    a
}

/// Reference allocation for every node of `tree`, in bits/s.
pub fn oracle_allocate(tree: &PolicyTree, leaf_demands: &BTreeMap<u32, u64>) -> BTreeMap<u32, f64> {
    let by_id: BTreeMap<u32, &PolicyNode> = tree.nodes.iter().map(|n| (n.id, n)).collect();
    let mut kids: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut root = None;
    for n in &tree.nodes {
        match n.parent {
            Some(p) => kids.entry(p).or_default().push(n.id),
            None => root = Some(n.id),
        }
    }
    let root = root.expect("tree has a root");

    fn demand_of(
        id: u32,
        by_id: &BTreeMap<u32, &PolicyNode>,
        kids: &BTreeMap<u32, Vec<u32>>,
        leaf: &BTreeMap<u32, u64>,
        capacity: f64,
        out: &mut BTreeMap<u32, f64>,
    ) -> f64 {
        let node = by_id[&id];
        let d = match kids.get(&id) {
            None => (leaf[&id] as f64).min(capacity),
            Some(cs) => cs.iter().map(|&c| demand_of(c, by_id, kids, leaf, capacity, out)).sum(),
        };
        let d = d.min(cap_of(node.max_bw));
        out.insert(id, d);
        d
    }
    let mut demand = BTreeMap::new();
    demand_of(root, &by_id, &kids, leaf_demands, tree.capacity as f64, &mut demand);

    let mut alloc = BTreeMap::new();
    let top = demand[&root].min(tree.capacity as f64).min(cap_of(by_id[&root].max_bw));
    alloc.insert(root, top);
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        let Some(cs) = kids.get(&id) else { continue };
        let spec: Vec<(f64, f64, f64)> = cs
            .iter()
            .map(|c| {
                let n = by_id[c];
                let cap = demand[c];
                (cap, (n.min_bw as f64).min(cap), n.weight)
            })
            .collect();
        let shares = progressive_fill(alloc[&id], &spec);
        for (c, s) in cs.iter().zip(shares) {
            alloc.insert(*c, s);
            stack.push(*c);
        }
    }
    alloc
}

/// A random admissible tree with at most `max_leaves` leaves and demands for each leaf.
pub fn random_instance<R: Rng>(rng: &mut R, max_leaves: usize) -> (PolicyTree, BTreeMap<u32, u64>) {
    loop {
        let (t, d) = try_instance(rng, max_leaves);
        if d.len() <= max_leaves {
            return (t, d);
        }
    }
}

fn try_instance<R: Rng>(rng: &mut R, max_leaves: usize) -> (PolicyTree, BTreeMap<u32, u64>) {
    use bwbroker::policy::{ContentionPoint, Direction};
    let capacity = rng.gen_range(1..=10) * GBPS;
    let mut tree = PolicyTree::new(ContentionPoint::RackUp, Direction::Tx, capacity);
    let root_max = if rng.gen_bool(0.2) { Limit::Finite(rng.gen_range(capacity / 2..=capacity)) } else { Limit::Unlimited };
    let mut root = PolicyNode::new(0, None);
    root.max_bw = root_max;
    tree.nodes.push(root);

    let leaves_target = rng.gen_range(1..=max_leaves);
    // (id, depth, guarantee budget for children)
    let mut frontier = vec![(0u32, 0u32, root_max.cap(capacity))];
    let mut next_id = 1u32;
    let mut leaves = 0;
    let mut internal: Vec<(u32, u32, u64)> = Vec::new();
    while leaves < leaves_target {
        let (parent, depth, budget) = if frontier.is_empty() {
            internal[rng.gen_range(0..internal.len())]
        } else {
            frontier.remove(0)
        };
        internal.push((parent, depth, 0));
        let n_kids = rng.gen_range(1..=3).min(leaves_target - leaves).max(1);
        let mut left = budget;
        for _ in 0..n_kids {
            let id = next_id;
            next_id += 1;
            let min = if left > 0 && rng.gen_bool(0.4) { rng.gen_range(0..=left / 2) } else { 0 };
            left -= min;
            let mut node = PolicyNode::new(id, Some(parent)).min(min);
            if rng.gen_bool(0.35) {
                node.max_bw = Limit::Finite(min + rng.gen_range(0..=capacity));
            }
            node.weight = [0.5, 1.0, 1.0, 2.0, 3.0, 4.0][rng.gen_range(0..6)];
            tree.nodes.push(node);
            if depth < 2 && rng.gen_bool(0.3) {
                frontier.push((id, depth + 1, min));
            } else {
                leaves += 1;
            }
        }
    }
    // Internal nodes queued but never expanded become leaves; their guarantees stand.
    let leaf_ids = tree.leaf_ids();
    let demands = leaf_ids
        .iter()
        .map(|&id| {
            let d = match rng.gen_range(0..5) {
                0 => 0,
                1 => u64::MAX / 4,
                _ => rng.gen_range(0..=capacity) / MBPS * MBPS + rng.gen_range(0..MBPS),
            };
            (id, d)
        })
        .collect();
    (tree, demands)
}
