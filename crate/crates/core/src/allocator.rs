//! Hierarchical weighted max-min allocation by water-filling.
//!
//! Every service ends up at `clamp(w·λ, floor, cap)` for one water level λ per
//! parent, where `cap = min(demand, max)` and `floor = min(min, cap)`.

use std::collections::BTreeMap;

use crate::policy::{effective_caps, validate_tree, PolicyTree, ServiceId, Violation};
use crate::units::{Bps, Limit};

pub type DemandVector = BTreeMap<ServiceId, Bps>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AllocError {
    #[error("input lists differ in length")]
    LengthMismatch,
    #[error("no services to allocate")]
    Empty,
    #[error("guarantees {sum} exceed capacity {capacity}")]
    InfeasibleMins { sum: u128, capacity: Bps },
    #[error("service {0}: min exceeds max")]
    MinExceedsMax(usize),
    #[error("service {0}: weight must be positive and finite")]
    InvalidWeight(usize),
    #[error("no demand for leaf {0}")]
    MissingLeafDemand(ServiceId),
    #[error("aggregated demands do not match the tree")]
    InconsistentTree,
    #[error("invalid policy: {0:?}")]
    Policy(Vec<Violation>),
}

#[derive(Clone, Copy)]
struct Bp {
    key: u64,
    idx: u32,
    rising: bool,
}

fn key(x: f64) -> u64 {
    // Non-negative finite floats order the same as their bit patterns.
    x.to_bits()
}

/// Weighted max-min water-fill of `capacity` over services.
///
/// Services whose capped demand fits under the water level are satisfied exactly;
/// the rest share the level in proportion to weight, never dropping below their min.
/// Runs in O(N log N) by sweeping the sorted level breakpoints.
pub fn water_fill(
    demands: &[Bps],
    weights: &[f64],
    mins: &[Bps],
    maxes: &[Limit],
    capacity: Bps,
) -> Result<Vec<Bps>, AllocError> {
    let n = demands.len();
    if weights.len() != n || mins.len() != n || maxes.len() != n {
        return Err(AllocError::LengthMismatch);
    }
    if n == 0 {
        return Err(AllocError::Empty);
    }
    let mut caps = Vec::with_capacity(n);
    let mut floors = Vec::with_capacity(n);
    let mut sum_min: u128 = 0;
    let mut sum_cap: u128 = 0;
    let mut sum_floor: u128 = 0;
    for i in 0..n {
        if !(weights[i] > 0.0 && weights[i].is_finite()) {
            return Err(AllocError::InvalidWeight(i));
        }
        if !maxes[i].allows(mins[i]) {
            return Err(AllocError::MinExceedsMax(i));
        }
        let cap = maxes[i].cap(demands[i]);
        let floor = mins[i].min(cap);
        sum_min += mins[i] as u128;
        sum_cap += cap as u128;
        sum_floor += floor as u128;
        caps.push(cap);
        floors.push(floor);
    }
    if sum_min > capacity as u128 {
        return Err(AllocError::InfeasibleMins { sum: sum_min, capacity });
    }
    if sum_cap <= capacity as u128 {
        return Ok(caps);
    }

    let mut bps = Vec::with_capacity(n + n / 8);
    let mut konst = sum_floor as i128;
    let mut slope = 0.0f64;
    let mut hi = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    for i in 0..n {
        let (c, f, w) = (caps[i], floors[i], weights[i]);
        let h = c as f64 / w;
        let l = f as f64 / w;
        hi.push(h);
        lo.push(l);
        if c == f {
            continue;
        }
        if f == 0 {
            slope += w;
        } else {
            bps.push(Bp { key: key(l), idx: i as u32, rising: true });
        }
        bps.push(Bp { key: key(h), idx: i as u32, rising: false });
    }
    bps.sort_unstable_by_key(|b| (b.key, b.rising));

    let target = capacity as i128;
    let mut level = f64::NAN;
    for b in &bps {
        let x = f64::from_bits(b.key);
        let s = konst as f64 + slope * x;
        if s >= target as f64 {
            level = if slope > 0.0 { (target - konst) as f64 / slope } else { x };
            break;
        }
        let i = b.idx as usize;
        if b.rising {
            konst -= floors[i] as i128;
            slope += weights[i];
        } else {
            konst += caps[i] as i128;
            slope -= weights[i];
        }
    }
    if level.is_nan() {
        // Only reachable through rounding at the very last breakpoint.
        level = bps.last().map(|b| f64::from_bits(b.key)).unwrap_or(0.0);
    }
    let level = level.max(0.0);

    let mut out = vec![0; n];
    let mut middle = Vec::new();
    let mut fixed: u128 = 0;
    for i in 0..n {
        if caps[i] == floors[i] || lo[i] >= level {
            out[i] = floors[i];
        } else if hi[i] <= level {
            out[i] = caps[i];
        } else {
            middle.push(i);
            continue;
        }
        fixed += out[i] as u128;
    }
    let mut l = level;
    let mut shave = f64::EPSILON;
    loop {
        let mut total = fixed;
        for &i in &middle {
            let v = ((weights[i] * l).floor() as Bps).clamp(floors[i], caps[i]);
            out[i] = v;
            total += v as u128;
        }
        if total <= capacity as u128 || middle.is_empty() {
            break;
        }
        l = level * (1.0 - shave);
        shave *= 4.0;
    }
    Ok(out)
}

/// Bottom-up pass: each internal node demands the sum of its children, capped by its max.
/// Leaf demands are clamped to the leaf's max and the tree capacity.
pub fn aggregate_demands(tree: &PolicyTree, leaf_demands: &DemandVector) -> Result<DemandVector, AllocError> {
    let shape = validate_tree(tree).map_err(AllocError::Policy)?;
    let mut agg = vec![0u64; tree.nodes.len()];
    for &i in &shape.postorder {
        let node = &tree.nodes[i];
        let raw: u128 = if shape.is_leaf(i) {
            *leaf_demands.get(&node.id).ok_or(AllocError::MissingLeafDemand(node.id))? as u128
        } else {
            shape.children[i].iter().map(|&c| agg[c] as u128).sum()
        };
        let raw = raw.min(u64::MAX as u128) as u64;
        agg[i] = node.max_bw.cap(raw);
        if shape.is_leaf(i) {
            agg[i] = agg[i].min(tree.capacity);
        }
    }
    Ok(tree.nodes.iter().zip(agg).map(|(n, d)| (n.id, d)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeAllocation {
    pub demand: Bps,
    pub rate: Bps,
    /// The node received less than it asked for.
    pub limited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Allocation {
    pub nodes: BTreeMap<ServiceId, NodeAllocation>,
}

impl Allocation {
    pub fn rate(&self, id: ServiceId) -> Bps {
        self.nodes.get(&id).map(|a| a.rate).unwrap_or(0)
    }
}

/// Top-down pass: the root gets what the link and its demand allow; every node's
/// share is water-filled among its children.
pub fn distribute(tree: &PolicyTree, aggregated: &DemandVector) -> Result<Allocation, AllocError> {
    distribute_within(tree, aggregated, tree.capacity)
}

/// [`distribute`] with the root limited to `capacity` instead of the tree's own.
///
/// `capacity` must still cover the guarantees the root's children ask for.
pub fn distribute_within(tree: &PolicyTree, aggregated: &DemandVector, capacity: Bps) -> Result<Allocation, AllocError> {
    let shape = validate_tree(tree).map_err(AllocError::Policy)?;
    let n = tree.nodes.len();
    let mut demand = vec![0u64; n];
    for (i, node) in tree.nodes.iter().enumerate() {
        demand[i] = *aggregated.get(&node.id).ok_or(AllocError::InconsistentTree)?;
    }
    let mut rate = vec![0u64; n];
    let root = &tree.nodes[shape.root];
    rate[shape.root] = root.max_bw.cap(capacity.min(tree.capacity)).min(demand[shape.root]);

    let (mut d, mut w, mut m, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in shape.postorder.iter().rev() {
        let kids = &shape.children[i];
        if kids.is_empty() {
            continue;
        }
        d.clear();
        w.clear();
        m.clear();
        x.clear();
        for &c in kids {
            let node = &tree.nodes[c];
            d.push(demand[c]);
            w.push(node.weight);
            // A guarantee only protects what the child actually asks for.
            m.push(node.min_bw.min(demand[c]));
            x.push(node.max_bw);
        }
        let shares = water_fill(&d, &w, &m, &x, rate[i]).map_err(|_| AllocError::InconsistentTree)?;
        for (k, &c) in kids.iter().enumerate() {
            rate[c] = shares[k];
        }
    }
    let nodes = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            (node.id, NodeAllocation { demand: demand[i], rate: rate[i], limited: rate[i] < demand[i] })
        })
        .collect();
    Ok(Allocation { nodes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafRuntime {
    /// What the enforcer is set to: the allocation when limited, the static cap otherwise.
    pub capacity: Bps,
    pub allocation: Bps,
    pub demand: Bps,
    pub limited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuntimePolicy {
    pub leaves: BTreeMap<ServiceId, LeafRuntime>,
}

impl RuntimePolicy {
    pub fn get(&self, leaf: ServiceId) -> Option<&LeafRuntime> {
        self.leaves.get(&leaf)
    }

    /// The policy in force when nothing has been computed: static caps, no limiters.
    pub fn static_policy(tree: &PolicyTree) -> Result<Self, AllocError> {
        let shape = validate_tree(tree).map_err(AllocError::Policy)?;
        let caps = effective_caps(tree, &shape);
        let leaves = shape
            .leaves()
            .map(|i| {
                let id = tree.nodes[i].id;
                (id, LeafRuntime { capacity: caps[i], allocation: caps[i], demand: 0, limited: false })
            })
            .collect();
        Ok(RuntimePolicy { leaves })
    }
}

/// Aggregates, distributes, and turns the result into enforceable per-leaf capacities.
/// Leaves that got everything they asked for are not limited and keep their static cap.
pub fn compute_runtime_policy(tree: &PolicyTree, leaf_demands: &DemandVector) -> Result<RuntimePolicy, AllocError> {
    compute_runtime_policy_scaled(tree, leaf_demands, 1.0)
}

/// [`compute_runtime_policy`] for a rack where only a `scale` fraction of machines report.
///
/// The link and every class-level min and max shrink by `scale`, so the reporting
/// machines keep the per-machine shares they would have with everyone present.
/// Falls back to shrinking the link alone (never below the root's claimed guarantees)
/// when the shrunken guarantees no longer fit.
pub fn compute_runtime_policy_scaled(
    tree: &PolicyTree,
    leaf_demands: &DemandVector,
    scale: f64,
) -> Result<RuntimePolicy, AllocError> {
    let agg = aggregate_demands(tree, leaf_demands)?;
    let shape = validate_tree(tree).map_err(AllocError::Policy)?;
    let caps = effective_caps(tree, &shape);
    let alloc = if scale < 1.0 {
        let s = scale.max(0.0);
        let mut shrunk = tree.clone();
        shrunk.capacity = (tree.capacity as f64 * s) as Bps;
        for (i, node) in shrunk.nodes.iter_mut().enumerate() {
            if shape.is_leaf(i) {
                continue;
            }
            node.min_bw = (node.min_bw as f64 * s) as Bps;
            if let Limit::Finite(x) = node.max_bw {
                node.max_bw = Limit::Finite((x as f64 * s) as Bps);
            }
        }
        match distribute(&shrunk, &agg) {
            Ok(a) => a,
            Err(_) => {
                let owed: Bps = shape.children[shape.root]
                    .iter()
                    .map(|&c| tree.nodes[c].min_bw.min(agg[&tree.nodes[c].id]))
                    .sum();
                distribute_within(tree, &agg, shrunk.capacity.max(owed).min(tree.capacity))?
            }
        }
    } else {
        distribute(tree, &agg)?
    };
    let leaves = shape
        .leaves()
        .map(|i| {
            let id = tree.nodes[i].id;
            let a = alloc.nodes[&id];
            let capacity = if a.limited { a.rate } else { caps[i] };
            (id, LeafRuntime { capacity, allocation: a.rate, demand: a.demand, limited: a.limited })
        })
        .collect();
    Ok(RuntimePolicy { leaves })
}

/// Headroom granted to a leaf that used (nearly) all of a limited allocation.
pub const HEADROOM: f64 = 0.10;
/// Usage at or above this fraction of the previous allocation counts as pressing against it.
pub const PRESSING: f64 = 0.90;

/// Demand for the next interval from measured usage.
///
/// A limited leaf can never show more usage than its allocation, so one pressing
/// against it asks for 10% more; a leaf that backed off asks for what it used.
pub fn estimate_demand(usage: Bps, prev: Option<&LeafRuntime>) -> Bps {
    match prev {
        Some(p) if p.limited && usage as f64 >= PRESSING * p.allocation as f64 => {
            usage.max((p.allocation as f64 * (1.0 + HEADROOM)).round() as Bps)
        }
        _ => usage,
    }
}
