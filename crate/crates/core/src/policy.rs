//! Static sharing policies: service hierarchies with min/max/weight per contention point.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::units::{self, Bps, Limit};

pub type ServiceId = u32;
pub type MachineId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentionPoint {
    MachineTx,
    MachineRx,
    RackUp,
    RackDown,
    Fabric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Tx,
    Rx,
}

fn default_weight() -> f64 {
    1.0
}

fn is_zero(v: &Bps) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNode {
    pub id: ServiceId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ServiceId>,
    #[serde(rename = "min", with = "units::rate", default, skip_serializing_if = "is_zero")]
    pub min_bw: Bps,
    #[serde(rename = "max", default)]
    pub max_bw: Limit,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Machine that enforces this leaf, when the leaf is a (machine, service) pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub machine: Option<MachineId>,
    /// Service class the leaf's traffic belongs to (fabric limits are per class).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceId>,
}

impl PolicyNode {
    pub fn new(id: ServiceId, parent: Option<ServiceId>) -> Self {
        PolicyNode {
            id,
            parent,
            min_bw: 0,
            max_bw: Limit::Unlimited,
            weight: 1.0,
            machine: None,
            service: None,
        }
    }

    pub fn min(mut self, v: Bps) -> Self {
        self.min_bw = v;
        self
    }

    pub fn max(mut self, v: Bps) -> Self {
        self.max_bw = Limit::Finite(v);
        self
    }

    pub fn weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    pub fn endpoint(mut self, machine: MachineId, service: ServiceId) -> Self {
        self.machine = Some(machine);
        self.service = Some(service);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub contention_point: ContentionPoint,
    #[serde(default)]
    pub direction: Direction,
    #[serde(with = "units::rate")]
    pub capacity: Bps,
    pub nodes: Vec<PolicyNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("tree has no nodes")]
    EmptyTree,
    #[error("node {0} is part of a cycle")]
    CycleDetected(ServiceId),
    #[error("node {0}: child guarantees exceed its own guarantee or capacity")]
    GuaranteeOvercommit(ServiceId),
    #[error("node {0}: min exceeds max")]
    MinExceedsMax(ServiceId),
    #[error("node {0}: parent does not exist")]
    OrphanNode(ServiceId),
    #[error("node id {0} appears more than once")]
    DuplicateId(ServiceId),
    #[error("nodes {0} and {1} are both roots")]
    MultipleRoots(ServiceId, ServiceId),
    #[error("node {0}: weight must be positive and finite")]
    InvalidWeight(ServiceId),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown node {0}")]
    UnknownLeaf(ServiceId),
    #[error("invalid policy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("policy file: {0}")]
    Parse(String),
}

/// Index over a validated tree. Node positions refer to `PolicyTree::nodes`.
#[derive(Debug, Clone)]
pub struct TreeShape {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    /// Children of each node, ordered by ascending id.
    pub children: Vec<Vec<usize>>,
    /// Every node after all of its descendants.
    pub postorder: Vec<usize>,
    pub pos: HashMap<ServiceId, usize>,
}

impl TreeShape {
    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.postorder.iter().copied().filter(|&i| self.children[i].is_empty())
    }
}

/// Checks every structural and admission rule. Returns all violations found.
pub fn validate_tree(tree: &PolicyTree) -> Result<TreeShape, Vec<Violation>> {
    let n = tree.nodes.len();
    if n == 0 {
        return Err(vec![Violation::EmptyTree]);
    }
    let mut errs = Vec::new();
    let mut pos = HashMap::with_capacity(n);
    for (i, node) in tree.nodes.iter().enumerate() {
        if pos.insert(node.id, i).is_some() {
            errs.push(Violation::DuplicateId(node.id));
        }
        if !(node.weight > 0.0 && node.weight.is_finite()) {
            errs.push(Violation::InvalidWeight(node.id));
        }
        if !node.max_bw.allows(node.min_bw) {
            errs.push(Violation::MinExceedsMax(node.id));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let mut parent = vec![None; n];
    let mut root = None;
    for (i, node) in tree.nodes.iter().enumerate() {
        match node.parent {
            None => match root {
                None => root = Some(i),
                Some(r) => errs.push(Violation::MultipleRoots(tree.nodes[r].id, node.id)),
            },
            Some(p) => match pos.get(&p) {
                Some(&pi) => parent[i] = Some(pi),
                None => errs.push(Violation::OrphanNode(node.id)),
            },
        }
    }
    let Some(root) = root else {
        // Every node has a parent, so the graph must close on itself.
        let mut ids: Vec<_> = tree.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        errs.push(Violation::CycleDetected(ids[0]));
        return Err(errs);
    };
    if !errs.is_empty() {
        return Err(errs);
    }

    let mut children = vec![Vec::new(); n];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    for c in &mut children {
        c.sort_unstable_by_key(|&i| tree.nodes[i].id);
    }

    // Iterative DFS from the root; anything unreached hangs off a cycle.
    let mut postorder = Vec::with_capacity(n);
    let mut stack = vec![(root, 0usize)];
    let mut seen = vec![false; n];
    seen[root] = true;
    while let Some((node, next)) = stack.pop() {
        if next < children[node].len() {
            stack.push((node, next + 1));
            let c = children[node][next];
            if !seen[c] {
                seen[c] = true;
                stack.push((c, 0));
            }
        } else {
            postorder.push(node);
        }
    }
    if postorder.len() != n {
        let mut cyc: Vec<_> = (0..n).filter(|&i| !seen[i]).map(|i| tree.nodes[i].id).collect();
        cyc.sort_unstable();
        errs.extend(cyc.into_iter().map(Violation::CycleDetected));
        return Err(errs);
    }

    for i in 0..n {
        if children[i].is_empty() {
            continue;
        }
        let sum: u128 = children[i].iter().map(|&c| tree.nodes[c].min_bw as u128).sum();
        let node = &tree.nodes[i];
        let ok = if i == root {
            // The root's own guarantee is the link; its max can tighten that.
            sum <= tree.capacity as u128 && node.max_bw.allows(sum.min(u64::MAX as u128) as u64)
        } else {
            sum <= node.min_bw as u128
        };
        if !ok {
            errs.push(Violation::GuaranteeOvercommit(node.id));
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(TreeShape { root, parent, children, postorder, pos })
}

/// The tightest max along the path from `leaf` to the root, capped by the tree capacity.
pub fn effective_cap(tree: &PolicyTree, leaf: ServiceId) -> Result<Bps, PolicyError> {
    let by_id: HashMap<ServiceId, &PolicyNode> = tree.nodes.iter().map(|n| (n.id, n)).collect();
    let mut cur = *by_id.get(&leaf).ok_or(PolicyError::UnknownLeaf(leaf))?;
    let mut cap = cur.max_bw.cap(tree.capacity);
    let mut hops = 0;
    while let Some(p) = cur.parent {
        cur = match by_id.get(&p) {
            Some(n) => n,
            None => break,
        };
        cap = cur.max_bw.cap(cap);
        hops += 1;
        if hops > tree.nodes.len() {
            break;
        }
    }
    Ok(cap)
}

/// Effective caps for every node of a validated tree, computed top-down in one pass.
pub fn effective_caps(tree: &PolicyTree, shape: &TreeShape) -> Vec<Bps> {
    let mut caps = vec![0; tree.nodes.len()];
    for &i in shape.postorder.iter().rev() {
        let above = match shape.parent[i] {
            Some(p) => caps[p],
            None => tree.capacity,
        };
        caps[i] = tree.nodes[i].max_bw.cap(above);
    }
    caps
}

impl PolicyTree {
    pub fn new(contention_point: ContentionPoint, direction: Direction, capacity: Bps) -> Self {
        PolicyTree { contention_point, direction, capacity, nodes: Vec::new() }
    }

    pub fn with(mut self, node: PolicyNode) -> Self {
        self.nodes.push(node);
        self
    }

    pub fn node(&self, id: ServiceId) -> Option<&PolicyNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: ServiceId) -> Option<&mut PolicyNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Leaf ids in ascending order. Assumes a structurally sound tree.
    pub fn leaf_ids(&self) -> Vec<ServiceId> {
        let parents: std::collections::HashSet<_> = self.nodes.iter().filter_map(|n| n.parent).collect();
        let mut ids: Vec<_> = self.nodes.iter().map(|n| n.id).filter(|id| !parents.contains(id)).collect();
        ids.sort_unstable();
        ids
    }

    /// Leaves bound to `machine`, keyed by leaf id.
    pub fn leaves_of(&self, machine: MachineId) -> BTreeMap<ServiceId, &PolicyNode> {
        let leaves = self.leaf_ids();
        self.nodes
            .iter()
            .filter(|n| n.machine == Some(machine) && leaves.binary_search(&n.id).is_ok())
            .map(|n| (n.id, n))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let tree: PolicyTree = serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
        validate_tree(&tree).map_err(PolicyError::Invalid)?;
        Ok(tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy tree serializes")
    }
}
