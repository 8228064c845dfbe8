//! Two tenants on a 10G rack: VM capped at 1G, DFS guaranteed 6G and capped at 8G.

use bwbroker::allocator::{compute_runtime_policy, DemandVector};
use bwbroker::policy::{ContentionPoint, Direction, PolicyNode, PolicyTree};
use bwbroker::units::{format_rate, Bps, GBPS};

fn main() {
    let tree = PolicyTree::new(ContentionPoint::RackDown, Direction::Rx, 10 * GBPS)
        .with(PolicyNode::new(0, None))
        .with(PolicyNode::new(1, Some(0)).max(GBPS))
        .with(PolicyNode::new(2, Some(0)).min(6 * GBPS).max(8 * GBPS))
        .with(PolicyNode::new(11, Some(1)).endpoint(1, 1))
        .with(PolicyNode::new(12, Some(1)).endpoint(2, 1))
        .with(PolicyNode::new(21, Some(2)).endpoint(1, 2))
        .with(PolicyNode::new(22, Some(2)).endpoint(2, 2));

    let busy = Bps::MAX / 4;
    for (label, dfs2) in [("all busy", busy), ("DFS on M2 idle", 0)] {
        let demands: DemandVector = [(11, busy), (12, busy), (21, busy), (22, dfs2)].into();
        let rp = compute_runtime_policy(&tree, &demands).expect("valid policy");
        println!("{label}:");
        for (leaf, l) in &rp.leaves {
            println!("  leaf {leaf}: {:>8} limited={}", format_rate(l.allocation), l.limited);
        }
    }
}
