//! Hierarchical datacenter bandwidth sharing.
//!
//! Static policies ([`policy`]) are turned into runtime allocations by the
//! water-filling [`allocator`], computed cooperatively by per-machine
//! [`rack_broker`]s and a cluster-wide [`fabric_broker`], and enforced on each
//! host by the [`machine_shaper`]. [`latency`] holds the arrival-envelope and
//! queueing-model tools used to provision for tail latency.

pub mod allocator;
pub mod fabric_broker;
pub mod latency;
pub mod machine_shaper;
pub mod policy;
pub mod rack_broker;
pub mod units;

pub use allocator::{compute_runtime_policy, water_fill, Allocation, LeafRuntime, RuntimePolicy};
pub use policy::{validate_tree, ContentionPoint, Direction, MachineId, PolicyNode, PolicyTree, ServiceId};
pub use units::{Bps, Limit, Nanos};
