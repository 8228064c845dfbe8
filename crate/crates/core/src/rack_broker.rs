//! Per-machine rack broker.
//!
//! Every machine reports its per-leaf usage to every rack peer each interval,
//! and every machine runs the same allocation over the same reports, so all of
//! them agree on the rack's runtime policy without a coordinator. Each one then
//! installs only its own leaves.

use std::collections::{BTreeMap, BTreeSet};

use crate::allocator::{
    compute_runtime_policy_scaled, estimate_demand, water_fill, AllocError, DemandVector, LeafRuntime, RuntimePolicy,
};
use crate::policy::{validate_tree, Direction, MachineId, PolicyTree, ServiceId, Violation};
use crate::units::{Bps, Limit, Nanos, NS_PER_SEC, NS_PER_US};

/// `b"EEQ2"` read as a little-endian u32.
pub const REPORT_MAGIC: u32 = u32::from_le_bytes(*b"EEQ2");
/// magic u32 + sender u32 + timestamp u64.
pub const HEADER_LEN: usize = 16;
pub const ENTRY_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("malformed report: {0}")]
    MalformedReport(&'static str),
    #[error("{0} entries exceed the 65535 a report can carry")]
    TooManyEntries(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsageEntry {
    pub service: ServiceId,
    /// bits/s, carried as a 32-bit float on the wire.
    pub utilization: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageReport {
    pub sender: MachineId,
    pub timestamp_us: u64,
    /// Unique by service, ascending.
    pub entries: Vec<UsageEntry>,
}

impl UsageReport {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 2 + ENTRY_LEN * self.entries.len()
    }

    pub fn usage(&self, service: ServiceId) -> Option<f32> {
        self.entries
            .binary_search_by_key(&service, |e| e.service)
            .ok()
            .map(|i| self.entries[i].utilization)
    }
}

pub(crate) fn encode_entries(magic: u32, sender: u32, ts: u64, entries: &[(u32, f32)]) -> Result<Vec<u8>, WireError> {
    if entries.len() > u16::MAX as usize {
        return Err(WireError::TooManyEntries(entries.len()));
    }
    let mut b = Vec::with_capacity(HEADER_LEN + 2 + ENTRY_LEN * entries.len());
    b.extend_from_slice(&magic.to_le_bytes());
    b.extend_from_slice(&sender.to_le_bytes());
    b.extend_from_slice(&ts.to_le_bytes());
    b.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (id, v) in entries {
        b.extend_from_slice(&id.to_le_bytes());
        b.extend_from_slice(&v.to_le_bytes());
    }
    Ok(b)
}

pub(crate) fn decode_entries(magic: u32, b: &[u8]) -> Result<(u32, u64, Vec<(u32, f32)>), WireError> {
    let m = WireError::MalformedReport;
    if b.len() < HEADER_LEN + 2 {
        return Err(m("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(m("bad magic"));
    }
    let sender = word(4);
    let ts = u64::from_le_bytes(b[8..16].try_into().unwrap());
    let n = u16::from_le_bytes([b[16], b[17]]) as usize;
    if b.len() != HEADER_LEN + 2 + ENTRY_LEN * n {
        return Err(m("length does not match entry count"));
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let at = HEADER_LEN + 2 + ENTRY_LEN * k;
        out.push((word(at), f32::from_le_bytes(b[at + 4..at + 8].try_into().unwrap())));
    }
    Ok((sender, ts, out))
}

pub fn encode_report(r: &UsageReport) -> Result<Vec<u8>, WireError> {
    let e: Vec<(u32, f32)> = r.entries.iter().map(|e| (e.service, e.utilization)).collect();
    encode_entries(REPORT_MAGIC, r.sender, r.timestamp_us, &e)
}

pub fn decode_report(b: &[u8]) -> Result<UsageReport, WireError> {
    let (sender, timestamp_us, raw) = decode_entries(REPORT_MAGIC, b)?;
    let mut entries = Vec::with_capacity(raw.len());
    for (service, utilization) in raw {
        if !(utilization >= 0.0) {
            return Err(WireError::MalformedReport("negative or NaN utilization"));
        }
        entries.push(UsageEntry { service, utilization });
    }
    entries.sort_by_key(|e| e.service);
    if entries.windows(2).any(|w| w[0].service == w[1].service) {
        return Err(WireError::MalformedReport("duplicate service"));
    }
    Ok(UsageReport { sender, timestamp_us, entries })
}

/// Builds this machine's report from bytes counted per leaf over `interval`.
/// Idle leaves are left out.
pub fn collect_local_usage(
    machine: MachineId,
    bytes_by_leaf: &BTreeMap<ServiceId, u64>,
    interval: Nanos,
    now: Nanos,
) -> UsageReport {
    let secs = interval as f64 / NS_PER_SEC as f64;
    let entries = bytes_by_leaf
        .iter()
        .filter(|(_, &b)| b > 0)
        .map(|(&service, &b)| UsageEntry { service, utilization: (b as f64 * 8.0 / secs) as f32 })
        .collect();
    UsageReport { sender: machine, timestamp_us: now / NS_PER_US, entries }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RackError {
    #[error("machine {0} is not in this rack")]
    UnknownMachine(MachineId),
    #[error("invalid rack policy: {0:?}")]
    Policy(Vec<Violation>),
    #[error("leaf {0} appears in both the uplink and downlink trees")]
    SharedLeaf(ServiceId),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RackBrokerConfig {
    pub interval: Nanos,
    /// Peers silent for longer than this drop out of the allocation.
    pub timeout: Nanos,
    /// Fabric limits expire this long after the last push.
    pub fabric_timeout: Nanos,
}

impl Default for RackBrokerConfig {
    fn default() -> Self {
        RackBrokerConfig { interval: NS_PER_SEC, timeout: 5 * NS_PER_SEC, fabric_timeout: 50 * NS_PER_SEC }
    }
}

/// A runtime setting for one of this machine's leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Install {
    pub leaf: ServiceId,
    pub service: Option<ServiceId>,
    pub direction: Direction,
    pub capacity: Bps,
    pub limited: bool,
}

#[derive(Debug, Clone)]
struct Peer {
    report: UsageReport,
    last_seen: Nanos,
}

#[derive(Debug, Clone)]
pub struct RackBroker {
    pub machine: MachineId,
    pub config: RackBrokerConfig,
    machines: BTreeSet<MachineId>,
    up: PolicyTree,
    down: PolicyTree,
    peers: BTreeMap<MachineId, Peer>,
    prev: BTreeMap<ServiceId, LeafRuntime>,
    base_up: RuntimePolicy,
    base_down: RuntimePolicy,
    fabric: BTreeMap<ServiceId, Limit>,
    fabric_heard: Option<Nanos>,
}

impl RackBroker {
    pub fn new(
        machine: MachineId,
        machines: impl IntoIterator<Item = MachineId>,
        up: PolicyTree,
        down: PolicyTree,
        config: RackBrokerConfig,
    ) -> Result<Self, RackError> {
        validate_tree(&up).map_err(RackError::Policy)?;
        validate_tree(&down).map_err(RackError::Policy)?;
        let down_leaves = down.leaf_ids();
        if let Some(&shared) = up.leaf_ids().iter().find(|id| down_leaves.binary_search(id).is_ok()) {
            return Err(RackError::SharedLeaf(shared));
        }
        let machines: BTreeSet<_> = machines.into_iter().collect();
        if !machines.contains(&machine) {
            return Err(RackError::UnknownMachine(machine));
        }
        let base_up = RuntimePolicy::static_policy(&up)?;
        let base_down = RuntimePolicy::static_policy(&down)?;
        Ok(RackBroker {
            machine,
            config,
            machines,
            up,
            down,
            peers: BTreeMap::new(),
            prev: BTreeMap::new(),
            base_up,
            base_down,
            fabric: BTreeMap::new(),
            fabric_heard: None,
        })
    }

    pub fn machines(&self) -> &BTreeSet<MachineId> {
        &self.machines
    }

    pub fn tree(&self, dir: Direction) -> &PolicyTree {
        match dir {
            Direction::Tx => &self.up,
            Direction::Rx => &self.down,
        }
    }

    /// Replaces a rack policy; takes effect at the next tick.
    pub fn set_policy(&mut self, dir: Direction, tree: PolicyTree) -> Result<(), RackError> {
        validate_tree(&tree).map_err(RackError::Policy)?;
        match dir {
            Direction::Tx => self.up = tree,
            Direction::Rx => self.down = tree,
        }
        Ok(())
    }

    /// Stores a peer's report. Returns false if an equal-or-newer one is already held.
    pub fn on_report(&mut self, report: UsageReport, now: Nanos) -> Result<bool, RackError> {
        if !self.machines.contains(&report.sender) {
            return Err(RackError::UnknownMachine(report.sender));
        }
        if let Some(p) = self.peers.get(&report.sender) {
            if p.report.timestamp_us > report.timestamp_us {
                return Ok(false);
            }
        }
        self.peers.insert(report.sender, Peer { report, last_seen: now });
        Ok(true)
    }

    /// Machines whose last report is no older than the timeout.
    pub fn live_machines(&self, now: Nanos) -> BTreeSet<MachineId> {
        self.peers
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.last_seen) <= self.config.timeout)
            .map(|(&m, _)| m)
            .collect()
    }

    fn demands(&self, tree: &PolicyTree, live: &BTreeSet<MachineId>) -> DemandVector {
        tree.leaf_ids()
            .into_iter()
            .map(|leaf| {
                let node = tree.node(leaf).expect("leaf exists");
                let usage = match node.machine {
                    Some(m) if live.contains(&m) => {
                        self.peers[&m].report.usage(leaf).map(|u| u as f64).unwrap_or(0.0)
                    }
                    _ => 0.0,
                };
                let usage = usage.round() as Bps;
                let d = match node.machine {
                    Some(m) if live.contains(&m) => estimate_demand(usage, self.prev.get(&leaf)),
                    _ => 0,
                };
                (leaf, d)
            })
            .collect()
    }

    /// Recomputes both rack trees from the reports on hand and returns the
    /// settings for this machine's leaves.
    ///
    /// Capacity is shared out in proportion to the machines still reporting, so a
    /// silent machine's share is not handed to the others.
    pub fn tick(&mut self, now: Nanos) -> Result<Vec<Install>, RackError> {
        self.expire_fabric(now);
        let live = self.live_machines(now);
        let scale = live.len() as f64 / self.machines.len() as f64;
        let up_d = self.demands(&self.up, &live);
        let down_d = self.demands(&self.down, &live);
        self.base_up = compute_runtime_policy_scaled(&self.up, &up_d, scale)?;
        self.base_down = compute_runtime_policy_scaled(&self.down, &down_d, scale)?;
        self.prev.clear();
        self.prev.extend(self.base_up.leaves.iter().map(|(k, v)| (*k, *v)));
        self.prev.extend(self.base_down.leaves.iter().map(|(k, v)| (*k, *v)));
        Ok(self.local_installs())
    }

    /// Rack-wide uplink policy after fabric limits.
    pub fn uplink_policy(&self) -> RuntimePolicy {
        self.apply_fabric(&self.base_up)
    }

    pub fn downlink_policy(&self) -> &RuntimePolicy {
        &self.base_down
    }

    /// Settings for this machine's leaves under the latest tick and fabric limits.
    pub fn local_installs(&self) -> Vec<Install> {
        let up = self.uplink_policy();
        let mut out = Vec::new();
        for (dir, tree, rp) in [(Direction::Tx, &self.up, &up), (Direction::Rx, &self.down, &self.base_down)] {
            for (leaf, node) in tree.leaves_of(self.machine) {
                if let Some(l) = rp.leaves.get(&leaf) {
                    out.push(Install {
                        leaf,
                        service: node.service,
                        direction: dir,
                        capacity: l.capacity,
                        limited: l.limited,
                    });
                }
            }
        }
        out
    }

    /// Caps each fabric-limited service class's uplink leaves to the pushed limit.
    ///
    /// Leaves are first filled by demand; any leftover is spread over their
    /// remaining caps so an idle leaf is never locked out at zero.
    fn apply_fabric(&self, base: &RuntimePolicy) -> RuntimePolicy {
        let mut rp = base.clone();
        for (&class, &limit) in &self.fabric {
            let Limit::Finite(limit) = limit else { continue };
            let leaves: Vec<ServiceId> = self
                .up
                .leaf_ids()
                .into_iter()
                .filter(|l| self.up.node(*l).and_then(|n| n.service) == Some(class))
                .filter(|l| rp.leaves.contains_key(l))
                .collect();
            if leaves.is_empty() {
                continue;
            }
            let caps: Vec<Bps> = leaves.iter().map(|l| rp.leaves[l].capacity).collect();
            if caps.iter().map(|&c| c as u128).sum::<u128>() <= limit as u128 {
                continue;
            }
            let w: Vec<f64> = leaves.iter().map(|l| self.up.node(*l).unwrap().weight).collect();
            let d: Vec<Bps> = leaves.iter().map(|l| rp.leaves[l].demand).collect();
            let zero = vec![0; leaves.len()];
            let maxes: Vec<Limit> = caps.iter().map(|&c| Limit::Finite(c)).collect();
            let first = water_fill(&d, &w, &zero, &maxes, limit).expect("no guarantees to violate");
            let used: u64 = first.iter().sum();
            let room: Vec<Bps> = caps.iter().zip(&first).map(|(c, f)| c - f).collect();
            let second = if used < limit {
                water_fill(&room, &w, &zero, &maxes, limit - used).expect("no guarantees to violate")
            } else {
                zero.clone()
            };
            for (k, l) in leaves.iter().enumerate() {
                let e = rp.leaves.get_mut(l).unwrap();
                e.capacity = first[k] + second[k];
                e.allocation = e.allocation.min(e.capacity);
                e.limited = true;
            }
        }
        rp
    }

    /// Installs limits pushed by the fabric broker. Absent classes are unlimited.
    pub fn apply_fabric_limits(&mut self, limits: BTreeMap<ServiceId, Limit>, now: Nanos) {
        self.fabric = limits;
        self.fabric_heard = Some(now);
    }

    pub fn fabric_limits(&self) -> &BTreeMap<ServiceId, Limit> {
        &self.fabric
    }

    /// When the current fabric limits lapse, if any are held.
    pub fn fabric_expiry(&self) -> Option<Nanos> {
        self.fabric_heard.map(|t| t + self.config.fabric_timeout)
    }

    /// Drops fabric limits not refreshed within the timeout. Returns true if any were dropped.
    pub fn expire_fabric(&mut self, now: Nanos) -> bool {
        match self.fabric_expiry() {
            Some(t) if now >= t => {
                let had = !self.fabric.is_empty();
                self.fabric.clear();
                self.fabric_heard = None;
                had
            }
            _ => false,
        }
    }

    /// Uplink usage per service class summed over live peers, in bits/s.
    pub fn class_usage(&self, now: Nanos) -> BTreeMap<ServiceId, f64> {
        let live = self.live_machines(now);
        let mut out: BTreeMap<ServiceId, f64> = BTreeMap::new();
        for leaf in self.up.leaf_ids() {
            let node = self.up.node(leaf).unwrap();
            let (Some(m), Some(class)) = (node.machine, node.service) else { continue };
            if !live.contains(&m) {
                continue;
            }
            let u = self.peers[&m].report.usage(leaf).unwrap_or(0.0) as f64;
            *out.entry(class).or_default() += u;
        }
        out
    }
}
