//! Scenario files: topology, services, rack policies, workloads, broker
//! parameters, an event schedule and self-checking assertions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use bwbroker::policy::{validate_tree, ContentionPoint, Direction, PolicyNode, PolicyTree, ServiceId};
use bwbroker::units::{self, Bps, Nanos, NS_PER_MS, NS_PER_SEC, NS_PER_US};

use crate::topology::{Topology, TopologySpec};
use crate::workload::{opt_duration, opt_rate, WorkloadSpec};

/// Generated (machine, service) leaves are numbered from here; class node ids must stay below.
pub const LEAF_BASE: u32 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub id: ServiceId,
    #[serde(default)]
    pub name: Option<String>,
    /// Limiter burst. Defaults to 64kB, or ten RPCs for services with RPC workloads.
    #[serde(default, with = "opt_size")]
    pub burst: Option<u64>,
    /// Per-host cap on this service in each direction, below the NIC rate.
    #[serde(default, with = "opt_rate")]
    pub host_max: Option<Bps>,
}

/// A class-level policy tree applied to every rack it names. Leaves are service ids;
/// the simulator hangs one (machine, service) leaf per host under each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub direction: Direction,
    #[serde(default)]
    pub racks: Option<Vec<u32>>,
    pub nodes: Vec<PolicyNode>,
}

impl PolicySpec {
    pub fn applies_to(&self, rack: u32) -> bool {
        self.racks.as_ref().is_none_or(|r| r.contains(&rack))
    }
}

fn d_true() -> bool {
    true
}
fn d_rack_interval() -> Nanos {
    NS_PER_SEC
}
fn d_rack_timeout() -> Nanos {
    5 * NS_PER_SEC
}
fn d_fabric_interval() -> Nanos {
    10 * NS_PER_SEC
}
fn d_fabric_timeout() -> Nanos {
    50 * NS_PER_SEC
}
fn d_meter_interval() -> Nanos {
    500 * NS_PER_US
}
fn d_alpha() -> f64 {
    bwbroker::machine_shaper::DEFAULT_ALPHA
}
fn d_compute() -> Nanos {
    NS_PER_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSpec {
    /// Per-host limiters and rate meters.
    #[serde(default = "d_true")]
    pub shaper: bool,
    #[serde(default = "d_true")]
    pub rack_broker: bool,
    #[serde(default = "d_true")]
    pub fabric_broker: bool,
    #[serde(default = "d_rack_interval", with = "units::duration")]
    pub rack_interval: Nanos,
    #[serde(default = "d_rack_timeout", with = "units::duration")]
    pub rack_timeout: Nanos,
    #[serde(default = "d_fabric_interval", with = "units::duration")]
    pub fabric_interval: Nanos,
    #[serde(default = "d_fabric_timeout", with = "units::duration")]
    pub fabric_timeout: Nanos,
    #[serde(default = "d_meter_interval", with = "units::duration")]
    pub meter_interval: Nanos,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Gain for folding all destination feedback into one shared limiter.
    #[serde(default)]
    pub ewha_gain: Option<f64>,
    /// Delay between a broker's report round and the allocation it installs.
    #[serde(default = "d_compute", with = "units::duration")]
    pub compute_delay: Nanos,
    /// Idle destination limiters are dropped after this long; defaults to ten rack intervals.
    #[serde(default, with = "opt_duration")]
    pub limiter_idle: Option<Nanos>,
}

impl Default for BrokerSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricCapSpec {
    pub service: ServiceId,
    #[serde(with = "units::rate")]
    pub cap: Bps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Sets or (with a null cap) removes a service's global fabric cap.
    FabricCap {
        service: ServiceId,
        #[serde(default, with = "opt_rate")]
        cap: Option<Bps>,
    },
    RackPolicy(PolicySpec),
    /// `host:H:tx`, `host:H:rx`, `rack:R:up`, `rack:R:down` or a spine member `rack:R:spine:K`.
    LinkToggle { link: String, up: bool },
    KillRackBroker { host: u32 },
    KillFabricBroker,
    MeterInterval {
        #[serde(with = "units::duration")]
        interval: Nanos,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    #[serde(with = "units::duration")]
    pub at: Nanos,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ToggleTarget {
    HostTx(u32),
    HostRx(u32),
    RackUp(u32),
    RackDown(u32),
    Spine(u32, u32),
}

pub fn parse_link(name: &str, topo: &Topology) -> Result<ToggleTarget, String> {
    let parts: Vec<&str> = name.split(':').collect();
    let num = |s: &str| s.parse::<u32>().map_err(|_| format!("unknown link {name}"));
    let t = match parts.as_slice() {
        ["host", h, "tx"] => ToggleTarget::HostTx(num(h)?),
        ["host", h, "rx"] => ToggleTarget::HostRx(num(h)?),
        ["rack", r, "up"] => ToggleTarget::RackUp(num(r)?),
        ["rack", r, "down"] => ToggleTarget::RackDown(num(r)?),
        ["rack", r, "spine", k] => ToggleTarget::Spine(num(r)?, num(k)?),
        _ => return Err(format!("unknown link {name}")),
    };
    let ok = match t {
        ToggleTarget::HostTx(h) | ToggleTarget::HostRx(h) => h < topo.hosts(),
        ToggleTarget::RackUp(r) | ToggleTarget::RackDown(r) => r < topo.spec.racks,
        ToggleTarget::Spine(r, k) => r < topo.spec.racks && k < topo.spec.spine_links.max(1),
    };
    if ok {
        Ok(t)
    } else {
        Err(format!("unknown link {name}"))
    }
}

fn d_bin() -> Nanos {
    NS_PER_SEC
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "d_bin", with = "units::duration")]
    pub util_bin: Nanos,
    /// Sampling period for per-link queue occupancy; off when absent.
    #[serde(default, with = "opt_duration")]
    pub queue_series: Option<Nanos>,
    /// Link counters and occupancy histograms start from this time.
    #[serde(default, with = "units::duration")]
    pub stats_from: Nanos,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { util_bin: d_bin(), queue_series: None, stats_from: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum Metric {
    /// Mean of the utilization bins in [from, to) for one scope.
    MeanUtil {
        scope: String,
        #[serde(default)]
        service: Option<ServiceId>,
        #[serde(default, with = "opt_duration")]
        from: Option<Nanos>,
        #[serde(default, with = "opt_duration")]
        to: Option<Nanos>,
    },
    /// Over flows started in [from, to); unfinished flows count as lasting to the horizon.
    P99Fct {
        service: ServiceId,
        #[serde(default, with = "opt_duration")]
        from: Option<Nanos>,
        #[serde(default, with = "opt_duration")]
        to: Option<Nanos>,
    },
    MeanFct {
        service: ServiceId,
        #[serde(default, with = "opt_duration")]
        from: Option<Nanos>,
        #[serde(default, with = "opt_duration")]
        to: Option<Nanos>,
    },
    /// Jain's index over the services' mean utilizations at one scope.
    Jain {
        scope: String,
        services: Vec<ServiceId>,
        #[serde(default, with = "opt_duration")]
        from: Option<Nanos>,
        #[serde(default, with = "opt_duration")]
        to: Option<Nanos>,
    },
    CompletedFlows {
        #[serde(default)]
        service: Option<ServiceId>,
    },
    /// Queue length in packets seen by 99% of arrivals at one link, e.g. `host:3:rx`.
    QueueP99 { link: String },
}

/// Utilization bounds are in bits/s, FCT bounds in seconds; both accept unit strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub metric: Metric,
    #[serde(default)]
    pub min: Option<serde_json::Value>,
    #[serde(default)]
    pub max: Option<serde_json::Value>,
}

impl Assertion {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| match &self.metric {
            Metric::MeanUtil { scope, service, .. } => match service {
                Some(s) => format!("mean_util {scope} service {s}"),
                None => format!("mean_util {scope}"),
            },
            Metric::P99Fct { service, .. } => format!("p99_fct service {service}"),
            Metric::MeanFct { service, .. } => format!("mean_fct service {service}"),
            Metric::Jain { scope, .. } => format!("jain {scope}"),
            Metric::CompletedFlows { .. } => "completed_flows".into(),
            Metric::QueueP99 { link } => format!("queue_p99 {link}"),
        })
    }

    fn bound(&self, v: &serde_json::Value) -> Result<f64, String> {
        match v {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad bound {n}")),
            serde_json::Value::String(s) => match &self.metric {
                Metric::MeanUtil { .. } => units::parse_rate(s).map(|r| r as f64).map_err(|e| e.to_string()),
                Metric::P99Fct { .. } | Metric::MeanFct { .. } => {
                    units::parse_duration(s).map(units::secs).map_err(|e| e.to_string())
                }
                _ => s.parse().map_err(|_| format!("bad bound {s}")),
            },
            other => Err(format!("bad bound {other}")),
        }
    }

    /// (min, max) as plain numbers.
    pub fn bounds(&self) -> Result<(Option<f64>, Option<f64>), String> {
        let lo = self.min.as_ref().map(|v| self.bound(v)).transpose()?;
        let hi = self.max.as_ref().map(|v| self.bound(v)).transpose()?;
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(with = "units::duration")]
    pub horizon: Nanos,
    #[serde(default)]
    pub topology: TopologySpec,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub brokers: BrokerSpec,
    #[serde(default)]
    pub fabric_caps: Vec<FabricCapSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
    #[serde(default)]
    pub outputs: OutputSpec,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn service_ids(&self) -> Vec<ServiceId> {
        let mut v: Vec<_> = self.services.iter().map(|s| s.id).collect();
        v.sort_unstable();
        v
    }

    /// Limiter burst for a service, in bytes.
    pub fn burst(&self, service: ServiceId) -> u64 {
        let spec = self.services.iter().find(|s| s.id == service);
        if let Some(b) = spec.and_then(|s| s.burst) {
            return b;
        }
        let rpc = self
            .workloads
            .iter()
            .filter_map(|w| match w {
                WorkloadSpec::Rpc { service: s, size, .. } if *s == service => Some(*size),
                _ => None,
            })
            .max();
        let floor = 64_000.max(self.topology.mtu as u64);
        rpc.map_or(floor, |z| (10 * z).max(floor))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = &self.topology;
        if t.racks == 0 || t.hosts_per_rack == 0 {
            return invalid("topology needs at least one rack and one host per rack");
        }
        if t.nic_rate == 0 || t.uplink == 0 {
            return invalid("link rates must be positive");
        }
        if !(64..=65_000).contains(&t.mtu) {
            return invalid(format!("mtu {} out of range", t.mtu));
        }
        if self.horizon == 0 {
            return invalid("horizon must be positive");
        }
        if self.outputs.util_bin == 0 || self.outputs.queue_series == Some(0) {
            return invalid("output periods must be positive");
        }
        let b = &self.brokers;
        if b.rack_interval == 0 || b.fabric_interval == 0 || b.meter_interval == 0 {
            return invalid("broker intervals must be positive");
        }
        if b.compute_delay >= b.rack_interval {
            return invalid("compute_delay must be shorter than rack_interval");
        }
        if !(b.alpha > 0.0 && b.alpha <= 1.0) {
            return invalid("alpha must lie in (0, 1]");
        }
        if let Some(g) = b.ewha_gain {
            if !(g > 0.0 && g < 1.0) {
                return invalid("ewha_gain must lie in (0, 1)");
            }
        }

        let ids = self.service_ids();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("duplicate service id");
        }
        if let Some(&s) = ids.iter().find(|&&s| s >= LEAF_BASE) {
            return invalid(format!("service id {s} must be below {LEAF_BASE}"));
        }
        for s in &self.services {
            if self.burst(s.id) < t.mtu as u64 {
                return invalid(format!("service {}: burst smaller than one packet", s.id));
            }
        }
        let known = |s: ServiceId| ids.binary_search(&s).is_ok();

        let topo = Topology::new(t.clone());
        for p in self.policies.iter().chain(self.events.iter().filter_map(|e| match &e.kind {
            EventKind::RackPolicy(p) => Some(p),
            _ => None,
        })) {
            self.validate_policy(p, &topo)?;
        }

        for (i, w) in self.workloads.iter().enumerate() {
            if !known(w.service()) {
                return invalid(format!("workload {i}: unknown service {}", w.service()));
            }
            let (src, dst) = w.selectors();
            src.validate(&topo).map_err(|e| ScenarioError::Invalid(format!("workload {i}: {e}")))?;
            dst.validate(&topo).map_err(|e| ScenarioError::Invalid(format!("workload {i}: {e}")))?;
            let (srcs, dsts) = (src.resolve(&topo), dst.resolve(&topo));
            let cross_rack = matches!(w, WorkloadSpec::OnOff { .. });
            let has_pair = srcs.iter().any(|&s| {
                dsts.iter().any(|&d| d != s && (!cross_rack || topo.rack_of(d) != topo.rack_of(s)))
            });
            if !has_pair {
                return invalid(format!("workload {i}: no usable source/destination pair"));
            }
            if let (start, Some(stop)) = w.window() {
                if stop <= start {
                    return invalid(format!("workload {i}: stop before start"));
                }
            }
            match w {
                WorkloadSpec::Rpc { size, .. } if *size == 0 => {
                    return invalid(format!("workload {i}: zero RPC size"))
                }
                WorkloadSpec::OnOff { on, rate, .. } if *on == 0 || *rate == Some(0) => {
                    return invalid(format!("workload {i}: zero on-period or rate"))
                }
                WorkloadSpec::Cbr { rate: 0, .. } => return invalid(format!("workload {i}: zero rate")),
                WorkloadSpec::LongLived { flows_per_pair: 0, .. } => {
                    return invalid(format!("workload {i}: zero flows per pair"))
                }
                _ => {}
            }
        }

        for c in &self.fabric_caps {
            if !known(c.service) {
                return invalid(format!("fabric cap for unknown service {}", c.service));
            }
        }
        for e in &self.events {
            match &e.kind {
                EventKind::FabricCap { service, .. } if !known(*service) => {
                    return invalid(format!("event at {}: unknown service {service}", e.at))
                }
                EventKind::LinkToggle { link, .. } => {
                    parse_link(link, &topo).map_err(ScenarioError::Invalid)?;
                }
                EventKind::KillRackBroker { host } if *host >= topo.hosts() => {
                    return invalid(format!("event at {}: host {host} does not exist", e.at))
                }
                EventKind::MeterInterval { interval: 0 } => return invalid("meter interval must be positive"),
                _ => {}
            }
        }

        for a in &self.assertions {
            a.bounds().map_err(|e| ScenarioError::Invalid(format!("assertion {}: {e}", a.label())))?;
            match &a.metric {
                Metric::MeanUtil { scope, service, .. } => {
                    check_scope(scope, &topo)?;
                    if service.is_some_and(|s| !known(s)) {
                        return invalid(format!("assertion {}: unknown service", a.label()));
                    }
                }
                Metric::Jain { scope, services, .. } => {
                    check_scope(scope, &topo)?;
                    if services.is_empty() || services.iter().any(|&s| !known(s)) {
                        return invalid(format!("assertion {}: bad service list", a.label()));
                    }
                }
                Metric::P99Fct { service, .. } | Metric::MeanFct { service, .. } if !known(*service) => {
                    return invalid(format!("assertion {}: unknown service", a.label()))
                }
                Metric::QueueP99 { link } => {
                    parse_link(link, &topo).map_err(|e| ScenarioError::Invalid(format!("assertion {}: {e}", a.label())))?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn validate_policy(&self, p: &PolicySpec, topo: &Topology) -> Result<(), ScenarioError> {
        if let Some(r) = p.racks.as_ref().and_then(|r| r.iter().find(|&&r| r >= topo.spec.racks)) {
            return invalid(format!("policy names rack {r}, which does not exist"));
        }
        if let Some(n) = p.nodes.iter().find(|n| n.id >= LEAF_BASE || n.machine.is_some()) {
            return invalid(format!("policy node {}: ids must be below {LEAF_BASE} and carry no machine", n.id));
        }
        let tree = PolicyTree {
            contention_point: contention_point(p.direction),
            direction: p.direction,
            capacity: topo.spec.uplink,
            nodes: p.nodes.clone(),
        };
        if let Err(v) = validate_tree(&tree) {
            let msg: Vec<String> = v.iter().map(|e| e.to_string()).collect();
            return invalid(format!("{:?} policy: {}", p.direction, msg.join("; ")));
        }
        let leaves = tree.leaf_ids();
        for s in self.service_ids() {
            if leaves.binary_search(&s).is_err() {
                return invalid(format!("{:?} policy: service {s} is not a leaf", p.direction));
            }
        }
        if let Some(l) = leaves.iter().find(|l| self.services.iter().all(|s| s.id != **l)) {
            return invalid(format!("{:?} policy: leaf {l} is not a defined service", p.direction));
        }
        Ok(())
    }

    /// The class tree in force for a rack and direction, before expansion.
    pub fn class_policy(&self, policies: &[PolicySpec], dir: Direction, rack: u32) -> Vec<PolicyNode> {
        if let Some(p) = policies.iter().rev().find(|p| p.direction == dir && p.applies_to(rack)) {
            return p.nodes.clone();
        }
        let root = LEAF_BASE - 1;
        let mut nodes = vec![PolicyNode::new(root, None)];
        nodes.extend(self.service_ids().into_iter().map(|s| PolicyNode::new(s, Some(root))));
        nodes
    }
}

pub fn contention_point(dir: Direction) -> ContentionPoint {
    match dir {
        Direction::Tx => ContentionPoint::RackUp,
        Direction::Rx => ContentionPoint::RackDown,
    }
}

/// Id of the generated leaf for `host`'s traffic of the `k`-th service in one direction.
pub fn leaf_id(host: u32, k: usize, n_services: usize, dir: Direction) -> u32 {
    let d = match dir {
        Direction::Tx => 0,
        Direction::Rx => 1,
    };
    LEAF_BASE + ((host * n_services as u32 + k as u32) * 2 + d)
}

/// Expands a class tree into a rack tree with one leaf per (host, service).
/// `leaf_max[k]` caps every leaf of the `k`-th service, normally at the NIC rate.
pub fn expand_policy(
    class_nodes: &[PolicyNode],
    dir: Direction,
    capacity: Bps,
    hosts: impl Iterator<Item = u32> + Clone,
    services: &[ServiceId],
    leaf_max: &[Bps],
) -> PolicyTree {
    let mut nodes = class_nodes.to_vec();
    for (k, &s) in services.iter().enumerate() {
        for h in hosts.clone() {
            nodes.push(PolicyNode::new(leaf_id(h, k, services.len(), dir), Some(s)).max(leaf_max[k]).endpoint(h, s));
        }
    }
    PolicyTree { contention_point: contention_point(dir), direction: dir, capacity, nodes }
}

pub fn parse_scope(scope: &str, topo: &Topology) -> Option<(Option<u32>, Option<Direction>)> {
    let parts: Vec<&str> = scope.split(':').collect();
    match parts.as_slice() {
        ["fabric"] => Some((None, None)),
        ["rack", r, d] => {
            let r: u32 = r.parse().ok()?;
            let d = match *d {
                "tx" => Direction::Tx,
                "rx" => Direction::Rx,
                _ => return None,
            };
            (r < topo.spec.racks).then_some((Some(r), Some(d)))
        }
        _ => None,
    }
}

fn check_scope(scope: &str, topo: &Topology) -> Result<(), ScenarioError> {
    match parse_scope(scope, topo) {
        Some(_) => Ok(()),
        None => invalid(format!("unknown scope {scope}")),
    }
}

pub(crate) mod opt_size {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => s.serialize_u64(*n),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "units::size")] u64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    const MIN: &str = r#"{"horizon": "1s", "services": [{"id": 1}]}"#;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let s = Scenario::from_json(MIN).unwrap();
        assert_eq!(s.brokers.rack_interval, NS_PER_SEC);
        assert_eq!(s.brokers.fabric_timeout, 50 * NS_PER_SEC);
        assert_eq!(s.burst(1), 64_000);
        assert_eq!(s.topology.racks, 9);
    }

    #[test]
    fn rejects_unknown_service_and_bad_link() {
        let bad = r#"{"horizon": "1s", "services": [{"id": 1}],
            "workloads": [{"kind": "cbr", "service": 2, "rate": "1G"}]}"#;
        assert!(matches!(Scenario::from_json(bad), Err(ScenarioError::Invalid(_))));
        let bad = r#"{"horizon": "1s", "services": [{"id": 1}],
            "events": [{"at": "1s", "kind": "link_toggle", "link": "rack:99:up", "up": false}]}"#;
        assert!(matches!(Scenario::from_json(bad), Err(ScenarioError::Invalid(_))));
        assert!(matches!(Scenario::from_json("{"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn policy_must_cover_services() {
        let bad = r#"{"horizon": "1s", "services": [{"id": 1}, {"id": 2}],
            "policies": [{"direction": "tx", "nodes": [{"id": 100}, {"id": 1, "parent": 100}]}]}"#;
        assert!(Scenario::from_json(bad).is_err());
    }

    #[test]
    fn expansion_makes_unique_leaves() {
        let s = Scenario::from_json(MIN).unwrap();
        let class = s.class_policy(&[], Direction::Tx, 0);
        let up = expand_policy(&class, Direction::Tx, 80_000_000_000, 0..10, &[1], &[10_000_000_000]);
        let down = expand_policy(&class, Direction::Rx, 80_000_000_000, 0..10, &[1], &[10_000_000_000]);
        assert!(validate_tree(&up).is_ok());
        let a: BTreeSet<_> = up.leaf_ids().into_iter().collect();
        let b: BTreeSet<_> = down.leaf_ids().into_iter().collect();
        assert_eq!(a.len(), 10);
        assert!(a.is_disjoint(&b));
    }
}
