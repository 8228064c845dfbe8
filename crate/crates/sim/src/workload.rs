//! Traffic sources: long-lived meshes, open-loop RPCs, on-off and constant-rate UDP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use bwbroker::policy::ServiceId;
use bwbroker::units::{self, Bps, Nanos, NS_PER_SEC};

use crate::topology::Topology;

/// A set of hosts, by rack or by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HostSelector {
    All(AllHosts),
    Racks { racks: Vec<u32> },
    Hosts { hosts: Vec<u32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllHosts {
    All,
}

impl Default for HostSelector {
    fn default() -> Self {
        HostSelector::All(AllHosts::All)
    }
}

impl HostSelector {
    /// Sorted, deduplicated host ids; out-of-range entries are reported by `validate`.
    pub fn resolve(&self, topo: &Topology) -> Vec<u32> {
        let mut v: Vec<u32> = match self {
            HostSelector::All(_) => (0..topo.hosts()).collect(),
            HostSelector::Racks { racks } => racks.iter().flat_map(|&r| topo.hosts_in(r)).collect(),
            HostSelector::Hosts { hosts } => hosts.clone(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), String> {
        match self {
            HostSelector::All(_) => Ok(()),
            HostSelector::Racks { racks } => match racks.iter().find(|&&r| r >= topo.spec.racks) {
                Some(r) => Err(format!("rack {r} does not exist")),
                None if racks.is_empty() => Err("empty rack list".into()),
                None => Ok(()),
            },
            HostSelector::Hosts { hosts } => match hosts.iter().find(|&&h| h >= topo.hosts()) {
                Some(h) => Err(format!("host {h} does not exist")),
                None if hosts.is_empty() => Err("empty host list".into()),
                None => Ok(()),
            },
        }
    }
}

fn d_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// One long-lived TCP flow from every source to every destination
    /// (or to `fanout` random ones), excluding self pairs.
    LongLived {
        service: ServiceId,
        #[serde(default)]
        src: HostSelector,
        #[serde(default)]
        dst: HostSelector,
        #[serde(default)]
        fanout: Option<u32>,
        #[serde(default = "d_one")]
        flows_per_pair: u32,
        #[serde(default, with = "units::duration")]
        start: Nanos,
        #[serde(default, with = "opt_duration")]
        stop: Option<Nanos>,
    },
    /// Open-loop RPCs of fixed size; gaps are Uniform(0, 2·t_µ) with
    /// t_µ = size·8 / load.
    Rpc {
        service: ServiceId,
        #[serde(with = "units::size")]
        size: u64,
        /// Aggregate offered load, bits/s.
        #[serde(with = "units::rate")]
        load: Bps,
        #[serde(default)]
        src: HostSelector,
        #[serde(default)]
        dst: HostSelector,
        #[serde(default, with = "units::duration")]
        start: Nanos,
        #[serde(default, with = "opt_duration")]
        stop: Option<Nanos>,
    },
    /// UDP at `rate` while on, each on-period to a fresh random host in another rack.
    OnOff {
        service: ServiceId,
        #[serde(default)]
        src: HostSelector,
        #[serde(default)]
        dst: HostSelector,
        #[serde(with = "units::duration")]
        on: Nanos,
        #[serde(with = "units::duration")]
        off: Nanos,
        /// Defaults to the NIC rate.
        #[serde(default, with = "opt_rate")]
        rate: Option<Bps>,
        /// All sources share one phase; otherwise each starts at a random offset.
        #[serde(default)]
        sync: bool,
        #[serde(default, with = "units::duration")]
        start: Nanos,
        #[serde(default, with = "opt_duration")]
        stop: Option<Nanos>,
    },
    /// Constant-rate UDP from each source to one random destination.
    Cbr {
        service: ServiceId,
        #[serde(default)]
        src: HostSelector,
        #[serde(default)]
        dst: HostSelector,
        #[serde(with = "units::rate")]
        rate: Bps,
        #[serde(default, with = "units::duration")]
        start: Nanos,
        #[serde(default, with = "opt_duration")]
        stop: Option<Nanos>,
    },
}

impl WorkloadSpec {
    pub fn service(&self) -> ServiceId {
        match self {
            WorkloadSpec::LongLived { service, .. }
            | WorkloadSpec::Rpc { service, .. }
            | WorkloadSpec::OnOff { service, .. }
            | WorkloadSpec::Cbr { service, .. } => *service,
        }
    }

    pub fn selectors(&self) -> (&HostSelector, &HostSelector) {
        match self {
            WorkloadSpec::LongLived { src, dst, .. }
            | WorkloadSpec::Rpc { src, dst, .. }
            | WorkloadSpec::OnOff { src, dst, .. }
            | WorkloadSpec::Cbr { src, dst, .. } => (src, dst),
        }
    }

    pub fn window(&self) -> (Nanos, Option<Nanos>) {
        match self {
            WorkloadSpec::LongLived { start, stop, .. }
            | WorkloadSpec::Rpc { start, stop, .. }
            | WorkloadSpec::OnOff { start, stop, .. }
            | WorkloadSpec::Cbr { start, stop, .. } => (*start, *stop),
        }
    }
}

/// Mean RPC inter-arrival time t_µ = Z·8/(ρ·C), in seconds. `None` when ρ = 0.
pub fn rpc_mean_gap(size_bytes: u64, rho: f64, capacity: Bps) -> Option<f64> {
    (rho > 0.0).then(|| size_bytes as f64 * 8.0 / (rho * capacity as f64))
}

/// RPC start times with i.i.d. Uniform(0, 2·t_µ) gaps.
#[derive(Debug, Clone)]
pub struct RpcArrivals<R> {
    rng: R,
    mean_gap_ns: f64,
    next: f64,
}

impl<R: Rng> RpcArrivals<R> {
    pub fn new(size_bytes: u64, load: Bps, start: Nanos, rng: R) -> Option<Self> {
        let gap = rpc_mean_gap(size_bytes, 1.0, load)?;
        if !gap.is_finite() {
            return None;
        }
        let mut a = RpcArrivals { rng, mean_gap_ns: gap * NS_PER_SEC as f64, next: start as f64 };
        a.advance();
        Some(a)
    }

    fn advance(&mut self) {
        self.next += self.rng.gen_range(0.0..2.0 * self.mean_gap_ns);
    }

    pub fn rng(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> Iterator for RpcArrivals<R> {
    type Item = Nanos;

    fn next(&mut self) -> Option<Nanos> {
        let t = self.next.round() as Nanos;
        self.advance();
        Some(t)
    }
}

pub(crate) mod opt_duration {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Nanos>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => units::duration::serialize(n, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Nanos>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "units::duration")] Nanos);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

pub(crate) mod opt_rate {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Bps>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => units::rate::serialize(n, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Bps>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "units::rate")] Bps);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}
