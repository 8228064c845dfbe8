//! Cluster-wide limits for services capped across racks.
//!
//! One rack broker per rack (the lowest live machine id) keeps the peak
//! per-interval usage of each service over the fabric interval and reports it.
//! The fabric broker water-fills each capped service's global limit across racks
//! and pushes per-rack limits back.

use std::collections::{BTreeMap, BTreeSet};

use crate::allocator::{estimate_demand, water_fill, LeafRuntime};
use crate::policy::{MachineId, ServiceId};
use crate::rack_broker::{decode_entries, encode_entries, UsageEntry, UsageReport, WireError};
use crate::units::{Bps, Limit, Nanos, NS_PER_SEC, NS_PER_US};

/// `b"EEQL"` read as a little-endian u32.
pub const LIMIT_MAGIC: u32 = u32::from_le_bytes(*b"EEQL");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FabricError {
    #[error("rack has no live machines")]
    EmptyRack,
    #[error("rack {0} is unknown to the fabric broker")]
    UnknownRack(u32),
}

pub type RackId = u32;

/// The machine that speaks for its rack: the lowest live id.
pub fn leader_for(live: &BTreeSet<MachineId>) -> Result<MachineId, FabricError> {
    live.first().copied().ok_or(FabricError::EmptyRack)
}

/// Limits pushed to one rack. Unlimited travels as +inf.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPush {
    pub rack: RackId,
    pub timestamp_us: u64,
    pub limits: BTreeMap<ServiceId, Limit>,
}

pub fn encode_limits(p: &LimitPush) -> Result<Vec<u8>, WireError> {
    let e: Vec<(u32, f32)> = p
        .limits
        .iter()
        .map(|(&s, l)| (s, l.finite().map(|v| v as f32).unwrap_or(f32::INFINITY)))
        .collect();
    encode_entries(LIMIT_MAGIC, p.rack, p.timestamp_us, &e)
}

pub fn decode_limits(b: &[u8]) -> Result<LimitPush, WireError> {
    let (rack, timestamp_us, raw) = decode_entries(LIMIT_MAGIC, b)?;
    let mut limits = BTreeMap::new();
    for (s, v) in raw {
        let l = if v == f32::INFINITY {
            Limit::Unlimited
        } else if v >= 0.0 {
            Limit::Finite(v as Bps)
        } else {
            return Err(WireError::MalformedReport("negative or NaN limit"));
        };
        if limits.insert(s, l).is_some() {
            return Err(WireError::MalformedReport("duplicate service"));
        }
    }
    Ok(LimitPush { rack, timestamp_us, limits })
}

/// Leader-side peak tracker over one fabric interval.
#[derive(Debug, Clone, Default)]
pub struct UsageWindow {
    peak: BTreeMap<ServiceId, f64>,
}

impl UsageWindow {
    /// Folds in one rack interval's per-service usage.
    pub fn record(&mut self, usage: &BTreeMap<ServiceId, f64>) {
        for (&s, &u) in usage {
            let p = self.peak.entry(s).or_insert(0.0);
            *p = p.max(u);
        }
    }

    /// The window's report; the window restarts empty.
    pub fn take_report(&mut self, rack: RackId, now: Nanos) -> UsageReport {
        let entries = std::mem::take(&mut self.peak)
            .into_iter()
            .map(|(service, u)| UsageEntry { service, utilization: u as f32 })
            .collect();
        UsageReport { sender: rack, timestamp_us: now / NS_PER_US, entries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FabricBrokerConfig {
    pub interval: Nanos,
    /// Reports older than this no longer count.
    pub report_timeout: Nanos,
}

impl Default for FabricBrokerConfig {
    fn default() -> Self {
        FabricBrokerConfig { interval: 10 * NS_PER_SEC, report_timeout: 50 * NS_PER_SEC }
    }
}

#[derive(Debug, Clone)]
pub struct FabricBroker {
    pub config: FabricBrokerConfig,
    rack_links: BTreeMap<RackId, Bps>,
    caps: BTreeMap<ServiceId, Bps>,
    reports: BTreeMap<RackId, (UsageReport, Nanos)>,
    prev: BTreeMap<(RackId, ServiceId), LeafRuntime>,
}

impl FabricBroker {
    /// `rack_links` gives each rack's uplink capacity, the most any rack can use.
    pub fn new(rack_links: BTreeMap<RackId, Bps>, config: FabricBrokerConfig) -> Self {
        FabricBroker { config, rack_links, caps: BTreeMap::new(), reports: BTreeMap::new(), prev: BTreeMap::new() }
    }

    pub fn set_cap(&mut self, service: ServiceId, cap: Option<Bps>) {
        match cap {
            Some(c) => {
                self.caps.insert(service, c);
            }
            None => {
                self.caps.remove(&service);
                self.prev.retain(|k, _| k.1 != service);
            }
        }
    }

    pub fn caps(&self) -> &BTreeMap<ServiceId, Bps> {
        &self.caps
    }

    pub fn on_rack_report(&mut self, report: UsageReport, now: Nanos) -> Result<bool, FabricError> {
        if !self.rack_links.contains_key(&report.sender) {
            return Err(FabricError::UnknownRack(report.sender));
        }
        if let Some((held, _)) = self.reports.get(&report.sender) {
            if held.timestamp_us > report.timestamp_us {
                return Ok(false);
            }
        }
        self.reports.insert(report.sender, (report, now));
        Ok(true)
    }

    /// Splits each capped service's limit across racks by max-min over their peak demand.
    /// Racks that get all they asked for are left unlimited.
    pub fn fabric_tick(&mut self, now: Nanos) -> BTreeMap<(RackId, ServiceId), Limit> {
        let mut out = BTreeMap::new();
        let racks: Vec<RackId> = self.rack_links.keys().copied().collect();
        let mut next_prev = BTreeMap::new();
        for (&service, &cap) in &self.caps {
            let demands: Vec<Bps> = racks
                .iter()
                .map(|r| {
                    let usage = match self.reports.get(r) {
                        Some((rep, seen)) if now.saturating_sub(*seen) <= self.config.report_timeout => {
                            rep.usage(service).unwrap_or(0.0) as f64
                        }
                        _ => 0.0,
                    };
                    estimate_demand(usage.round() as Bps, self.prev.get(&(*r, service)))
                })
                .collect();
            let maxes: Vec<Limit> = racks.iter().map(|r| Limit::Finite(self.rack_links[r])).collect();
            let n = racks.len();
            let alloc = water_fill(&demands, &vec![1.0; n], &vec![0; n], &maxes, cap).expect("no guarantees");
            for (k, &r) in racks.iter().enumerate() {
                let d = maxes[k].cap(demands[k]);
                let limited = alloc[k] < d;
                next_prev.insert((r, service), LeafRuntime { capacity: alloc[k], allocation: alloc[k], demand: d, limited });
                out.insert((r, service), if limited { Limit::Finite(alloc[k]) } else { Limit::Unlimited });
            }
        }
        self.prev = next_prev;
        out
    }
}

/// The slice of a tick's output addressed to one rack.
pub fn limits_for_rack(all: &BTreeMap<(RackId, ServiceId), Limit>, rack: RackId) -> BTreeMap<ServiceId, Limit> {
    all.range((rack, 0)..=(rack, ServiceId::MAX)).map(|(&(_, s), &l)| (s, l)).collect()
}

/// Report traffic arriving at the fabric broker, in bits/s.
pub fn report_load(racks: u64, bytes_per_report: u64, interval: Nanos) -> f64 {
    racks as f64 * bytes_per_report as f64 * 8.0 / (interval as f64 / NS_PER_SEC as f64)
}
