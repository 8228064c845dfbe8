//! Everything a run records, the CSV writers, and the summary and assertion checks.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use bwbroker::latency::percentile;
use bwbroker::policy::{Direction, ServiceId};
use bwbroker::units::{Bps, Limit, Nanos, NS_PER_SEC};

use crate::scenario::{Assertion, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Rack(u32, Direction),
    Fabric,
}

impl Scope {
    pub fn name(&self) -> String {
        match self {
            Scope::Rack(r, Direction::Tx) => format!("rack:{r}:tx"),
            Scope::Rack(r, Direction::Rx) => format!("rack:{r}:rx"),
            Scope::Fabric => "fabric".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Scope> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["fabric"] => Some(Scope::Fabric),
            ["rack", r, "tx"] => r.parse().ok().map(|r| Scope::Rack(r, Direction::Tx)),
            ["rack", r, "rx"] => r.parse().ok().map(|r| Scope::Rack(r, Direction::Rx)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub id: u32,
    pub service: ServiceId,
    pub src: u32,
    pub dst: u32,
    pub size: u64,
    pub start: Nanos,
    pub finish: Option<Nanos>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocRow {
    pub time: Nanos,
    pub machine: u32,
    pub service: ServiceId,
    pub direction: Direction,
    pub demand: Bps,
    pub allocation: Bps,
    pub limited: bool,
    pub capacity: Bps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueRow {
    pub link: String,
    pub capacity: Bps,
    pub arrivals: u64,
    pub marked: u64,
    pub dropped: u64,
    pub tx_bytes: u64,
    pub max_bytes: u64,
    pub p50_packets: u64,
    pub p99_packets: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FabricRow {
    pub time: Nanos,
    pub rack: u32,
    pub service: ServiceId,
    pub limit: Limit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRow {
    pub time: Nanos,
    pub event: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TraceSet {
    pub horizon: Nanos,
    pub util_bin: Nanos,
    pub services: Vec<ServiceId>,
    pub scopes: Vec<Scope>,
    /// Bytes per bin.
    pub util: BTreeMap<(Scope, ServiceId), Vec<u64>>,
    pub flows: Vec<FlowRecord>,
    pub alloc: Vec<AllocRow>,
    pub queues: Vec<QueueRow>,
    pub queue_series: Vec<(Nanos, String, u64)>,
    pub fabric: Vec<FabricRow>,
    pub control: Vec<ControlRow>,
    /// (time, service, cap) for every fabric cap in force, for convergence reporting.
    pub cap_changes: Vec<(Nanos, ServiceId, Option<Bps>)>,
    pub events_processed: u64,
}

impl TraceSet {
    pub fn new(horizon: Nanos, util_bin: Nanos, services: Vec<ServiceId>, racks: u32) -> Self {
        let mut scopes = vec![Scope::Fabric];
        for r in 0..racks {
            scopes.push(Scope::Rack(r, Direction::Tx));
            scopes.push(Scope::Rack(r, Direction::Rx));
        }
        scopes.sort();
        let bins = horizon.div_ceil(util_bin) as usize;
        let mut util = BTreeMap::new();
        for &sc in &scopes {
            for &s in &services {
                util.insert((sc, s), vec![0; bins]);
            }
        }
        TraceSet {
            horizon,
            util_bin,
            services,
            scopes,
            util,
            flows: Vec::new(),
            alloc: Vec::new(),
            queues: Vec::new(),
            queue_series: Vec::new(),
            fabric: Vec::new(),
            control: Vec::new(),
            cap_changes: Vec::new(),
            events_processed: 0,
        }
    }

    pub fn bins(&self) -> usize {
        self.horizon.div_ceil(self.util_bin) as usize
    }

    #[inline]
    pub fn count(&mut self, scope: Scope, service: ServiceId, now: Nanos, bytes: u64) {
        let b = (now / self.util_bin) as usize;
        if let Some(v) = self.util.get_mut(&(scope, service)) {
            if b < v.len() {
                v[b] += bytes;
            }
        }
    }

    pub fn control(&mut self, time: Nanos, event: &'static str, detail: impl Into<String>) {
        self.control.push(ControlRow { time, event, detail: detail.into() });
    }

    /// Length of bin `b` in ns; the last bin may be cut short by the horizon.
    fn bin_len(&self, b: usize) -> Nanos {
        let start = b as Nanos * self.util_bin;
        (start + self.util_bin).min(self.horizon) - start
    }

    /// Utilization series in bits/s, one value per bin.
    pub fn series(&self, scope: Scope, service: Option<ServiceId>) -> Vec<f64> {
        (0..self.bins())
            .map(|b| {
                let bytes: u64 = match service {
                    Some(s) => self.util.get(&(scope, s)).map_or(0, |v| v[b]),
                    None => self.services.iter().map(|&s| self.util.get(&(scope, s)).map_or(0, |v| v[b])).sum(),
                };
                bytes as f64 * 8.0 * NS_PER_SEC as f64 / self.bin_len(b) as f64
            })
            .collect()
    }

    /// Mean over the bins lying wholly inside [from, to).
    pub fn mean_util(&self, scope: Scope, service: Option<ServiceId>, from: Nanos, to: Nanos) -> Option<f64> {
        let s = self.series(scope, service);
        let v: Vec<f64> = s
            .iter()
            .enumerate()
            .filter(|(b, _)| {
                let start = *b as Nanos * self.util_bin;
                start >= from && start + self.bin_len(*b) <= to
            })
            .map(|(_, &x)| x)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// FCTs in seconds of flows started in [from, to); unfinished flows are censored at the horizon.
    pub fn fct_values(&self, service: ServiceId, from: Nanos, to: Nanos) -> Vec<f64> {
        self.flows
            .iter()
            .filter(|f| f.service == service && f.start >= from && f.start < to)
            .map(|f| (f.finish.unwrap_or(self.horizon) - f.start) as f64 / NS_PER_SEC as f64)
            .collect()
    }

    pub fn evaluate(&self, metric: &Metric) -> Option<f64> {
        let win = |from: &Option<Nanos>, to: &Option<Nanos>| (from.unwrap_or(0), to.unwrap_or(self.horizon));
        match metric {
            Metric::MeanUtil { scope, service, from, to } => {
                let (a, b) = win(from, to);
                self.mean_util(Scope::parse(scope)?, *service, a, b)
            }
            Metric::P99Fct { service, from, to } => {
                let (a, b) = win(from, to);
                percentile(&self.fct_values(*service, a, b), 0.99)
            }
            Metric::MeanFct { service, from, to } => {
                let (a, b) = win(from, to);
                let v = self.fct_values(*service, a, b);
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            }
            Metric::Jain { scope, services, from, to } => {
                let (a, b) = win(from, to);
                let sc = Scope::parse(scope)?;
                let x: Option<Vec<f64>> = services.iter().map(|&s| self.mean_util(sc, Some(s), a, b)).collect();
                jain_index(&x?)
            }
            Metric::CompletedFlows { service } => Some(
                self.flows
                    .iter()
                    .filter(|f| f.finish.is_some() && service.is_none_or(|s| f.service == s))
                    .count() as f64,
            ),
            Metric::QueueP99 { link } => self.queues.iter().find(|q| &q.link == link).map(|q| q.p99_packets as f64),
        }
    }

    pub fn check(&self, assertions: &[Assertion]) -> Vec<AssertionResult> {
        assertions
            .iter()
            .map(|a| {
                let (min, max) = a.bounds().unwrap_or((None, None));
                let value = self.evaluate(&a.metric);
                let pass = value.is_some_and(|v| min.is_none_or(|m| v >= m) && max.is_none_or(|m| v <= m));
                AssertionResult { label: a.label(), value, min, max, pass }
            })
            .collect()
    }

    /// For each cap change, seconds until the fabric utilization bin first sits within 10% of the cap.
    pub fn convergence(&self) -> Vec<Convergence> {
        let mut out = Vec::new();
        for (k, &(at, service, cap)) in self.cap_changes.iter().enumerate() {
            let Some(cap) = cap else { continue };
            let until = self.cap_changes[k + 1..]
                .iter()
                .find(|c| c.1 == service)
                .map_or(self.horizon, |c| c.0);
            let s = self.series(Scope::Fabric, Some(service));
            let hit = s.iter().enumerate().find(|(b, &u)| {
                let t = *b as Nanos * self.util_bin;
                t >= at && t < until && (u - cap as f64).abs() <= 0.1 * cap as f64
            });
            out.push(Convergence {
                at_s: secs(at),
                service,
                cap_bits_per_s: cap,
                converged_after_s: hit.map(|(b, _)| secs(b as Nanos * self.util_bin - at)),
            });
        }
        out
    }

    pub fn summary(&self, name: Option<&str>, seed: u64, assertions: &[Assertion]) -> Summary {
        let mut services = BTreeMap::new();
        for &s in &self.services {
            let flows: Vec<&FlowRecord> = self.flows.iter().filter(|f| f.service == s).collect();
            let done: Vec<f64> =
                flows.iter().filter_map(|f| f.finish.map(|x| secs(x - f.start))).collect();
            services.insert(
                s.to_string(),
                ServiceSummary {
                    flows: flows.len(),
                    completed: done.len(),
                    mean_fct_s: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
                    p99_fct_s: percentile(&done, 0.99),
                    p99_fct_censored_s: percentile(&self.fct_values(s, 0, self.horizon), 0.99),
                    mean_fabric_bits_per_s: self.mean_util(Scope::Fabric, Some(s), 0, self.horizon).unwrap_or(0.0),
                },
            );
        }
        let mut jain = BTreeMap::new();
        for &sc in &self.scopes {
            let x: Vec<f64> =
                self.services.iter().filter_map(|&s| self.mean_util(sc, Some(s), 0, self.horizon)).collect();
            if x.iter().filter(|&&v| v > 0.0).count() >= 2 {
                jain.insert(sc.name(), jain_index(&x));
            }
        }
        let results = self.check(assertions);
        Summary {
            name: name.map(str::to_string),
            seed,
            horizon_s: secs(self.horizon),
            events_processed: self.events_processed,
            services,
            jain,
            convergence: self.convergence(),
            passed: results.iter().all(|r| r.pass),
            assertions: results,
        }
    }

    pub fn write_csvs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("util.csv"))?;
        w.write_record(["time_s", "scope", "service", "bits_per_s"])?;
        for b in 0..self.bins() {
            let t = fmt_secs(b as Nanos * self.util_bin);
            let len = self.bin_len(b) as u128;
            for &sc in &self.scopes {
                let name = sc.name();
                for &s in &self.services {
                    let bytes = self.util[&(sc, s)][b] as u128;
                    let bps = bytes * 8 * NS_PER_SEC as u128 / len;
                    w.write_record([t.as_str(), name.as_str(), &s.to_string(), &bps.to_string()])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("flows.csv"))?;
        w.write_record(["flow_id", "service", "src", "dst", "size_bytes", "start_s", "finish_s", "fct_s"])?;
        for f in &self.flows {
            let (fin, fct) = match f.finish {
                Some(x) => (fmt_secs(x), fmt_secs(x - f.start)),
                None => (String::new(), String::new()),
            };
            w.write_record([
                f.id.to_string(),
                f.service.to_string(),
                f.src.to_string(),
                f.dst.to_string(),
                f.size.to_string(),
                fmt_secs(f.start),
                fin,
                fct,
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("alloc.csv"))?;
        w.write_record(["time_s", "machine", "service", "demand", "allocation", "limited", "direction", "capacity"])?;
        for a in &self.alloc {
            w.write_record([
                fmt_secs(a.time),
                a.machine.to_string(),
                a.service.to_string(),
                a.demand.to_string(),
                a.allocation.to_string(),
                a.limited.to_string(),
                dir_name(a.direction).to_string(),
                a.capacity.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("queues.csv"))?;
        w.write_record([
            "link", "capacity", "arrivals", "marked", "dropped", "tx_bytes", "max_bytes", "p50_packets", "p99_packets",
        ])?;
        for q in &self.queues {
            w.write_record([
                q.link.clone(),
                q.capacity.to_string(),
                q.arrivals.to_string(),
                q.marked.to_string(),
                q.dropped.to_string(),
                q.tx_bytes.to_string(),
                q.max_bytes.to_string(),
                q.p50_packets.to_string(),
                q.p99_packets.to_string(),
            ])?;
        }
        w.flush()?;

        if !self.queue_series.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("queue_series.csv"))?;
            w.write_record(["time_s", "link", "bytes"])?;
            for (t, l, b) in &self.queue_series {
                w.write_record([fmt_secs(*t), l.clone(), b.to_string()])?;
            }
            w.flush()?;
        }

        let mut w = csv::Writer::from_path(dir.join("fabric.csv"))?;
        w.write_record(["time_s", "rack", "service", "limit"])?;
        for f in &self.fabric {
            let lim = match f.limit {
                Limit::Finite(x) => x.to_string(),
                Limit::Unlimited => "unlimited".into(),
            };
            w.write_record([fmt_secs(f.time), f.rack.to_string(), f.service.to_string(), lim])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("control.csv"))?;
        w.write_record(["time_s", "event", "detail"])?;
        for c in &self.control {
            w.write_record([fmt_secs(c.time).as_str(), c.event, c.detail.as_str()])?;
        }
        w.flush()
    }

    pub fn write_summary(&self, dir: &Path, summary: &Summary) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(summary).map_err(io::Error::other)?;
        fs::write(dir.join("summary.json"), text + "\n")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssertionResult {
    pub label: String,
    pub value: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServiceSummary {
    pub flows: usize,
    pub completed: usize,
    pub mean_fct_s: Option<f64>,
    pub p99_fct_s: Option<f64>,
    /// Counting unfinished flows as lasting to the horizon.
    pub p99_fct_censored_s: Option<f64>,
    pub mean_fabric_bits_per_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Convergence {
    pub at_s: f64,
    pub service: ServiceId,
    pub cap_bits_per_s: Bps,
    pub converged_after_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: Option<String>,
    pub seed: u64,
    pub horizon_s: f64,
    pub events_processed: u64,
    pub services: BTreeMap<String, ServiceSummary>,
    /// Jain's index across services, per scope that carried at least two of them.
    pub jain: BTreeMap<String, Option<f64>>,
    pub convergence: Vec<Convergence>,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

/// (Σx)² / (n·Σx²); `None` for an empty or all-zero sample.
pub fn jain_index(x: &[f64]) -> Option<f64> {
    let s: f64 = x.iter().sum();
    let q: f64 = x.iter().map(|v| v * v).sum();
    (!x.is_empty() && q > 0.0).then(|| s * s / (x.len() as f64 * q))
}

fn secs(t: Nanos) -> f64 {
    t as f64 / NS_PER_SEC as f64
}

fn fmt_secs(t: Nanos) -> String {
    format!("{}.{:09}", t / NS_PER_SEC, t % NS_PER_SEC)
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::Tx => "tx",
        Direction::Rx => "rx",
    }
}
