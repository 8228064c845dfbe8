//! The event loop: hosts with shapers and transports, links, brokers and workloads.

use std::collections::VecDeque;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bwbroker::allocator::RuntimePolicy;
use bwbroker::fabric_broker::{limits_for_rack, FabricBroker, FabricBrokerConfig, UsageWindow};
use bwbroker::machine_shaper::{FeedbackPacket, InstallWatchdog, RateMeter, ServiceLimiter};
use bwbroker::policy::{Direction, PolicyTree, ServiceId};
use bwbroker::rack_broker::{collect_local_usage, Install, RackBroker, RackBrokerConfig};
use bwbroker::units::{Bps, Limit, Nanos, NS_PER_SEC};

use crate::engine::EventQueue;
use crate::link::{Enqueued, LinkId, LinkQueue, Packet, PacketKind};
use crate::scenario::{expand_policy, leaf_id, parse_link, EventKind, PolicySpec, Scenario, ScenarioError, ToggleTarget};
use crate::topology::{LinkKind, Topology};
use crate::trace::{AllocRow, FabricRow, FlowRecord, QueueRow, Scope, TraceSet};
use crate::transport::{AckOutcome, Flow, TransportConfig};
use crate::workload::{RpcArrivals, WorkloadSpec};

/// Packets a UDP sender may park in its shaper queue before its socket blocks.
const UDP_SNDBUF_PACKETS: u64 = 16;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
enum Ev {
    LinkDone(LinkId),
    Ack { flow: u32, cum: u64, ecn: bool, sent_at: Nanos },
    Rto(u32),
    Feedback { to: u32, from: u32, svc: u16, fb: FeedbackPacket },
    ShaperWake(u32),
    UdpSend { src: u32, gen: u32 },
    OnOff { src: u32, on: bool },
    UdpStop(u32),
    RpcArrival(u32),
    LongLivedStart(u32),
    LongLivedStop(u32),
    MeterTick(u32),
    RackReport,
    RackCompute,
    Watchdog(u32),
    FabricReport,
    FabricCompute,
    FabricExpire(u32),
    Scheduled(u32),
    QueueSample,
    StatsReset,
}

#[derive(Debug)]
struct DstQueue {
    svc: u16,
    dst: u32,
    pkts: VecDeque<Packet>,
    bytes: u64,
    active: bool,
    /// Destination bucket is known to be empty until then.
    not_before: Nanos,
    waiters: Vec<u32>,
}

struct Host {
    limiters: Vec<Option<ServiceLimiter>>,
    queues: Vec<DstQueue>,
    /// (svc, dst) -> index into `queues`.
    qidx: Vec<u32>,
    /// Active queues per service, in round-robin order.
    rr: Vec<VecDeque<u32>>,
    next_svc: usize,
    wake_at: Option<Nanos>,
    meters: Vec<Option<RateMeter>>,
    rx_cap: Vec<Bps>,
    tx_bytes: Vec<u64>,
    rx_bytes: Vec<u64>,
    last_report: Nanos,
    watchdog: InstallWatchdog,
    on_static: bool,
}

struct UdpSource {
    host: u32,
    svc: u16,
    rate: Bps,
    dsts: Vec<u32>,
    dst: u32,
    active: bool,
    blocked: bool,
    gen: u32,
    next_at: Nanos,
    on: Nanos,
    off: Nanos,
    stop: Nanos,
    rng: usize,
}

struct RpcSource {
    svc: u16,
    size: u64,
    srcs: Vec<u32>,
    dsts: Vec<u32>,
    arrivals: RpcArrivals<ChaCha8Rng>,
    stop: Nanos,
}

struct LongLived {
    svc: u16,
    pairs: Vec<(u32, u32)>,
    flows: Vec<u32>,
}

pub struct Simulator {
    scn: Scenario,
    topo: Topology,
    q: EventQueue<Ev>,
    links: Vec<LinkQueue>,
    hosts: Vec<Host>,
    services: Vec<ServiceId>,
    cfg: TransportConfig,
    flows: Vec<Flow>,
    udp: Vec<UdpSource>,
    rpc: Vec<RpcSource>,
    long_lived: Vec<LongLived>,
    rngs: Vec<ChaCha8Rng>,
    policies: Vec<PolicySpec>,
    trees: Vec<(PolicyTree, PolicyTree)>,
    brokers: Vec<Option<RackBroker>>,
    windows: Vec<UsageWindow>,
    fabric: Option<FabricBroker>,
    meter_interval: Nanos,
    meter_gen: u32,
    trace: TraceSet,
}

impl Simulator {
    pub fn new(scn: Scenario) -> Result<Self, ScenarioError> {
        scn.validate()?;
        let topo = Topology::new(scn.topology.clone());
        let services = scn.service_ids();
        let n_svc = services.len();
        let nh = topo.hosts() as usize;
        let ecn = Some(topo.spec.ecn_threshold);
        let limit = Some(topo.spec.queue_limit);
        let links = (0..topo.link_count() as LinkId)
            .map(|id| match topo.link_kind(id) {
                // The NIC is fed by the shaper, which never lets it back up.
                LinkKind::HostTx(_) => LinkQueue::new(topo.initial_capacity(id), None, None),
                _ => LinkQueue::new(topo.initial_capacity(id), ecn, limit),
            })
            .collect();
        let bursts: Vec<u64> = services.iter().map(|&s| scn.burst(s)).collect();
        let b = &scn.brokers;
        let hosts = (0..nh as u32)
            .map(|_| Host {
                limiters: (0..n_svc)
                    .map(|k| {
                        b.shaper.then(|| {
                            let l = ServiceLimiter::new(services[k], bursts[k], 0);
                            match b.ewha_gain {
                                Some(g) => l.with_ewha(g),
                                None => l,
                            }
                        })
                    })
                    .collect(),
                queues: Vec::new(),
                qidx: vec![NONE; n_svc * nh],
                rr: vec![VecDeque::new(); n_svc],
                next_svc: 0,
                wake_at: None,
                meters: (0..n_svc).map(|_| None).collect(),
                rx_cap: vec![topo.spec.nic_rate; n_svc],
                tx_bytes: vec![0; n_svc],
                rx_bytes: vec![0; n_svc],
                last_report: 0,
                watchdog: InstallWatchdog::new(b.rack_timeout),
                on_static: true,
            })
            .collect();
        let policies = scn.policies.clone();
        let trace = TraceSet::new(scn.horizon, scn.outputs.util_bin, services.clone(), topo.spec.racks);
        let mut sim = Simulator {
            cfg: TransportConfig { mss: topo.spec.mtu, ..TransportConfig::default() },
            q: EventQueue::new(),
            links,
            hosts,
            services,
            flows: Vec::new(),
            udp: Vec::new(),
            rpc: Vec::new(),
            long_lived: Vec::new(),
            rngs: Vec::new(),
            policies,
            trees: Vec::new(),
            brokers: Vec::new(),
            windows: Vec::new(),
            fabric: None,
            meter_interval: scn.brokers.meter_interval,
            meter_gen: 0,
            trace,
            topo,
            scn,
        };
        sim.build_trees();
        sim.build_brokers().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        sim.build_workloads();
        sim.schedule_initial();
        Ok(sim)
    }

    fn svc_index(&self, s: ServiceId) -> Option<usize> {
        self.services.binary_search(&s).ok()
    }

    fn build_trees(&mut self) {
        self.trees = (0..self.topo.spec.racks).map(|r| self.rack_trees(r)).collect();
    }

    fn rack_trees(&self, rack: u32) -> (PolicyTree, PolicyTree) {
        let cap = self.topo.rack_capacity(rack);
        let hosts = self.topo.hosts_in(rack);
        let nic = self.topo.spec.nic_rate;
        let leaf_max: Vec<Bps> = self
            .services
            .iter()
            .map(|id| {
                let spec = self.scn.services.iter().find(|s| s.id == *id);
                spec.and_then(|s| s.host_max).map_or(nic, |m| m.min(nic))
            })
            .collect();
        let up = self.scn.class_policy(&self.policies, Direction::Tx, rack);
        let down = self.scn.class_policy(&self.policies, Direction::Rx, rack);
        (
            expand_policy(&up, Direction::Tx, cap, hosts.clone(), &self.services, &leaf_max),
            expand_policy(&down, Direction::Rx, cap, hosts, &self.services, &leaf_max),
        )
    }

    fn build_brokers(&mut self) -> Result<(), bwbroker::rack_broker::RackError> {
        let b = self.scn.brokers.clone();
        let config = RackBrokerConfig { interval: b.rack_interval, timeout: b.rack_timeout, fabric_timeout: b.fabric_timeout };
        for h in 0..self.topo.hosts() {
            let r = self.topo.rack_of(h);
            let broker = if b.rack_broker {
                let (up, down) = self.trees[r as usize].clone();
                Some(RackBroker::new(h, self.topo.hosts_in(r), up, down, config)?)
            } else {
                None
            };
            self.brokers.push(broker);
            self.windows.push(UsageWindow::default());
        }
        if b.rack_broker && b.fabric_broker {
            let links = (0..self.topo.spec.racks).map(|r| (r, self.topo.rack_capacity(r))).collect();
            let mut fb = FabricBroker::new(
                links,
                FabricBrokerConfig { interval: b.fabric_interval, report_timeout: b.fabric_timeout },
            );
            for c in &self.scn.fabric_caps {
                fb.set_cap(c.service, Some(c.cap));
            }
            self.fabric = Some(fb);
        }
        for c in &self.scn.fabric_caps {
            self.trace.cap_changes.push((0, c.service, Some(c.cap)));
        }
        for h in 0..self.topo.hosts() {
            self.install_static(h, 0);
        }
        Ok(())
    }

    fn rng_for(&mut self, workload: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.scn.seed);
        rng.set_stream(workload as u64 + 1);
        self.rngs.push(rng);
        self.rngs.len() - 1
    }

    fn build_workloads(&mut self) {
        let horizon = self.scn.horizon;
        for (i, w) in self.scn.workloads.clone().iter().enumerate() {
            let svc = self.svc_index(w.service()).expect("validated") as u16;
            let (src, dst) = w.selectors();
            let srcs = src.resolve(&self.topo);
            let dsts = dst.resolve(&self.topo);
            let (start, stop) = w.window();
            let stop = stop.unwrap_or(horizon).min(horizon);
            let rng = self.rng_for(i);
            match w {
                WorkloadSpec::LongLived { fanout, flows_per_pair, .. } => {
                    let mut pairs = Vec::new();
                    for &s in &srcs {
                        let mut ds: Vec<u32> = dsts.iter().copied().filter(|&d| d != s).collect();
                        if let Some(k) = fanout {
                            ds.shuffle(&mut self.rngs[rng]);
                            ds.truncate(*k as usize);
                            ds.sort_unstable();
                        }
                        for d in ds {
                            pairs.extend(std::iter::repeat_n((s, d), *flows_per_pair as usize));
                        }
                    }
                    let id = self.long_lived.len() as u32;
                    self.long_lived.push(LongLived { svc, pairs, flows: Vec::new() });
                    self.q.schedule(start, Ev::LongLivedStart(id));
                    if stop < horizon {
                        self.q.schedule(stop, Ev::LongLivedStop(id));
                    }
                }
                WorkloadSpec::Rpc { size, load, .. } => {
                    let mut r = ChaCha8Rng::seed_from_u64(self.scn.seed);
                    r.set_stream(i as u64 + 1);
                    let Some(mut arrivals) = RpcArrivals::new(*size, *load, start, r) else { continue };
                    let first = arrivals.next().expect("endless");
                    let id = self.rpc.len() as u32;
                    self.rpc.push(RpcSource { svc, size: *size, srcs, dsts, arrivals, stop });
                    if first < stop {
                        self.q.schedule(first, Ev::RpcArrival(id));
                    }
                }
                WorkloadSpec::OnOff { on, off, rate, sync, .. } => {
                    let rate = rate.unwrap_or(self.topo.spec.nic_rate);
                    let period = on + off;
                    for &s in &srcs {
                        let ds: Vec<u32> = dsts
                            .iter()
                            .copied()
                            .filter(|&d| self.topo.rack_of(d) != self.topo.rack_of(s))
                            .collect();
                        if ds.is_empty() {
                            continue;
                        }
                        let phase = if *sync { 0 } else { self.rngs[rng].gen_range(0..period.max(1)) };
                        let id = self.udp.len() as u32;
                        self.udp.push(UdpSource {
                            host: s,
                            svc,
                            rate,
                            dst: ds[0],
                            dsts: ds,
                            active: false,
                            blocked: false,
                            gen: 0,
                            next_at: 0,
                            on: *on,
                            off: *off,
                            stop,
                            rng,
                        });
                        if start + phase < stop {
                            self.q.schedule(start + phase, Ev::OnOff { src: id, on: true });
                        }
                    }
                }
                WorkloadSpec::Cbr { rate, .. } => {
                    for &s in &srcs {
                        let ds: Vec<u32> = dsts.iter().copied().filter(|&d| d != s).collect();
                        if ds.is_empty() {
                            continue;
                        }
                        let d = *ds.choose(&mut self.rngs[rng]).expect("nonempty");
                        let id = self.udp.len() as u32;
                        self.udp.push(UdpSource {
                            host: s,
                            svc,
                            rate: *rate,
                            dst: d,
                            dsts: vec![d],
                            active: true,
                            blocked: false,
                            gen: 0,
                            next_at: start,
                            on: 0,
                            off: 0,
                            stop,
                            rng,
                        });
                        self.q.schedule(start, Ev::UdpSend { src: id, gen: 0 });
                        if stop < horizon {
                            self.q.schedule(stop, Ev::UdpStop(id));
                        }
                    }
                }
            }
        }
    }

    fn schedule_initial(&mut self) {
        let b = self.scn.brokers.clone();
        if b.shaper {
            self.q.schedule(self.meter_interval, Ev::MeterTick(0));
        }
        if b.rack_broker {
            self.q.schedule(b.rack_interval, Ev::RackReport);
            if self.fabric.is_some() {
                self.q.schedule(b.fabric_interval, Ev::FabricReport);
            }
        }
        for (i, e) in self.scn.events.iter().enumerate() {
            self.q.schedule(e.at, Ev::Scheduled(i as u32));
        }
        if let Some(p) = self.scn.outputs.queue_series {
            self.q.schedule(p, Ev::QueueSample);
        }
        if self.scn.outputs.stats_from > 0 {
            self.q.schedule(self.scn.outputs.stats_from, Ev::StatsReset);
        }
    }

    pub fn run(mut self) -> TraceSet {
        let horizon = self.scn.horizon;
        info!(
            "running {} for {}s: {} hosts, {} workloads",
            self.scn.name.as_deref().unwrap_or("scenario"),
            horizon as f64 / 1e9,
            self.topo.hosts(),
            self.scn.workloads.len()
        );
        while let Some(t) = self.q.peek_time() {
            if t >= horizon {
                break;
            }
            let (now, ev) = self.q.pop().expect("peeked");
            self.handle(now, ev);
        }
        self.finish()
    }

    fn finish(mut self) -> TraceSet {
        self.trace.events_processed = self.q.processed();
        for f in &self.flows {
            if let Some(size) = f.size {
                self.trace.flows.push(FlowRecord {
                    id: f.id,
                    service: self.services[f.service as usize],
                    src: f.src,
                    dst: f.dst,
                    size,
                    start: f.start,
                    finish: f.finish.filter(|&x| x <= self.scn.horizon),
                });
            }
        }
        for (id, l) in self.links.iter().enumerate() {
            self.trace.queues.push(QueueRow {
                link: self.topo.link_name(id as LinkId),
                capacity: l.capacity,
                arrivals: l.stats.arrivals,
                marked: l.stats.marked,
                dropped: l.stats.dropped,
                tx_bytes: l.stats.tx_bytes,
                max_bytes: l.stats.max_bytes,
                p50_packets: l.stats.occupancy_quantile(0.5),
                p99_packets: l.stats.occupancy_quantile(0.99),
            });
        }
        info!("done: {} events", self.trace.events_processed);
        self.trace
    }

    fn handle(&mut self, now: Nanos, ev: Ev) {
        match ev {
            Ev::LinkDone(l) => self.link_done(l, now),
            Ev::Ack { flow, cum, ecn, sent_at } => self.on_ack(flow, cum, ecn, sent_at, now),
            Ev::Rto(f) => self.on_rto(f, now),
            Ev::Feedback { to, from, svc, fb } => self.on_feedback(to, from, svc, fb, now),
            Ev::ShaperWake(h) => {
                let host = &mut self.hosts[h as usize];
                if host.wake_at == Some(now) {
                    host.wake_at = None;
                }
                self.dispatch(h, now);
            }
            Ev::UdpSend { src, gen } => self.udp_send(src, gen, now),
            Ev::OnOff { src, on } => self.on_off(src, on, now),
            Ev::UdpStop(src) => {
                let u = &mut self.udp[src as usize];
                u.active = false;
                u.gen += 1;
            }
            Ev::RpcArrival(w) => self.rpc_arrival(w, now),
            Ev::LongLivedStart(w) => {
                let ll = &self.long_lived[w as usize];
                let (svc, pairs) = (ll.svc, ll.pairs.clone());
                for (s, d) in pairs {
                    let f = self.new_flow(svc, s, d, None, now);
                    self.long_lived[w as usize].flows.push(f);
                }
            }
            Ev::LongLivedStop(w) => {
                for &f in &self.long_lived[w as usize].flows {
                    self.flows[f as usize].stopped = true;
                }
            }
            Ev::MeterTick(gen) => {
                if gen != self.meter_gen {
                    return;
                }
                for host in &mut self.hosts {
                    for m in host.meters.iter_mut().flatten() {
                        m.meter_update();
                    }
                }
                self.q.schedule(now + self.meter_interval, Ev::MeterTick(gen));
            }
            Ev::RackReport => self.rack_report(now),
            Ev::RackCompute => self.rack_compute(now),
            Ev::Watchdog(h) => {
                let host = &self.hosts[h as usize];
                if !host.on_static && host.watchdog.expired(now) {
                    self.trace.control(now, "static_fallback", format!("host {h}"));
                    self.install_static(h, now);
                }
            }
            Ev::FabricReport => self.fabric_report(now),
            Ev::FabricCompute => self.fabric_compute(now),
            Ev::FabricExpire(h) => self.expire_fabric(h, now),
            Ev::Scheduled(i) => self.scheduled(i as usize, now),
            Ev::QueueSample => {
                for r in 0..self.topo.spec.racks {
                    for kind in [LinkKind::RackUp(r), LinkKind::RackDown(r)] {
                        let id = self.topo.link_id(kind);
                        let bytes = self.links[id as usize].bytes_queued();
                        self.trace.queue_series.push((now, self.topo.link_name(id), bytes));
                    }
                }
                let p = self.scn.outputs.queue_series.expect("sampling enabled");
                self.q.schedule(now + p, Ev::QueueSample);
            }
            Ev::StatsReset => {
                for l in &mut self.links {
                    l.reset_stats();
                }
            }
        }
    }

    // ---- links ----

    fn enqueue_link(&mut self, l: LinkId, pkt: Packet, now: Nanos) {
        let link = &mut self.links[l as usize];
        if let Enqueued::Queued(true) = link.enqueue(pkt) {
            if let Some(done) = link.start(now) {
                self.q.schedule(done, Ev::LinkDone(l));
            }
        }
    }

    fn link_done(&mut self, l: LinkId, now: Nanos) {
        let link = &mut self.links[l as usize];
        let mut pkt = link.complete();
        if let Some(done) = link.start(now) {
            self.q.schedule(done, Ev::LinkDone(l));
        }
        let svc = self.services[pkt.service as usize];
        match self.topo.link_kind(l) {
            LinkKind::RackUp(r) => {
                self.trace.count(Scope::Rack(r, Direction::Tx), svc, now, pkt.bytes as u64);
                self.trace.count(Scope::Fabric, svc, now, pkt.bytes as u64);
            }
            LinkKind::RackDown(r) => self.trace.count(Scope::Rack(r, Direction::Rx), svc, now, pkt.bytes as u64),
            _ => {}
        }
        pkt.hop += 1;
        match pkt.next_link() {
            Some(next) => self.enqueue_link(next, pkt, now),
            None => self.deliver(pkt, now),
        }
        if let LinkKind::HostTx(h) = self.topo.link_kind(l) {
            self.dispatch(h, now);
        }
    }

    /// Receiver side. Runs when the last hop finishes; propagation is folded into the return path.
    fn deliver(&mut self, pkt: Packet, now: Nanos) {
        let h = pkt.dst as usize;
        let k = pkt.service as usize;
        let prop = self.topo.path_delay(pkt.src, pkt.dst);
        self.hosts[h].rx_bytes[k] += pkt.bytes as u64;
        if self.scn.brokers.shaper {
            let (svc_id, cap, nic, interval, alpha) = (
                self.services[k],
                self.hosts[h].rx_cap[k],
                self.topo.spec.nic_rate,
                self.meter_interval,
                self.scn.brokers.alpha,
            );
            let meter = self.hosts[h].meters[k].get_or_insert_with(|| {
                let mut m = RateMeter::new(svc_id, cap, nic, interval);
                m.alpha = alpha;
                m
            });
            for fb in meter.on_packet_received(pkt.src, pkt.bytes as u64, pkt.ecn) {
                self.q.schedule(now + 2 * prop, Ev::Feedback { to: pkt.src, from: pkt.dst, svc: k as u16, fb });
            }
        }
        if pkt.kind == PacketKind::Tcp {
            let f = &mut self.flows[pkt.flow as usize];
            let cum = f.on_data(pkt.seq, pkt.bytes);
            if f.finish.is_none() && f.received_all() {
                f.finish = Some(now + prop);
            }
            self.q.schedule(now + 2 * prop, Ev::Ack { flow: pkt.flow, cum, ecn: pkt.ecn, sent_at: pkt.sent_at });
        }
    }

    // ---- shaper ----

    fn queue_for(&mut self, h: u32, svc: u16, dst: u32) -> u32 {
        let nh = self.topo.hosts() as usize;
        let host = &mut self.hosts[h as usize];
        let slot = svc as usize * nh + dst as usize;
        if host.qidx[slot] == NONE {
            host.qidx[slot] = host.queues.len() as u32;
            host.queues.push(DstQueue {
                svc,
                dst,
                pkts: VecDeque::new(),
                bytes: 0,
                active: false,
                not_before: 0,
                waiters: Vec::new(),
            });
        }
        host.qidx[slot]
    }

    fn shaper_enqueue(&mut self, pkt: Packet) {
        let qi = self.queue_for(pkt.src, pkt.service as u16, pkt.dst);
        let host = &mut self.hosts[pkt.src as usize];
        let q = &mut host.queues[qi as usize];
        q.bytes += pkt.bytes as u64;
        q.pkts.push_back(pkt);
        if !q.active {
            q.active = true;
            host.rr[q.svc as usize].push_back(qi);
        }
    }

    /// Moves packets from the shaper queues onto the NIC while limiters allow
    /// and the NIC has room; otherwise arms a wake-up.
    fn dispatch(&mut self, h: u32, now: Nanos) {
        let nic = self.topo.link_id(LinkKind::HostTx(h));
        let mtu = self.topo.spec.mtu as u64;
        let backlog = 2 * mtu;
        let n_svc = self.services.len();
        loop {
            if self.links[nic as usize].bytes_queued() >= backlog {
                return;
            }
            let mut earliest = Nanos::MAX;
            let mut sent = None;
            let host = &mut self.hosts[h as usize];
            for step in 0..n_svc {
                let k = (host.next_svc + step) % n_svc;
                let Some(&first) = host.rr[k].front() else { continue };
                let head_bytes = host.queues[first as usize].pkts.front().expect("active queue").bytes as u64;
                if let Some(l) = host.limiters[k].as_mut() {
                    let at = l.root_ready_at(head_bytes, now).unwrap_or(Nanos::MAX);
                    if at > now {
                        earliest = earliest.min(at);
                        continue;
                    }
                }
                for _ in 0..host.rr[k].len() {
                    let qi = host.rr[k].pop_front().expect("counted");
                    let q = &mut host.queues[qi as usize];
                    let bytes = q.pkts.front().expect("active queue").bytes as u64;
                    let mut ok = true;
                    if let Some(l) = host.limiters[k].as_mut() {
                        if q.not_before > now {
                            ok = false;
                            earliest = earliest.min(q.not_before);
                        } else {
                            let at = l.dest_ready_at(q.dst, bytes, now).unwrap_or(Nanos::MAX);
                            if at > now {
                                q.not_before = at;
                                earliest = earliest.min(at);
                                ok = false;
                            } else {
                                l.try_send(q.dst, bytes, now).expect("checked ready");
                            }
                        }
                    }
                    if !ok {
                        host.rr[k].push_back(qi);
                        continue;
                    }
                    let mut pkt = q.pkts.pop_front().expect("active queue");
                    q.bytes -= pkt.bytes as u64;
                    if q.pkts.is_empty() {
                        q.active = false;
                    } else {
                        host.rr[k].push_back(qi);
                    }
                    let wake = if q.bytes + mtu <= UDP_SNDBUF_PACKETS * mtu {
                        std::mem::take(&mut q.waiters)
                    } else {
                        Vec::new()
                    };
                    host.tx_bytes[k] += pkt.bytes as u64;
                    pkt.sent_at = now;
                    host.next_svc = (k + 1) % n_svc;
                    sent = Some((pkt, wake));
                    break;
                }
                if sent.is_some() {
                    break;
                }
            }
            match sent {
                Some((pkt, wake)) => {
                    for src in wake {
                        let u = &mut self.udp[src as usize];
                        if u.blocked {
                            u.blocked = false;
                            let gen = u.gen;
                            self.q.schedule(u.next_at.max(now), Ev::UdpSend { src, gen });
                        }
                    }
                    if pkt.kind == PacketKind::Tcp {
                        let f = &mut self.flows[pkt.flow as usize];
                        f.in_shaper -= 1;
                    }
                    self.enqueue_link(nic, pkt, now);
                }
                None => {
                    if earliest != Nanos::MAX {
                        let host = &mut self.hosts[h as usize];
                        if host.wake_at.is_none_or(|w| w > earliest || w < now) {
                            host.wake_at = Some(earliest);
                            self.q.schedule(earliest, Ev::ShaperWake(h));
                        }
                    }
                    return;
                }
            }
        }
    }

    fn on_feedback(&mut self, to: u32, from: u32, svc: u16, fb: FeedbackPacket, now: Nanos) {
        let nh = self.topo.hosts() as usize;
        let host = &mut self.hosts[to as usize];
        let Some(l) = host.limiters[svc as usize].as_mut() else { return };
        l.on_feedback(from, &fb, now);
        let qi = host.qidx[svc as usize * nh + from as usize];
        if qi != NONE {
            let q = &mut host.queues[qi as usize];
            q.not_before = 0;
            if q.active {
                self.dispatch(to, now);
            }
        }
    }

    /// Applies a broker's settings to a host's limiters and meters.
    fn apply_installs(&mut self, h: u32, installs: &[Install], now: Nanos) {
        if !self.scn.brokers.shaper {
            return;
        }
        let nic = self.topo.spec.nic_rate;
        for inst in installs {
            let Some(k) = inst.service.and_then(|s| self.svc_index(s)) else { continue };
            let host = &mut self.hosts[h as usize];
            match inst.direction {
                Direction::Tx => {
                    // A static cap below line rate is enforced even when no contention limit applies.
                    let rate = (inst.limited || inst.capacity < nic).then_some(inst.capacity);
                    if let Some(l) = host.limiters[k].as_mut() {
                        if l.root_rate() != rate {
                            l.set_root_rate(rate, now);
                        }
                    }
                }
                Direction::Rx => {
                    host.rx_cap[k] = inst.capacity;
                    if let Some(m) = host.meters[k].as_mut() {
                        m.set_capacity(inst.capacity);
                    }
                }
            }
        }
        self.dispatch(h, now);
    }

    fn static_installs(&self, h: u32) -> Vec<Install> {
        let (up, down) = &self.trees[self.topo.rack_of(h) as usize];
        let mut out = Vec::new();
        for (dir, tree) in [(Direction::Tx, up), (Direction::Rx, down)] {
            let rp = RuntimePolicy::static_policy(tree).expect("validated tree");
            for (leaf, node) in tree.leaves_of(h) {
                out.push(Install {
                    leaf,
                    service: node.service,
                    direction: dir,
                    capacity: rp.leaves[&leaf].capacity,
                    limited: false,
                });
            }
        }
        out
    }

    fn install_static(&mut self, h: u32, now: Nanos) {
        let inst = self.static_installs(h);
        self.apply_installs(h, &inst, now);
        let host = &mut self.hosts[h as usize];
        host.on_static = true;
        host.watchdog.clear();
    }

    fn install_from_broker(&mut self, h: u32, now: Nanos, record: bool) {
        let Some(b) = self.brokers[h as usize].as_ref() else { return };
        let installs = b.local_installs();
        if record {
            let up = b.uplink_policy();
            let down = b.downlink_policy();
            for i in &installs {
                let rp = match i.direction {
                    Direction::Tx => &up,
                    Direction::Rx => down,
                };
                let Some(l) = rp.get(i.leaf) else { continue };
                self.trace.alloc.push(AllocRow {
                    time: now,
                    machine: h,
                    service: i.service.unwrap_or(i.leaf),
                    direction: i.direction,
                    demand: l.demand,
                    allocation: l.allocation,
                    limited: i.limited,
                    capacity: i.capacity,
                });
            }
        }
        self.apply_installs(h, &installs, now);
        let host = &mut self.hosts[h as usize];
        host.on_static = false;
        host.watchdog.installed(now);
        if let Some(t) = host.watchdog.expires_at() {
            self.q.schedule(t, Ev::Watchdog(h));
        }
    }

    // ---- transport ----

    fn new_flow(&mut self, svc: u16, src: u32, dst: u32, size: Option<u64>, now: Nanos) -> u32 {
        let id = self.flows.len() as u32;
        self.flows.push(Flow::new(id, svc as u32, src, dst, size, now, &self.cfg));
        self.pump(id, now);
        id
    }

    fn pump(&mut self, id: u32, now: Nanos) {
        let cfg = self.cfg;
        let f = &self.flows[id as usize];
        let (src, dst, svc) = (f.src, f.dst, f.service);
        let (route, route_len) = self.topo.route(src, dst);
        let mut any = false;
        while let Some((seq, bytes)) = self.flows[id as usize].next_segment(&cfg) {
            self.flows[id as usize].in_shaper += 1;
            any = true;
            let pkt = Packet {
                kind: PacketKind::Tcp,
                flow: id,
                src,
                dst,
                service: svc,
                bytes,
                seq,
                sent_at: now,
                ecn: false,
                hop: 0,
                route_len,
                route,
            };
            self.shaper_enqueue(pkt);
        }
        let f = &mut self.flows[id as usize];
        if any {
            f.rto_deadline = now + f.rto;
            if !f.rto_armed {
                f.rto_armed = true;
                self.q.schedule(f.rto_deadline, Ev::Rto(id));
            }
            self.dispatch(src, now);
        }
    }

    fn on_ack(&mut self, id: u32, cum: u64, ecn: bool, sent_at: Nanos, now: Nanos) {
        let cfg = self.cfg;
        let f = &mut self.flows[id as usize];
        match f.on_ack(cum, ecn, sent_at, now, &cfg) {
            AckOutcome::Duplicate => {}
            AckOutcome::Complete => {}
            AckOutcome::Progress => {
                f.rto_deadline = now + f.rto;
                self.pump(id, now);
            }
        }
    }

    fn on_rto(&mut self, id: u32, now: Nanos) {
        let cfg = self.cfg;
        let f = &mut self.flows[id as usize];
        f.rto_armed = false;
        if f.done() || (f.size.is_some_and(|s| f.acked >= s)) || f.in_flight() == 0 {
            return;
        }
        if now < f.rto_deadline {
            f.rto_armed = true;
            self.q.schedule(f.rto_deadline, Ev::Rto(id));
            return;
        }
        let fired = f.on_timeout(&cfg);
        if fired {
            debug!("flow {id} timed out at {now}");
        }
        f.rto_deadline = now + f.rto;
        f.rto_armed = true;
        self.q.schedule(f.rto_deadline, Ev::Rto(id));
        if fired {
            self.pump(id, now);
        }
    }

    // ---- workloads ----

    fn rpc_arrival(&mut self, w: u32, now: Nanos) {
        let src_rpc = &mut self.rpc[w as usize];
        let rng = src_rpc.arrivals.rng();
        let s = *src_rpc.srcs.choose(rng).expect("validated");
        let mut d = s;
        while d == s {
            d = *src_rpc.dsts.choose(rng).expect("validated");
            if src_rpc.dsts.len() == 1 && d == s {
                break;
            }
        }
        let (svc, size, stop) = (src_rpc.svc, src_rpc.size, src_rpc.stop);
        let next = src_rpc.arrivals.next().expect("endless");
        if d != s {
            self.new_flow(svc, s, d, Some(size), now);
        }
        if next < stop {
            self.q.schedule(next, Ev::RpcArrival(w));
        }
    }

    fn on_off(&mut self, src: u32, on: bool, now: Nanos) {
        let u = &mut self.udp[src as usize];
        u.gen += 1;
        if on {
            if now >= u.stop {
                u.active = false;
                return;
            }
            u.active = true;
            u.blocked = false;
            u.dst = *u.dsts.choose(&mut self.rngs[u.rng]).expect("nonempty");
            u.next_at = now;
            let gen = u.gen;
            let off_at = now + u.on;
            self.q.schedule(now, Ev::UdpSend { src, gen });
            self.q.schedule(off_at.min(u.stop), Ev::OnOff { src, on: false });
        } else {
            u.active = false;
            let next = now + u.off;
            if next < u.stop && now < u.stop {
                self.q.schedule(next, Ev::OnOff { src, on: true });
            }
        }
    }

    fn udp_send(&mut self, src: u32, gen: u32, now: Nanos) {
        let mtu = self.topo.spec.mtu;
        let u = &self.udp[src as usize];
        if !u.active || u.gen != gen || u.blocked {
            return;
        }
        if now < u.next_at {
            self.q.schedule(u.next_at, Ev::UdpSend { src, gen });
            return;
        }
        let (h, svc, dst, rate) = (u.host, u.svc, u.dst, u.rate);
        let qi = self.queue_for(h, svc, dst);
        let q = &mut self.hosts[h as usize].queues[qi as usize];
        if q.bytes + mtu as u64 > UDP_SNDBUF_PACKETS * mtu as u64 {
            q.waiters.push(src);
            self.udp[src as usize].blocked = true;
            return;
        }
        let (route, route_len) = self.topo.route(h, dst);
        self.shaper_enqueue(Packet {
            kind: PacketKind::Udp,
            flow: src,
            src: h,
            dst,
            service: svc as u32,
            bytes: mtu,
            seq: 0,
            sent_at: now,
            ecn: false,
            hop: 0,
            route_len,
            route,
        });
        let gap = (mtu as u128 * 8 * NS_PER_SEC as u128).div_ceil(rate as u128) as Nanos;
        let u = &mut self.udp[src as usize];
        u.next_at = now + gap;
        self.q.schedule(u.next_at, Ev::UdpSend { src, gen });
        self.dispatch(h, now);
    }

    // ---- brokers ----

    fn broker_alive(&self, h: u32) -> bool {
        self.brokers[h as usize].is_some()
    }

    fn rack_report(&mut self, now: Nanos) {
        let n_svc = self.services.len();
        for h in 0..self.topo.hosts() {
            let host = &mut self.hosts[h as usize];
            let interval = (now - host.last_report).max(1);
            host.last_report = now;
            let tx = std::mem::replace(&mut host.tx_bytes, vec![0; n_svc]);
            let rx = std::mem::replace(&mut host.rx_bytes, vec![0; n_svc]);
            if !self.broker_alive(h) {
                continue;
            }
            let mut by_leaf = std::collections::BTreeMap::new();
            for k in 0..n_svc {
                by_leaf.insert(leaf_id(h, k, n_svc, Direction::Tx), tx[k]);
                by_leaf.insert(leaf_id(h, k, n_svc, Direction::Rx), rx[k]);
            }
            let report = collect_local_usage(h, &by_leaf, interval, now);
            for peer in self.topo.hosts_in(self.topo.rack_of(h)) {
                if let Some(b) = self.brokers[peer as usize].as_mut() {
                    b.on_report(report.clone(), now).expect("peer in rack");
                }
            }
        }
        self.q.schedule(now + self.scn.brokers.compute_delay, Ev::RackCompute);
        self.q.schedule(now + self.scn.brokers.rack_interval, Ev::RackReport);
    }

    fn rack_compute(&mut self, now: Nanos) {
        let idle = self.scn.brokers.limiter_idle.unwrap_or(10 * self.scn.brokers.rack_interval);
        for h in 0..self.topo.hosts() {
            if !self.broker_alive(h) {
                continue;
            }
            self.expire_fabric(h, now);
            let b = self.brokers[h as usize].as_mut().expect("alive");
            b.tick(now).expect("validated policy");
            let usage = b.class_usage(now);
            self.windows[h as usize].record(&usage);
            self.install_from_broker(h, now, true);
            for l in self.hosts[h as usize].limiters.iter_mut().flatten() {
                l.collect_idle(now, idle);
            }
        }
    }

    fn fabric_report(&mut self, now: Nanos) {
        for r in 0..self.topo.spec.racks {
            let mut leader = None;
            for h in self.topo.hosts_in(r) {
                if !self.broker_alive(h) {
                    continue;
                }
                let report = self.windows[h as usize].take_report(r, now);
                if leader.is_none() {
                    leader = Some(report);
                }
            }
            if let (Some(report), Some(fb)) = (leader, self.fabric.as_mut()) {
                fb.on_rack_report(report, now).expect("known rack");
            }
        }
        if self.fabric.is_some() {
            self.q.schedule(now + self.scn.brokers.compute_delay, Ev::FabricCompute);
        }
        self.q.schedule(now + self.scn.brokers.fabric_interval, Ev::FabricReport);
    }

    fn fabric_compute(&mut self, now: Nanos) {
        let Some(fb) = self.fabric.as_mut() else { return };
        let limits = fb.fabric_tick(now);
        if limits.is_empty() {
            return;
        }
        for r in 0..self.topo.spec.racks {
            let lr = limits_for_rack(&limits, r);
            for (&s, &limit) in &lr {
                self.trace.fabric.push(FabricRow { time: now, rack: r, service: s, limit });
            }
            let mut pushed = false;
            for h in self.topo.hosts_in(r) {
                let Some(b) = self.brokers[h as usize].as_mut() else { continue };
                b.apply_fabric_limits(lr.clone(), now);
                pushed = true;
                let at = b.fabric_expiry().expect("just heard");
                self.q.schedule(at, Ev::FabricExpire(h));
                self.install_from_broker(h, now, false);
            }
            if pushed {
                let finite = lr.values().filter(|l| matches!(l, Limit::Finite(_))).count();
                self.trace.control(now, "fabric_push", format!("rack {r} limited_services {finite}"));
            }
        }
    }

    fn expire_fabric(&mut self, h: u32, now: Nanos) {
        let Some(b) = self.brokers[h as usize].as_mut() else { return };
        if b.fabric_expiry().is_some_and(|t| now >= t) && b.expire_fabric(now) {
            let r = self.topo.rack_of(h);
            self.trace.control(now, "fabric_expire", format!("rack {r} host {h}"));
            self.install_from_broker(h, now, false);
        }
    }

    // ---- scheduled events ----

    fn scheduled(&mut self, i: usize, now: Nanos) {
        let kind = self.scn.events[i].kind.clone();
        match kind {
            EventKind::FabricCap { service, cap } => {
                if let Some(fb) = self.fabric.as_mut() {
                    fb.set_cap(service, cap);
                }
                self.trace.cap_changes.push((now, service, cap));
                let c = cap.map_or("none".to_string(), |c| c.to_string());
                self.trace.control(now, "fabric_cap", format!("service {service} cap {c}"));
            }
            EventKind::RackPolicy(p) => {
                self.trace.control(now, "rack_policy", format!("{:?} racks {:?}", p.direction, p.racks));
                self.policies.push(p);
                self.refresh_trees();
            }
            EventKind::LinkToggle { link, up } => {
                let target = parse_link(&link, &self.topo).expect("validated");
                self.toggle(target, up, now);
                self.trace.control(now, "link_toggle", format!("{link} {}", if up { "up" } else { "down" }));
            }
            EventKind::KillRackBroker { host } => {
                self.brokers[host as usize] = None;
                self.trace.control(now, "kill_rack_broker", format!("host {host}"));
            }
            EventKind::KillFabricBroker => {
                self.fabric = None;
                self.trace.control(now, "kill_fabric_broker", "");
            }
            EventKind::MeterInterval { interval } => {
                self.meter_interval = interval;
                self.meter_gen += 1;
                for host in &mut self.hosts {
                    for m in host.meters.iter_mut().flatten() {
                        m.interval = interval;
                    }
                }
                if self.scn.brokers.shaper {
                    self.q.schedule(now + interval, Ev::MeterTick(self.meter_gen));
                }
                self.trace.control(now, "meter_interval", format!("{interval}ns"));
            }
        }
    }

    /// Rebuilds every rack's trees from the current policies and capacities.
    fn refresh_trees(&mut self) {
        self.build_trees();
        for h in 0..self.topo.hosts() {
            let r = self.topo.rack_of(h) as usize;
            let (up, down) = self.trees[r].clone();
            if let Some(b) = self.brokers[h as usize].as_mut() {
                b.set_policy(Direction::Tx, up).expect("validated policy");
                b.set_policy(Direction::Rx, down).expect("validated policy");
            }
        }
    }

    fn toggle(&mut self, target: ToggleTarget, up: bool, now: Nanos) {
        let nic = self.topo.spec.nic_rate;
        let mut set = Vec::new();
        match target {
            ToggleTarget::HostTx(h) => set.push((self.topo.link_id(LinkKind::HostTx(h)), if up { nic } else { 0 })),
            ToggleTarget::HostRx(h) => set.push((self.topo.link_id(LinkKind::HostRx(h)), if up { nic } else { 0 })),
            ToggleTarget::RackUp(r) => {
                let c = if up { self.topo.rack_capacity(r) } else { 0 };
                set.push((self.topo.link_id(LinkKind::RackUp(r)), c));
            }
            ToggleTarget::RackDown(r) => {
                let c = if up { self.topo.rack_capacity(r) } else { 0 };
                set.push((self.topo.link_id(LinkKind::RackDown(r)), c));
            }
            ToggleTarget::Spine(r, k) => {
                self.topo.spine_up[r as usize][k as usize] = up;
                let c = self.topo.rack_capacity(r);
                set.push((self.topo.link_id(LinkKind::RackUp(r)), c));
                set.push((self.topo.link_id(LinkKind::RackDown(r)), c));
                self.refresh_trees();
            }
        }
        for (l, c) in set {
            let link = &mut self.links[l as usize];
            link.set_capacity(c);
            if let Some(done) = link.start(now) {
                self.q.schedule(done, Ev::LinkDone(l));
            }
        }
    }
}

/// Validates and runs a scenario.
pub fn run(scn: &Scenario) -> Result<TraceSet, ScenarioError> {
    Ok(Simulator::new(scn.clone())?.run())
}
