//! FIFO output queues with threshold ECN marking and a hard drop limit.

use std::collections::VecDeque;

use bwbroker::units::{Bps, Nanos, NS_PER_SEC};

pub type LinkId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    /// Reliable transport segment; `seq` is the byte offset.
    Tcp,
    /// Unacknowledged datagram.
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub kind: PacketKind,
    /// Flow index for TCP, source index for UDP.
    pub flow: u32,
    pub src: u32,
    pub dst: u32,
    pub service: u32,
    pub bytes: u32,
    pub seq: u64,
    pub sent_at: Nanos,
    pub ecn: bool,
    pub hop: u8,
    pub route_len: u8,
    pub route: [LinkId; 4],
}

impl Packet {
    pub fn next_link(&self) -> Option<LinkId> {
        (self.hop < self.route_len).then(|| self.route[self.hop as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Dropped,
    /// Queued; `true` if the link was idle and must start transmitting.
    Queued(bool),
}

#[derive(Debug, Clone, Default)]
pub struct LinkStats {
    pub arrivals: u64,
    pub marked: u64,
    pub dropped: u64,
    pub tx_bytes: u64,
    pub max_bytes: u64,
    /// Packets found in the queue by each arrival, bucketed by count.
    pub occupancy: Vec<u64>,
}

impl LinkStats {
    /// Smallest queue length (packets) seen by at least a fraction `p` of arrivals.
    pub fn occupancy_quantile(&self, p: f64) -> u64 {
        let total: u64 = self.occupancy.iter().sum();
        if total == 0 {
            return 0;
        }
        let want = (p * total as f64).ceil() as u64;
        let mut acc = 0;
        for (k, &c) in self.occupancy.iter().enumerate() {
            acc += c;
            if acc >= want {
                return k as u64;
            }
        }
        self.occupancy.len() as u64 - 1
    }
}

const OCCUPANCY_BUCKETS: usize = 4096;

#[derive(Debug, Clone)]
pub struct LinkQueue {
    pub capacity: Bps,
    pub ecn_threshold: Option<u64>,
    pub drop_limit: Option<u64>,
    fifo: VecDeque<Packet>,
    bytes_queued: u64,
    busy: bool,
    carry: u128,
    pub stats: LinkStats,
}

impl LinkQueue {
    pub fn new(capacity: Bps, ecn_threshold: Option<u64>, drop_limit: Option<u64>) -> Self {
        LinkQueue {
            capacity,
            ecn_threshold,
            drop_limit,
            fifo: VecDeque::new(),
            bytes_queued: 0,
            busy: false,
            carry: 0,
            stats: LinkStats { occupancy: vec![0; 64], ..Default::default() },
        }
    }

    pub fn reset_stats(&mut self) {
        self.stats.arrivals = 0;
        self.stats.marked = 0;
        self.stats.dropped = 0;
        self.stats.tx_bytes = 0;
        self.stats.max_bytes = self.bytes_queued;
        self.stats.occupancy.iter_mut().for_each(|c| *c = 0);
    }

    pub fn bytes_queued(&self) -> u64 {
        self.bytes_queued
    }

    pub fn packets_queued(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    /// Admits a packet, marking it if the backlog it joins is above the threshold.
    pub fn enqueue(&mut self, mut pkt: Packet) -> Enqueued {
        self.stats.arrivals += 1;
        let k = self.fifo.len().min(OCCUPANCY_BUCKETS - 1);
        if k >= self.stats.occupancy.len() {
            self.stats.occupancy.resize((k + 1).next_power_of_two().min(OCCUPANCY_BUCKETS), 0);
        }
        self.stats.occupancy[k] += 1;
        if self.capacity == 0 {
            self.stats.dropped += 1;
            return Enqueued::Dropped;
        }
        if let Some(limit) = self.drop_limit {
            if self.bytes_queued + pkt.bytes as u64 > limit {
                self.stats.dropped += 1;
                return Enqueued::Dropped;
            }
        }
        if matches!(self.ecn_threshold, Some(th) if self.bytes_queued > th) {
            pkt.ecn = true;
            self.stats.marked += 1;
        }
        self.bytes_queued += pkt.bytes as u64;
        self.stats.max_bytes = self.stats.max_bytes.max(self.bytes_queued);
        self.fifo.push_back(pkt);
        Enqueued::Queued(!self.busy)
    }

    /// Starts serializing the head packet if idle; returns when it finishes.
    pub fn start(&mut self, now: Nanos) -> Option<Nanos> {
        if self.busy || self.capacity == 0 {
            return None;
        }
        let head = self.fifo.front()?;
        let work = head.bytes as u128 * 8 * NS_PER_SEC as u128 + self.carry;
        let cap = self.capacity as u128;
        self.carry = work % cap;
        self.busy = true;
        Some(now + (work / cap) as Nanos)
    }

    /// Finishes the packet in service.
    pub fn complete(&mut self) -> Packet {
        let pkt = self.fifo.pop_front().expect("a packet was in service");
        self.busy = false;
        self.bytes_queued -= pkt.bytes as u64;
        self.stats.tx_bytes += pkt.bytes as u64;
        pkt
    }

    /// Changes the line rate; at zero every waiting packet is dropped.
    /// Returns how many packets were discarded.
    pub fn set_capacity(&mut self, capacity: Bps) -> usize {
        self.capacity = capacity;
        self.carry = 0;
        if capacity > 0 {
            return 0;
        }
        let keep = usize::from(self.busy);
        let dropped: Vec<Packet> = self.fifo.drain(keep..).collect();
        for p in &dropped {
            self.bytes_queued -= p.bytes as u64;
        }
        self.stats.dropped += dropped.len() as u64;
        dropped.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(bytes: u32) -> Packet {
        Packet {
            kind: PacketKind::Udp,
            flow: 0,
            src: 0,
            dst: 1,
            service: 0,
            bytes,
            seq: 0,
            sent_at: 0,
            ecn: false,
            hop: 0,
            route_len: 1,
            route: [0; 4],
        }
    }

    #[test]
    fn marks_above_threshold_and_drops_at_limit() {
        let mut q = LinkQueue::new(10_000_000_000, Some(3000), Some(6000));
        assert_eq!(q.enqueue(pkt(1500)), Enqueued::Queued(true));
        assert_eq!(q.start(0), Some(1200));
        for _ in 0..2 {
            assert_eq!(q.enqueue(pkt(1500)), Enqueued::Queued(false));
        }
        // 4500B queued: the next arrival is marked.
        assert_eq!(q.enqueue(pkt(1500)), Enqueued::Queued(false));
        assert_eq!(q.stats.marked, 1);
        assert_eq!(q.enqueue(pkt(1500)), Enqueued::Dropped);
        let p = q.complete();
        assert!(!p.ecn);
        assert_eq!(q.bytes_queued(), 4500);
    }

    #[test]
    fn serialization_carries_remainder() {
        // 1500B at 7Gb/s is 1714.28ns; seven packets take exactly 12000ns.
        let mut q = LinkQueue::new(7_000_000_000, None, None);
        let mut t = 0;
        for _ in 0..7 {
            q.enqueue(pkt(1500));
            t = q.start(t).unwrap();
            q.complete();
        }
        assert_eq!(t, 12_000);
    }

    #[test]
    fn down_link_drops_backlog() {
        let mut q = LinkQueue::new(1_000_000_000, None, None);
        for _ in 0..5 {
            q.enqueue(pkt(1000));
        }
        q.start(0);
        assert_eq!(q.set_capacity(0), 4);
        assert_eq!(q.packets_queued(), 1);
        assert_eq!(q.enqueue(pkt(1000)), Enqueued::Dropped);
    }
}
