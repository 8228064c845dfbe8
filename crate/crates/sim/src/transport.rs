//! Window-based AIMD transport reacting to ECN echoes.
//!
//! Coarse on purpose: slow start, one MSS of additive increase per RTT, at most
//! one halving per RTT on marks, go-back-N recovery on timeout.

use bwbroker::units::{Nanos, NS_PER_MS, NS_PER_SEC};

pub const INITIAL_WINDOW_SEGMENTS: u64 = 10;
pub const MIN_RTO: Nanos = 200 * NS_PER_MS;
pub const MAX_RTO: Nanos = 60 * NS_PER_SEC;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    pub mss: u32,
    /// Cap on the congestion window, standing in for the socket send buffer.
    pub max_window: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig { mss: 1500, max_window: 4_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub id: u32,
    pub service: u32,
    pub src: u32,
    pub dst: u32,
    /// `None` for long-lived flows.
    pub size: Option<u64>,
    pub start: Nanos,
    pub finish: Option<Nanos>,
    /// Stops offering new data once set (long-lived flows).
    pub stopped: bool,
    pub next_seq: u64,
    pub acked: u64,
    pub cwnd: f64,
    pub ssthresh: f64,
    pub srtt: Option<Nanos>,
    pub rto: Nanos,
    /// Time the pending retransmission timer is really due; the queued event may be earlier.
    pub rto_deadline: Nanos,
    pub rto_armed: bool,
    pub last_halve: Option<Nanos>,
    /// Segments handed to the local shaper but not yet on the wire.
    pub in_shaper: u32,
    /// Receiver side.
    pub recv_next: u64,
    pub timeouts: u32,
}

/// What the sender should do after an ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckOutcome {
    Duplicate,
    Progress,
    Complete,
}

impl Flow {
    pub fn new(id: u32, service: u32, src: u32, dst: u32, size: Option<u64>, start: Nanos, cfg: &TransportConfig) -> Self {
        Flow {
            id,
            service,
            src,
            dst,
            size,
            start,
            finish: None,
            stopped: false,
            next_seq: 0,
            acked: 0,
            cwnd: (INITIAL_WINDOW_SEGMENTS * cfg.mss as u64) as f64,
            ssthresh: f64::INFINITY,
            srtt: None,
            rto: MIN_RTO,
            rto_deadline: 0,
            rto_armed: false,
            last_halve: None,
            in_shaper: 0,
            recv_next: 0,
            timeouts: 0,
        }
    }

    fn limit(&self) -> u64 {
        match self.size {
            Some(s) => s,
            None if self.stopped => self.next_seq,
            None => u64::MAX,
        }
    }

    pub fn done(&self) -> bool {
        self.finish.is_some() || (self.size.is_none() && self.stopped)
    }

    pub fn in_flight(&self) -> u64 {
        self.next_seq - self.acked
    }

    /// Next segment the window allows, as (seq, bytes). Advances `next_seq`.
    pub fn next_segment(&mut self, cfg: &TransportConfig) -> Option<(u64, u32)> {
        let limit = self.limit();
        if self.done() || self.next_seq >= limit {
            return None;
        }
        let bytes = (limit - self.next_seq).min(cfg.mss as u64);
        let window = (self.cwnd as u64).min(cfg.max_window);
        if self.in_flight() > 0 && self.in_flight() + bytes > window {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += bytes;
        Some((seq, bytes as u32))
    }

    /// Receiver: accepts in-order data only. Returns the cumulative ACK.
    pub fn on_data(&mut self, seq: u64, bytes: u32) -> u64 {
        if seq == self.recv_next {
            self.recv_next += bytes as u64;
        }
        self.recv_next
    }

    pub fn received_all(&self) -> bool {
        matches!(self.size, Some(s) if self.recv_next >= s)
    }

    pub fn on_ack(&mut self, cum: u64, ecn_echo: bool, sent_at: Nanos, now: Nanos, cfg: &TransportConfig) -> AckOutcome {
        if cum <= self.acked {
            return AckOutcome::Duplicate;
        }
        let newly = (cum - self.acked) as f64;
        self.acked = cum;
        // A late ACK for data sent before a go-back-N rewind can run ahead of next_seq.
        self.next_seq = self.next_seq.max(cum);
        let sample = now.saturating_sub(sent_at);
        self.srtt = Some(match self.srtt {
            None => sample,
            Some(s) => (7 * s + sample) / 8,
        });
        self.rto = MIN_RTO.max(2 * self.srtt.unwrap_or(0));
        self.on_window(newly, ecn_echo, now, cfg);
        if matches!(self.size, Some(s) if self.acked >= s) {
            AckOutcome::Complete
        } else {
            AckOutcome::Progress
        }
    }

    /// Additive increase or multiplicative decrease for `newly` acknowledged bytes.
    pub fn on_window(&mut self, newly: f64, ecn_echo: bool, now: Nanos, cfg: &TransportConfig) {
        let mss = cfg.mss as f64;
        if ecn_echo {
            let rtt = self.srtt.unwrap_or(0);
            if self.last_halve.is_none_or(|t| now.saturating_sub(t) >= rtt) {
                self.cwnd = (self.cwnd / 2.0).max(mss);
                self.ssthresh = self.cwnd;
                self.last_halve = Some(now);
            }
            return;
        }
        // Segments still waiting in the shaper mean the rate limiter, not the window, is binding.
        if self.in_shaper > 0 {
            return;
        }
        if self.cwnd < self.ssthresh {
            self.cwnd += newly;
        } else {
            self.cwnd += mss * newly / self.cwnd;
        }
        self.cwnd = self.cwnd.min(cfg.max_window as f64);
    }

    /// Retransmission timeout. Returns false if it should simply be re-armed.
    pub fn on_timeout(&mut self, cfg: &TransportConfig) -> bool {
        if self.done() || self.in_shaper > 0 || self.in_flight() == 0 {
            return false;
        }
        let mss = cfg.mss as f64;
        self.ssthresh = (self.cwnd / 2.0).max(mss);
        self.cwnd = mss;
        self.next_seq = self.acked;
        self.rto = (self.rto * 2).min(MAX_RTO);
        self.timeouts += 1;
        true
    }

    pub fn fct(&self) -> Option<Nanos> {
        self.finish.map(|f| f - self.start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TransportConfig {
        TransportConfig { mss: 1000, max_window: 1 << 40 }
    }

    fn flow() -> Flow {
        let mut f = Flow::new(0, 1, 0, 1, None, 0, &cfg());
        f.ssthresh = 10_000.0;
        f.cwnd = 10_000.0;
        f.srtt = Some(100);
        f
    }

    #[test]
    fn additive_increase_is_one_mss_per_window() {
        let c = cfg();
        let mut f = flow();
        for rtt in 0..20 {
            let w = f.cwnd;
            let mut acked = 0.0;
            while acked < w {
                f.on_window(1000.0, false, rtt * 100, &c);
                acked += 1000.0;
            }
            assert!((f.cwnd - w - 1000.0).abs() < 60.0, "rtt {rtt}: {w} -> {}", f.cwnd);
        }
    }

    #[test]
    fn marks_halve_once_per_rtt_down_to_one_mss() {
        let c = cfg();
        let mut f = flow();
        f.on_window(1000.0, true, 1000, &c);
        f.on_window(1000.0, true, 1050, &c);
        assert_eq!(f.cwnd, 5000.0);
        for k in 0..40 {
            f.on_window(1000.0, true, 2000 + k * 100, &c);
        }
        assert_eq!(f.cwnd, 1000.0);
    }

    #[test]
    fn window_gates_segments_and_timeout_rewinds() {
        let c = cfg();
        let mut f = Flow::new(0, 1, 0, 1, Some(25_500), 0, &c);
        let mut n = 0;
        while let Some((_, b)) = f.next_segment(&c) {
            n += b as u64;
        }
        assert_eq!(n, 10_000);
        assert!(f.on_timeout(&c));
        assert_eq!((f.next_seq, f.cwnd), (0, 1000.0));
        assert_eq!(f.on_ack(25_000, false, 0, 10, &c), AckOutcome::Progress);
        assert_eq!(f.next_segment(&c), Some((25_000, 500)));
        assert_eq!(f.on_ack(25_500, false, 0, 10, &c), AckOutcome::Complete);
        assert_eq!(f.on_ack(25_500, false, 0, 10, &c), AckOutcome::Duplicate);
    }

    #[test]
    fn receiver_is_go_back_n() {
        let mut f = Flow::new(0, 1, 0, 1, Some(3000), 0, &cfg());
        assert_eq!(f.on_data(0, 1000), 1000);
        assert_eq!(f.on_data(2000, 1000), 1000);
        assert_eq!(f.on_data(1000, 1000), 2000);
        assert!(!f.received_all());
        f.on_data(2000, 1000);
        assert!(f.received_all());
    }
}
