//! Host-side enforcement.
//!
//! Receivers run one [`RateMeter`] per service: an RCP-style controller that
//! adjusts an advertised rate `R` so the measured arrival rate tracks the
//! service's receive capacity, and samples incoming traffic to send `R` back to
//! senders. Senders keep a [`ServiceLimiter`] per service: a root token bucket at
//! the broker-assigned transmit cap with one child bucket per destination,
//! driven by that feedback.

use std::collections::BTreeMap;

use crate::policy::{MachineId, ServiceId};
use crate::units::{Bps, Nanos, MBPS, NS_PER_SEC};

/// One feedback message per this many received bytes.
pub const FEEDBACK_EVERY_BYTES: u64 = 10_000;
/// Lowest rate a meter will advertise, so a silenced sender can restart.
pub const R_MIN: Bps = MBPS;
/// Largest multiplicative cut a single update may apply.
pub const MAX_DECREASE: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_EWHA_GAIN: f64 = 1.0 / 8.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShaperError {
    #[error("packet of {bytes}B exceeds the {burst}B bucket")]
    PacketLargerThanBurst { bytes: u64, burst: u64 },
    #[error("rates must be positive")]
    NonPositiveRate,
}

/// Multiplicative factor of one control step.
///
/// `1 − α(y−C)/C − 1_marked·β/2`, never below [`MAX_DECREASE`].
pub fn control_factor(y: f64, capacity: f64, alpha: f64, beta: f64) -> f64 {
    let marked = if beta > 0.0 { beta / 2.0 } else { 0.0 };
    (1.0 - alpha * (y - capacity) / capacity - marked).max(MAX_DECREASE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackPacket {
    /// Host the feedback is addressed to (the data sender).
    pub src: MachineId,
    pub meter_service: ServiceId,
    pub advertised: Bps,
}

impl FeedbackPacket {
    pub const WIRE_LEN: usize = 16;

    /// 16-byte trace record: src u32, service u32, rate in Kb/s u64, little-endian.
    pub fn encode(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[0..4].copy_from_slice(&self.src.to_le_bytes());
        b[4..8].copy_from_slice(&self.meter_service.to_le_bytes());
        b[8..16].copy_from_slice(&(self.advertised / 1000).to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != 16 {
            return None;
        }
        Some(FeedbackPacket {
            src: u32::from_le_bytes(b[0..4].try_into().ok()?),
            meter_service: u32::from_le_bytes(b[4..8].try_into().ok()?),
            advertised: u64::from_le_bytes(b[8..16].try_into().ok()?) * 1000,
        })
    }
}

/// Receive-side rate meter for one service on one host.
#[derive(Debug, Clone)]
pub struct RateMeter {
    pub service: ServiceId,
    /// Receive capacity the meter steers towards (the service's runtime rx cap).
    pub capacity: Bps,
    pub line_rate: Bps,
    pub interval: Nanos,
    pub alpha: f64,
    rate: f64,
    bytes: f64,
    packets: u64,
    marked: u64,
    received_total: u64,
    sender_weights: BTreeMap<MachineId, f64>,
}

impl RateMeter {
    pub fn new(service: ServiceId, capacity: Bps, line_rate: Bps, interval: Nanos) -> Self {
        let capacity = capacity.clamp(1, line_rate.max(1));
        RateMeter {
            service,
            capacity,
            line_rate,
            interval,
            alpha: DEFAULT_ALPHA,
            rate: capacity as f64,
            bytes: 0.0,
            packets: 0,
            marked: 0,
            received_total: 0,
            sender_weights: BTreeMap::new(),
        }
    }

    pub fn rate(&self) -> Bps {
        self.rate.round() as Bps
    }

    pub fn rate_f64(&self) -> f64 {
        self.rate
    }

    pub fn set_rate(&mut self, r: f64) {
        self.rate = r.clamp(R_MIN as f64, self.line_rate as f64);
    }

    pub fn set_capacity(&mut self, c: Bps) {
        self.capacity = c.clamp(1, self.line_rate.max(1));
    }

    /// Share of `R` a given sender may use; unlisted senders weigh 1.
    pub fn set_sender_weight(&mut self, sender: MachineId, w: f64) {
        self.sender_weights.insert(sender, w);
    }

    pub fn sender_weight(&self, sender: MachineId) -> f64 {
        self.sender_weights.get(&sender).copied().unwrap_or(1.0)
    }

    /// Accounts one arrival and returns the feedback owed to its sender, one per
    /// 10kB boundary the cumulative byte count crossed.
    pub fn on_packet_received(&mut self, src: MachineId, bytes: u64, ecn_marked: bool) -> Vec<FeedbackPacket> {
        self.bytes += bytes as f64;
        self.packets += 1;
        self.marked += ecn_marked as u64;
        let before = self.received_total / FEEDBACK_EVERY_BYTES;
        self.received_total += bytes;
        let crossed = self.received_total / FEEDBACK_EVERY_BYTES - before;
        if crossed == 0 {
            return Vec::new();
        }
        let fb = self.feedback_for(src);
        vec![fb; crossed as usize]
    }

    /// Fluid-model arrival: adds bytes without packet sampling or mark accounting.
    pub fn add_bytes(&mut self, bytes: f64) {
        self.bytes += bytes;
    }

    pub fn feedback_for(&self, src: MachineId) -> FeedbackPacket {
        let adv = (self.sender_weight(src) * self.rate).round().max(1.0) as Bps;
        FeedbackPacket { src, meter_service: self.service, advertised: adv }
    }

    /// Measured arrival rate over the current interval, in bits/s.
    pub fn arrival_rate(&self) -> f64 {
        self.bytes * 8.0 * NS_PER_SEC as f64 / self.interval as f64
    }

    pub fn marked_fraction(&self) -> f64 {
        if self.packets == 0 {
            0.0
        } else {
            self.marked as f64 / self.packets as f64
        }
    }

    /// One control step at the end of an interval; resets the accumulators.
    pub fn meter_update(&mut self) -> Bps {
        let y = self.arrival_rate();
        let f = control_factor(y, self.capacity as f64, self.alpha, self.marked_fraction());
        self.set_rate(self.rate * f);
        self.bytes = 0.0;
        self.packets = 0;
        self.marked = 0;
        self.rate()
    }
}

/// Outcome of asking a limiter to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Allowed,
    /// Earliest time enough tokens will exist; `u64::MAX` while the rate is zero.
    DelayUntil(Nanos),
}

/// Token bucket with exact integer accounting.
///
/// Tokens are held in units of 1e-9 bit so that `rate (bits/s) × dt (ns)` adds
/// whole units.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: Bps,
    burst_bytes: u64,
    tokens: u128,
    last: Nanos,
}

const UNITS_PER_BIT: u128 = NS_PER_SEC as u128;

impl TokenBucket {
    /// A bucket that starts full.
    pub fn new(rate: Bps, burst_bytes: u64, now: Nanos) -> Self {
        TokenBucket { rate, burst_bytes, tokens: Self::units(burst_bytes), last: now }
    }

    fn units(bytes: u64) -> u128 {
        bytes as u128 * 8 * UNITS_PER_BIT
    }

    pub fn rate(&self) -> Bps {
        self.rate
    }

    pub fn burst(&self) -> u64 {
        self.burst_bytes
    }

    pub fn set_rate(&mut self, rate: Bps, now: Nanos) {
        self.refill(now);
        self.rate = rate;
    }

    pub fn empty(&mut self, now: Nanos) {
        self.last = now;
        self.tokens = 0;
    }

    pub fn tokens_bytes(&self) -> f64 {
        self.tokens as f64 / (8 * UNITS_PER_BIT) as f64
    }

    pub fn refill(&mut self, now: Nanos) {
        if now > self.last {
            let add = self.rate as u128 * (now - self.last) as u128;
            self.tokens = (self.tokens + add).min(Self::units(self.burst_bytes));
            self.last = now;
        }
    }

    /// When `bytes` could go, without debiting anything.
    pub fn ready_at(&mut self, bytes: u64, now: Nanos) -> Result<Nanos, ShaperError> {
        if bytes > self.burst_bytes {
            return Err(ShaperError::PacketLargerThanBurst { bytes, burst: self.burst_bytes });
        }
        self.refill(now);
        let need = Self::units(bytes);
        if self.tokens >= need {
            return Ok(now);
        }
        if self.rate == 0 {
            return Ok(Nanos::MAX);
        }
        let deficit = need - self.tokens;
        let wait = deficit.div_ceil(self.rate as u128);
        Ok(now.saturating_add(wait.min(u64::MAX as u128) as u64))
    }

    pub fn debit(&mut self, bytes: u64) {
        self.tokens = self.tokens.saturating_sub(Self::units(bytes));
    }

    pub fn try_send(&mut self, bytes: u64, now: Nanos) -> Result<Verdict, ShaperError> {
        let at = self.ready_at(bytes, now)?;
        if at <= now {
            self.debit(bytes);
            Ok(Verdict::Allowed)
        } else {
            Ok(Verdict::DelayUntil(at))
        }
    }
}

/// One step of the exponentially weighted harmonic average:
/// `1/R' = (1−γ)/R + γ/R_i`.
pub fn ewha_update(r: f64, r_i: f64, gamma: f64) -> Result<f64, ShaperError> {
    if !(r > 0.0 && r_i > 0.0) {
        return Err(ShaperError::NonPositiveRate);
    }
    Ok(r * r_i / ((1.0 - gamma) * r_i + gamma * r))
}

#[derive(Debug, Clone)]
struct DestLimiter {
    bucket: TokenBucket,
    last_feedback: Nanos,
}

/// Sender-side limiter tree for one (host, service).
#[derive(Debug, Clone)]
pub struct ServiceLimiter {
    pub service: ServiceId,
    root: TokenBucket,
    root_unlimited: bool,
    burst_bytes: u64,
    children: BTreeMap<MachineId, DestLimiter>,
    /// When set, feedback from all destinations is folded into one shared rate.
    ewha_gain: Option<f64>,
    shared: Option<DestLimiter>,
}

impl ServiceLimiter {
    /// A limiter whose root is unlimited until a broker installs a cap.
    pub fn new(service: ServiceId, burst_bytes: u64, now: Nanos) -> Self {
        ServiceLimiter {
            service,
            root: TokenBucket::new(0, burst_bytes, now),
            root_unlimited: true,
            burst_bytes,
            children: BTreeMap::new(),
            ewha_gain: None,
            shared: None,
        }
    }

    pub fn with_ewha(mut self, gain: f64) -> Self {
        self.ewha_gain = Some(gain);
        self
    }

    pub fn burst(&self) -> u64 {
        self.burst_bytes
    }

    /// Installs the broker-assigned service cap; `None` removes it.
    pub fn set_root_rate(&mut self, rate: Option<Bps>, now: Nanos) {
        match rate {
            Some(r) => {
                if self.root_unlimited {
                    self.root = TokenBucket::new(r, self.burst_bytes, now);
                } else {
                    self.root.set_rate(r, now);
                }
                self.root_unlimited = false;
            }
            None => self.root_unlimited = true,
        }
    }

    pub fn root_rate(&self) -> Option<Bps> {
        (!self.root_unlimited).then(|| self.root.rate())
    }

    /// Creates or updates the limiter towards the feedback's originator.
    ///
    /// `dst` is the receiver that sent the feedback; `fb.src` names this host.
    pub fn on_feedback(&mut self, dst: MachineId, fb: &FeedbackPacket, now: Nanos) {
        let burst = self.burst_bytes;
        if let Some(gain) = self.ewha_gain {
            match &mut self.shared {
                Some(s) => {
                    let r = ewha_update(s.bucket.rate() as f64, fb.advertised as f64, gain)
                        .unwrap_or(fb.advertised as f64);
                    s.bucket.set_rate(r.round() as Bps, now);
                    s.last_feedback = now;
                }
                None => {
                    self.shared = Some(DestLimiter { bucket: TokenBucket::new(fb.advertised, burst, now), last_feedback: now })
                }
            }
            return;
        }
        match self.children.get_mut(&dst) {
            Some(c) => {
                c.bucket.set_rate(fb.advertised, now);
                c.last_feedback = now;
            }
            None => {
                self.children
                    .insert(dst, DestLimiter { bucket: TokenBucket::new(fb.advertised, burst, now), last_feedback: now });
            }
        }
    }

    pub fn dest_rate(&self, dst: MachineId) -> Option<Bps> {
        if self.ewha_gain.is_some() {
            return self.shared.as_ref().map(|s| s.bucket.rate());
        }
        self.children.get(&dst).map(|c| c.bucket.rate())
    }

    pub fn destinations(&self) -> impl Iterator<Item = MachineId> + '_ {
        self.children.keys().copied()
    }

    fn child_mut(&mut self, dst: MachineId) -> Option<&mut DestLimiter> {
        if self.ewha_gain.is_some() {
            self.shared.as_mut()
        } else {
            self.children.get_mut(&dst)
        }
    }

    /// When a `bytes` packet to `dst` could depart; nothing is debited.
    pub fn ready_at(&mut self, dst: MachineId, bytes: u64, now: Nanos) -> Result<Nanos, ShaperError> {
        if bytes > self.burst_bytes {
            return Err(ShaperError::PacketLargerThanBurst { bytes, burst: self.burst_bytes });
        }
        let mut at = now;
        if let Some(c) = self.child_mut(dst) {
            at = at.max(c.bucket.ready_at(bytes, now)?);
        }
        if !self.root_unlimited {
            at = at.max(self.root.ready_at(bytes, now)?);
        }
        Ok(at)
    }

    /// Readiness of the root bucket alone; `now` while the root is unlimited.
    pub fn root_ready_at(&mut self, bytes: u64, now: Nanos) -> Result<Nanos, ShaperError> {
        if self.root_unlimited {
            return Ok(now);
        }
        self.root.ready_at(bytes, now)
    }

    /// Readiness of the destination bucket alone; `now` if none exists yet.
    pub fn dest_ready_at(&mut self, dst: MachineId, bytes: u64, now: Nanos) -> Result<Nanos, ShaperError> {
        match self.child_mut(dst) {
            Some(c) => c.bucket.ready_at(bytes, now),
            None => Ok(now),
        }
    }

    /// Sends if both the destination bucket and the root allow it, debiting both.
    pub fn try_send(&mut self, dst: MachineId, bytes: u64, now: Nanos) -> Result<Verdict, ShaperError> {
        let at = self.ready_at(dst, bytes, now)?;
        if at > now {
            return Ok(Verdict::DelayUntil(at));
        }
        if let Some(c) = self.child_mut(dst) {
            c.bucket.debit(bytes);
        }
        if !self.root_unlimited {
            self.root.debit(bytes);
        }
        Ok(Verdict::Allowed)
    }

    /// Drops destination limiters that have heard nothing for `idle`. Returns how many.
    pub fn collect_idle(&mut self, now: Nanos, idle: Nanos) -> usize {
        let before = self.children.len();
        self.children.retain(|_, c| now.saturating_sub(c.last_feedback) < idle);
        if let Some(s) = &self.shared {
            if now.saturating_sub(s.last_feedback) >= idle {
                self.shared = None;
                return before - self.children.len() + 1;
            }
        }
        before - self.children.len()
    }
}

/// Tracks whether the broker is still feeding a host fresh runtime policy.
#[derive(Debug, Clone, Copy)]
pub struct InstallWatchdog {
    pub timeout: Nanos,
    last_install: Option<Nanos>,
}

impl InstallWatchdog {
    pub fn new(timeout: Nanos) -> Self {
        InstallWatchdog { timeout, last_install: None }
    }

    pub fn installed(&mut self, now: Nanos) {
        self.last_install = Some(now);
    }

    /// When the host must fall back to static policy, if an install is in force.
    pub fn expires_at(&self) -> Option<Nanos> {
        self.last_install.map(|t| t + self.timeout)
    }

    pub fn expired(&self, now: Nanos) -> bool {
        matches!(self.expires_at(), Some(t) if now >= t)
    }

    pub fn clear(&mut self) {
        self.last_install = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{GBPS, NS_PER_MS, NS_PER_US};

    #[test]
    fn control_equation() {
        let mut m = RateMeter::new(1, 10 * GBPS, 10 * GBPS, 500 * NS_PER_US);
        m.set_rate(5e9);
        // 5Gb/s over 500us.
        m.add_bytes(5e9 * 0.0005 / 8.0);
        assert_eq!(m.meter_update(), 6_250_000_000);

        let mut m = RateMeter::new(1, 10 * GBPS, 10 * GBPS, 500 * NS_PER_US);
        m.set_rate(4e9);
        m.add_bytes(10e9 * 0.0005 / 8.0);
        assert_eq!(m.meter_update(), 4 * GBPS);
        assert_eq!(control_factor(10e9, 10e9, 0.5, 0.5), 0.75);
        assert_eq!(control_factor(10e9, 10e9, 0.5, 0.0), 1.0);
    }

    #[test]
    fn clamps() {
        let mut m = RateMeter::new(1, 10 * GBPS, 10 * GBPS, NS_PER_MS);
        m.add_bytes(1e12);
        m.meter_update();
        assert_eq!(m.rate(), 5 * GBPS);
        for _ in 0..100 {
            m.add_bytes(1e12);
            m.meter_update();
        }
        assert_eq!(m.rate(), R_MIN);
        for _ in 0..100 {
            m.meter_update();
        }
        assert_eq!(m.rate(), 10 * GBPS);
    }

    #[test]
    fn sampling() {
        let mut m = RateMeter::new(3, GBPS, 10 * GBPS, NS_PER_MS);
        assert!(m.on_packet_received(7, 9_000, false).is_empty());
        assert_eq!(m.on_packet_received(7, 2_000, false).len(), 1);
        let mut m = RateMeter::new(3, GBPS, 10 * GBPS, NS_PER_MS);
        assert_eq!(m.on_packet_received(7, 25_000, false).len(), 2);
        m.set_sender_weight(7, 2.0);
        let fb = m.on_packet_received(7, 10_000, false);
        assert_eq!(fb[0].advertised, 2 * GBPS);
        assert_eq!(fb[0].src, 7);
        assert_eq!(FeedbackPacket::decode(&fb[0].encode()), Some(fb[0]));
    }

    #[test]
    fn bucket_delay() {
        let mut b = TokenBucket::new(8 * MBPS, 1_000_000, 0);
        b.empty(0);
        assert_eq!(b.try_send(1000, 0).unwrap(), Verdict::DelayUntil(NS_PER_MS));
        assert_eq!(b.try_send(1000, NS_PER_MS).unwrap(), Verdict::Allowed);
        let mut b = TokenBucket::new(8 * MBPS, 1_000_000, 0);
        assert_eq!(b.try_send(1000, 0).unwrap(), Verdict::Allowed);
        assert!(matches!(b.try_send(2_000_000, 0), Err(ShaperError::PacketLargerThanBurst { .. })));
    }

    #[test]
    fn limiter_tree() {
        let mut l = ServiceLimiter::new(1, 64_000, 0);
        let fb = |r| FeedbackPacket { src: 0, meter_service: 1, advertised: r };
        l.on_feedback(9, &fb(3 * GBPS), 0);
        assert_eq!(l.dest_rate(9), Some(3 * GBPS));
        l.on_feedback(9, &fb(GBPS), 10);
        assert_eq!(l.dest_rate(9), Some(GBPS));
        assert_eq!(l.collect_idle(5 * NS_PER_MS, 10 * NS_PER_MS), 0);
        assert_eq!(l.collect_idle(20 * NS_PER_MS, 10 * NS_PER_MS), 1);
        assert_eq!(l.dest_rate(9), None);
    }

    #[test]
    fn root_and_child_both_gate() {
        let mut l = ServiceLimiter::new(1, 1_500, 0);
        l.set_root_rate(Some(12 * MBPS), 0);
        l.on_feedback(2, &FeedbackPacket { src: 0, meter_service: 1, advertised: 120 * MBPS }, 0);
        assert_eq!(l.try_send(2, 1500, 0).unwrap(), Verdict::Allowed);
        // Root refills 1500B in 1ms; the child would allow it after 100us.
        assert_eq!(l.try_send(2, 1500, 0).unwrap(), Verdict::DelayUntil(NS_PER_MS));
    }

    #[test]
    fn ewha() {
        assert_eq!(ewha_update(9.0, 1.0, 0.125).unwrap(), 4.5);
        assert_eq!(ewha_update(3.0, 3.0, 0.125).unwrap(), 3.0);
        assert!(ewha_update(0.0, 1.0, 0.125).is_err());
        let mut r = 5.0;
        for k in 0..4000 {
            r = ewha_update(r, if k % 2 == 0 { 1.0 } else { 10.0 }, 0.125).unwrap();
        }
        assert!((r - 20.0 / 11.0).abs() < 0.15, "{r}");
    }
}
