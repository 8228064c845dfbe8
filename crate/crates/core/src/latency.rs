//! Arrival envelopes, the flow completion time bound, and the M/M/1 tail model.
//!
//! A queue of capacity `C` whose arrivals satisfy `B(t1,t2) ≤ σ + ρC(t2−t1)`
//! finishes every flow of `Z` bits within `(σ+Z)/(C(1−ρ))` of its start.

use crate::units::Bps;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatencyError {
    #[error("envelope needs sigma >= 0, 0 < rho < 1 and C > 0")]
    InvalidEnvelope,
    #[error("arrival trace is not sorted by time")]
    UnsortedTrace,
    #[error("trace long-run rate {rate:.0}b/s exceeds rho*C = {limit:.0}b/s")]
    RhoTooSmall { rate: f64, limit: f64 },
    #[error("probability must lie in [0, 1)")]
    InvalidProbability,
    #[error("model needs mu > 0 and 0 <= rho < 1")]
    InvalidModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalEnvelope {
    /// Burst allowance in bits.
    pub sigma: f64,
    pub rho: f64,
    pub capacity: Bps,
}

impl ArrivalEnvelope {
    pub fn new(sigma: f64, rho: f64, capacity: Bps) -> Result<Self, LatencyError> {
        let env = ArrivalEnvelope { sigma, rho, capacity };
        env.check()?;
        Ok(env)
    }

    fn check(&self) -> Result<(), LatencyError> {
        if self.sigma >= 0.0 && self.sigma.is_finite() && self.rho > 0.0 && self.rho < 1.0 && self.capacity > 0 {
            Ok(())
        } else {
            Err(LatencyError::InvalidEnvelope)
        }
    }

    /// Sustained rate ρC in bits/s.
    pub fn rate(&self) -> f64 {
        self.rho * self.capacity as f64
    }
}

/// Burst allowance built up while rate control converges, or the limiter burst if larger.
///
/// During convergence a sender can exceed its share for at most `iterations × interval`
/// at line rate `C`; afterwards the token bucket bounds the burst.
pub fn sigma_from_convergence(capacity: Bps, iterations: u32, interval_s: f64, limiter_burst_bits: f64) -> f64 {
    (capacity as f64 * iterations as f64 * interval_s).max(limiter_burst_bits)
}

/// Worst-case completion time in seconds of a `z_bits` flow under `env`.
pub fn fct_bound(env: &ArrivalEnvelope, z_bits: f64) -> Result<f64, LatencyError> {
    env.check()?;
    if !(z_bits >= 0.0) {
        return Err(LatencyError::InvalidEnvelope);
    }
    Ok((env.sigma + z_bits) / (env.capacity as f64 * (1.0 - env.rho)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvelopeCheck {
    Satisfied,
    /// Arrivals in `[t1, t2]` (seconds, inclusive) exceed `σ + ρC(t2−t1)`.
    ViolatedAt(f64, f64),
}

// Largest backlog above the service line: max over i <= j of A_j − A_{i−1} − ρC(t_j − t_i),
// where A is cumulative bits and the window starts at the i-th arrival.
fn max_excess(trace: &[(f64, f64)], rate: f64) -> Result<(f64, usize, usize), LatencyError> {
    let mut best = (0.0f64, 0usize, 0usize);
    let mut cum_before = 0.0f64;
    let mut min_base = f64::INFINITY;
    let mut min_at = 0usize;
    let mut prev_t = f64::NEG_INFINITY;
    for (j, &(t, bits)) in trace.iter().enumerate() {
        if t < prev_t {
            return Err(LatencyError::UnsortedTrace);
        }
        prev_t = t;
        // Candidate window start at this arrival: A_{j-1} − ρC·t_j.
        let base = cum_before - rate * t;
        if base < min_base {
            min_base = base;
            min_at = j;
        }
        let cum = cum_before + bits;
        let excess = cum - rate * t - min_base;
        if excess > best.0 {
            best = (excess, min_at, j);
        }
        cum_before = cum;
    }
    Ok(best)
}

/// Exact check of a `(time s, bits)` trace against the envelope over every window
/// bounded by arrival instants.
pub fn check_envelope(trace: &[(f64, f64)], env: &ArrivalEnvelope) -> Result<EnvelopeCheck, LatencyError> {
    env.check()?;
    let (excess, i, j) = max_excess(trace, env.rate())?;
    // Tolerate float noise of a few parts per trillion on long traces.
    let slack = 1e-9 * env.sigma.max(1.0) + 1e-6;
    if excess > env.sigma + slack {
        Ok(EnvelopeCheck::ViolatedAt(trace[i].0, trace[j].0))
    } else {
        Ok(EnvelopeCheck::Satisfied)
    }
}

/// Smallest σ (bits) for which the trace conforms at rate `ρC`.
pub fn fit_sigma(trace: &[(f64, f64)], rho: f64, capacity: Bps) -> Result<f64, LatencyError> {
    let rate = rho * capacity as f64;
    if trace.len() >= 2 {
        let span = trace[trace.len() - 1].0 - trace[0].0;
        let last = trace[trace.len() - 1].0;
        let total: f64 = trace.iter().take_while(|a| a.0 < last).map(|a| a.1).sum();
        if span > 0.0 && total / span > rate * (1.0 + 1e-9) {
            return Err(LatencyError::RhoTooSmall { rate: total / span, limit: rate });
        }
    }
    Ok(max_excess(trace, rate)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1Model {
    /// Service rate in flows per second.
    pub mu: f64,
    pub rho: f64,
}

impl Mm1Model {
    /// Completion-time density `µ(1−ρ)e^{−µ(1−ρ)t}`.
    pub fn density(&self, t: f64) -> f64 {
        let k = self.mu * (1.0 - self.rho);
        k * (-k * t).exp()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - (-self.mu * (1.0 - self.rho) * t).exp()
    }
}

/// Completion time (seconds) below which a fraction `p` of flows finish.
pub fn mm1_fct_quantile(model: &Mm1Model, p: f64) -> Result<f64, LatencyError> {
    if !(model.mu > 0.0 && model.rho >= 0.0 && model.rho < 1.0) {
        return Err(LatencyError::InvalidModel);
    }
    if !(0.0..1.0).contains(&p) {
        return Err(LatencyError::InvalidProbability);
    }
    Ok(-(1.0 - p).ln() / (model.mu * (1.0 - model.rho)))
}

/// `p`-quantile of a sample by nearest rank; `None` for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::GBPS;

    fn table4(rho: f64, z_bits: f64) -> f64 {
        let c = 10 * GBPS;
        let sigma = sigma_from_convergence(c, 15, 500e-6, 0.0);
        fct_bound(&ArrivalEnvelope::new(sigma, rho, c).unwrap(), z_bits).unwrap() * 1e3
    }

    #[test]
    fn bound_rows() {
        for (rho, want) in [(0.15, 9.01), (0.5, 15.32), (0.7, 25.53), (0.8, 38.30)] {
            assert!((table4(rho, 1.6e6) - want).abs() <= 0.01, "rho {rho}: {}", table4(rho, 1.6e6));
        }
        for (rho, want) in [(0.15, 9.77), (0.5, 16.60), (0.7, 27.67)] {
            assert!((table4(rho, 8e6) - want).abs() <= 0.01, "rho {rho}: {}", table4(rho, 8e6));
        }
        let env = ArrivalEnvelope::new(0.0, 0.5, GBPS).unwrap();
        assert_eq!(fct_bound(&env, 0.0).unwrap(), 0.0);
        assert!(ArrivalEnvelope::new(1.0, 1.0, GBPS).is_err());
    }

    #[test]
    fn mm1() {
        let q = mm1_fct_quantile(&Mm1Model { mu: 1250.0, rho: 0.8 }, 0.99).unwrap() * 1e3;
        assert!((q - 18.42).abs() < 0.05, "{q}");
        assert_eq!(mm1_fct_quantile(&Mm1Model { mu: 1250.0, rho: 0.8 }, 0.0).unwrap(), 0.0);
        let q = mm1_fct_quantile(&Mm1Model { mu: 1.0, rho: 0.0 }, 1.0 - (-1.0f64).exp()).unwrap();
        assert!((q - 1.0).abs() < 1e-12);
        assert!(mm1_fct_quantile(&Mm1Model { mu: 1.0, rho: 0.0 }, 1.0).is_err());
    }

    #[test]
    fn envelopes() {
        let c = 10 * GBPS;
        let rho = 0.5;
        let gap = 12_000.0 / (rho * c as f64);
        let steady: Vec<(f64, f64)> = (0..1000).map(|i| (i as f64 * gap, 12_000.0)).collect();
        assert!((fit_sigma(&steady, rho, c).unwrap() - 12_000.0).abs() < 1e-3);
        let env = ArrivalEnvelope::new(12_000.0, rho, c).unwrap();
        assert_eq!(check_envelope(&steady, &env).unwrap(), EnvelopeCheck::Satisfied);

        let env = ArrivalEnvelope::new(10.0 * 12_000.0, rho, c).unwrap();
        let burst: Vec<(f64, f64)> = (0..11).map(|_| (0.0, 12_000.0)).collect();
        assert_eq!(check_envelope(&burst, &env).unwrap(), EnvelopeCheck::ViolatedAt(0.0, 0.0));

        // Bursts of four packets every four packet-times at rate rho*C.
        let periodic: Vec<(f64, f64)> =
            (0..40).flat_map(|k| (0..4).map(move |_| (k as f64 * 4.0 * gap, 12_000.0))).collect();
        assert!((fit_sigma(&periodic, rho, c).unwrap() - 48_000.0).abs() < 1e-3);
        assert_eq!(fit_sigma(&[], rho, c).unwrap(), 0.0);
        assert!(matches!(fit_sigma(&burst, rho, c), Ok(_)));
        let fast: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 * gap / 2.0, 12_000.0)).collect();
        assert!(matches!(fit_sigma(&fast, rho, c), Err(LatencyError::RhoTooSmall { .. })));
        assert_eq!(
            check_envelope(&[(1.0, 1.0), (0.5, 1.0)], &env),
            Err(LatencyError::UnsortedTrace)
        );
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        assert_eq!(percentile(&v, 0.99), Some(99.0));
        assert_eq!(percentile(&v, 1.0), Some(100.0));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
