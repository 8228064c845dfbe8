//! Bandwidth and time quantities.
//!
//! Rates are integer bits per second and times are integer nanoseconds.
//! Configuration files may use human units such as `"6Gb/s"` or `"500us"`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Bits per second.
pub type Bps = u64;

/// Simulated time in nanoseconds.
pub type Nanos = u64;

pub const KBPS: Bps = 1_000;
pub const MBPS: Bps = 1_000_000;
pub const GBPS: Bps = 1_000_000_000;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;
pub const NS_PER_SEC: Nanos = 1_000_000_000;

/// An upper bound that may be absent.
///
/// Kept as an explicit sentinel so water-filling never adds "infinity" to a sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Limit {
    Finite(Bps),
    #[default]
    Unlimited,
}

impl Limit {
    pub fn is_unlimited(self) -> bool {
        matches!(self, Limit::Unlimited)
    }

    pub fn finite(self) -> Option<Bps> {
        match self {
            Limit::Finite(v) => Some(v),
            Limit::Unlimited => None,
        }
    }

    /// `min(self, x)` as a plain number.
    pub fn cap(self, x: Bps) -> Bps {
        match self {
            Limit::Finite(v) => v.min(x),
            Limit::Unlimited => x,
        }
    }

    pub fn min(self, other: Limit) -> Limit {
        match (self, other) {
            (Limit::Finite(a), Limit::Finite(b)) => Limit::Finite(a.min(b)),
            (Limit::Finite(a), Limit::Unlimited) | (Limit::Unlimited, Limit::Finite(a)) => {
                Limit::Finite(a)
            }
            (Limit::Unlimited, Limit::Unlimited) => Limit::Unlimited,
        }
    }

    pub fn allows(self, x: Bps) -> bool {
        match self {
            Limit::Finite(v) => x <= v,
            Limit::Unlimited => true,
        }
    }
}

impl From<Bps> for Limit {
    fn from(v: Bps) -> Self {
        Limit::Finite(v)
    }
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Limit::Finite(v) => write!(f, "{}", format_rate(*v)),
            Limit::Unlimited => f.write_str("unlimited"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UnitError {
    #[error("cannot parse rate {0:?}")]
    BadRate(String),
    #[error("cannot parse duration {0:?}")]
    BadDuration(String),
    #[error("cannot parse size {0:?}")]
    BadSize(String),
}

fn split_number(s: &str) -> Option<(f64, &str)> {
    let s = s.trim();
    let end = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || c == '-' || c == '+'))
        .unwrap_or(s.len());
    // "1e" followed by a unit letter would be misread; back off a trailing exponent marker.
    let (mut num, mut rest) = s.split_at(end);
    while num.ends_with(['e', 'E']) {
        num = &num[..num.len() - 1];
        rest = &s[num.len()..];
    }
    let v: f64 = num.parse().ok()?;
    if !v.is_finite() || v < 0.0 {
        return None;
    }
    Some((v, rest.trim()))
}

/// Parses `"6Gb/s"`, `"100 Mbps"`, `"1.5G"`, or a bare number of bits/s.
pub fn parse_rate(s: &str) -> Result<Bps, UnitError> {
    let bad = || UnitError::BadRate(s.to_string());
    let (v, unit) = split_number(s).ok_or_else(bad)?;
    let unit = unit.to_ascii_lowercase();
    let unit = unit
        .strip_suffix("b/s")
        .or_else(|| unit.strip_suffix("bps"))
        .or_else(|| unit.strip_suffix("bit/s"))
        .unwrap_or(&unit);
    let mult = match unit.trim() {
        "" => 1.0,
        "k" => 1e3,
        "m" => 1e6,
        "g" => 1e9,
        "t" => 1e12,
        _ => return Err(bad()),
    };
    Ok((v * mult).round() as Bps)
}

/// Parses `"500us"`, `"10ms"`, `"1s"`, `"250ns"`; bare numbers are seconds.
pub fn parse_duration(s: &str) -> Result<Nanos, UnitError> {
    let bad = || UnitError::BadDuration(s.to_string());
    let (v, unit) = split_number(s).ok_or_else(bad)?;
    let mult = match unit.to_ascii_lowercase().as_str() {
        "" | "s" | "sec" => 1e9,
        "ms" => 1e6,
        "us" | "µs" => 1e3,
        "ns" => 1.0,
        "min" => 60e9,
        _ => return Err(bad()),
    };
    Ok((v * mult).round() as Nanos)
}

/// Parses `"200kB"`, `"1MB"`, `"1500B"`, or a bare number of bytes. Decimal prefixes.
pub fn parse_size(s: &str) -> Result<u64, UnitError> {
    let bad = || UnitError::BadSize(s.to_string());
    let (v, unit) = split_number(s).ok_or_else(bad)?;
    let mult = match unit {
        "" | "B" => 1.0,
        "kB" | "KB" => 1e3,
        "MB" => 1e6,
        "GB" => 1e9,
        _ => return Err(bad()),
    };
    Ok((v * mult).round() as u64)
}

pub fn format_rate(v: Bps) -> String {
    let f = v as f64;
    if v >= GBPS {
        format!("{}Gb/s", trim_float(f / 1e9))
    } else if v >= MBPS {
        format!("{}Mb/s", trim_float(f / 1e6))
    } else if v >= KBPS {
        format!("{}Kb/s", trim_float(f / 1e3))
    } else {
        format!("{v}b/s")
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn secs(t: Nanos) -> f64 {
    t as f64 / 1e9
}

pub fn from_secs(s: f64) -> Nanos {
    (s * 1e9).round() as Nanos
}

impl FromStr for Limit {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unlimited" | "inf" | "none" => Ok(Limit::Unlimited),
            _ => parse_rate(s).map(Limit::Finite),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Raw {
    Int(u64),
    Float(f64),
    Str(String),
}

/// Serde adapter for rates written as numbers or unit strings.
pub mod rate {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Bps, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rate(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bps, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v),
            Raw::Float(v) if v >= 0.0 => Ok(v.round() as Bps),
            Raw::Float(v) => Err(serde::de::Error::custom(format!("negative rate {v}"))),
            Raw::Str(s) => parse_rate(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Serde adapter for optional upper bounds; `null`, absent or `"unlimited"` mean no bound.
pub mod limit {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Limit, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Limit::Finite(x) => s.serialize_str(&format_rate(*x)),
            Limit::Unlimited => s.serialize_str("unlimited"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Limit, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(Limit::Unlimited),
            Some(Raw::Int(v)) => Ok(Limit::Finite(v)),
            Some(Raw::Float(v)) if v >= 0.0 => Ok(Limit::Finite(v.round() as Bps)),
            Some(Raw::Float(v)) => Err(serde::de::Error::custom(format!("negative rate {v}"))),
            Some(Raw::Str(s)) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Serde adapter for durations written as numbers of seconds or unit strings.
pub mod duration {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Nanos, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v}ns"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Nanos, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v * NS_PER_SEC),
            Raw::Float(v) if v >= 0.0 => Ok(from_secs(v)),
            Raw::Float(v) => Err(serde::de::Error::custom(format!("negative duration {v}"))),
            Raw::Str(s) => parse_duration(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// Serde adapter for byte sizes written as numbers or unit strings.
pub mod size {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v),
            Raw::Float(v) if v >= 0.0 => Ok(v.round() as u64),
            Raw::Float(v) => Err(serde::de::Error::custom(format!("negative size {v}"))),
            Raw::Str(s) => parse_size(&s).map_err(serde::de::Error::custom),
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        limit::serialize(self, s)
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        limit::deserialize(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        assert_eq!(parse_rate("6Gb/s").unwrap(), 6 * GBPS);
        assert_eq!(parse_rate("100 Mbps").unwrap(), 100 * MBPS);
        assert_eq!(parse_rate("0.5G").unwrap(), 500 * MBPS);
        assert_eq!(parse_rate("1e9").unwrap(), GBPS);
        assert_eq!(parse_rate("1500").unwrap(), 1500);
        assert!(parse_rate("fast").is_err());
        assert!(parse_rate("6 furlongs").is_err());
    }

    #[test]
    fn durations_and_sizes() {
        assert_eq!(parse_duration("500us").unwrap(), 500_000);
        assert_eq!(parse_duration("10ms").unwrap(), 10 * NS_PER_MS);
        assert_eq!(parse_duration("1").unwrap(), NS_PER_SEC);
        assert_eq!(parse_size("200kB").unwrap(), 200_000);
        assert_eq!(parse_size("1MB").unwrap(), 1_000_000);
    }

    #[test]
    fn limit_ops() {
        let a = Limit::Finite(5);
        assert_eq!(a.min(Limit::Unlimited), a);
        assert_eq!(Limit::Unlimited.cap(7), 7);
        assert_eq!(a.cap(7), 5);
        assert_eq!("unlimited".parse::<Limit>().unwrap(), Limit::Unlimited);
        assert_eq!(format_rate(6 * GBPS), "6Gb/s");
        assert_eq!(format_rate(1_500_000), "1.5Mb/s");
    }
}
