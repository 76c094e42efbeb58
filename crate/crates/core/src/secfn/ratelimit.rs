//! Fixed-window new-flow admission with per-scope static thresholds.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::flow::FlowMatch;
use crate::net::{Proto, SimTime, SwitchId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerFlow,
    PerDevice,
    PerSwitch,
    PerDomain,
    PerLocation,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::PerFlow => "per_flow",
            Scope::PerDevice => "per_device",
            Scope::PerSwitch => "per_switch",
            Scope::PerDomain => "per_domain",
            Scope::PerLocation => "per_location",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_flow" => Ok(Scope::PerFlow),
            "per_device" => Ok(Scope::PerDevice),
            "per_switch" => Ok(Scope::PerSwitch),
            "per_domain" => Ok(Scope::PerDomain),
            "per_location" => Ok(Scope::PerLocation),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

pub const DEFAULT_WINDOW_MS: u32 = 1_000;

fn default_window() -> u32 {
    DEFAULT_WINDOW_MS
}

/// Static threshold on new flows per window toward a protected destination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RateLimitSpec {
    pub scope: Scope,
    /// Maximum new flows admitted per window.
    pub threshold: u32,
    pub target: FlowMatch,
    #[serde(default = "default_window")]
    pub window_ms: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RateLimitError {
    #[error("rate limit threshold must be positive")]
    ZeroThreshold,
    #[error("rate limit window must be positive")]
    ZeroWindow,
}

impl RateLimitSpec {
    pub fn new(scope: Scope, threshold: u32, target: FlowMatch) -> Self {
        RateLimitSpec { scope, threshold, target, window_ms: DEFAULT_WINDOW_MS }
    }

    pub fn validate(&self) -> Result<(), RateLimitError> {
        if self.threshold == 0 {
            return Err(RateLimitError::ZeroThreshold);
        }
        if self.window_ms == 0 {
            return Err(RateLimitError::ZeroWindow);
        }
        Ok(())
    }

    pub fn window_index(&self, now: SimTime) -> u64 {
        now.as_micros() / (u64::from(self.window_ms) * 1_000)
    }
}

/// Counter key within one scope.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKey {
    Flow { src_ip: Ipv4Addr, dst_ip: Ipv4Addr, proto: Proto, dst_port: u16 },
    Device(Ipv4Addr),
    Switch(SwitchId),
    Domain(String),
    Location(String),
}

impl ScopeKey {
    pub fn scope(&self) -> Scope {
        match self {
            ScopeKey::Flow { .. } => Scope::PerFlow,
            ScopeKey::Device(_) => Scope::PerDevice,
            ScopeKey::Switch(_) => Scope::PerSwitch,
            ScopeKey::Domain(_) => Scope::PerDomain,
            ScopeKey::Location(_) => Scope::PerLocation,
        }
    }
}

impl fmt::Display for ScopeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeKey::Flow { src_ip, dst_ip, proto, dst_port } => {
                write!(f, "flow:{src_ip}->{dst_ip}:{dst_port}/{}", proto.as_str())
            }
            ScopeKey::Device(ip) => write!(f, "device:{ip}"),
            ScopeKey::Switch(s) => write!(f, "switch:{s}"),
            ScopeKey::Domain(d) => write!(f, "domain:{d}"),
            ScopeKey::Location(l) => write!(f, "location:{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Deny(Scope),
}

#[derive(Debug, Clone, Copy, Default)]
struct WindowCount {
    window: u64,
    count: u32,
}

/// Per-(limit, key) fixed-window counters.
#[derive(Debug, Clone, Default)]
pub struct FixedWindowLimiter {
    counters: BTreeMap<(RateLimitSpec, ScopeKey), WindowCount>,
}

impl FixedWindowLimiter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Admits iff every applicable counter is below its threshold; on admit every
    /// counter increments. Counters reset at window boundaries.
    pub fn admit(&mut self, checks: &[(RateLimitSpec, ScopeKey)], now: SimTime) -> Admission {
        for (spec, key) in checks {
            let window = spec.window_index(now);
            let count = match self.counters.get(&(spec.clone(), key.clone())) {
                Some(c) if c.window == window => c.count,
                _ => 0,
            };
            if count >= spec.threshold {
                return Admission::Deny(spec.scope);
            }
        }
        for (spec, key) in checks {
            let window = spec.window_index(now);
            let entry = self.counters.entry((spec.clone(), key.clone())).or_default();
            if entry.window != window {
                *entry = WindowCount { window, count: 0 };
            }
            entry.count += 1;
        }
        Admission::Admit
    }

    /// Current count for a key in the window containing `now`.
    pub fn count(&self, spec: &RateLimitSpec, key: &ScopeKey, now: SimTime) -> u32 {
        match self.counters.get(&(spec.clone(), key.clone())) {
            Some(c) if c.window == spec.window_index(now) => c.count,
            _ => 0,
        }
    }

    /// Keeps counters only for limits still present after a reconfiguration.
    pub fn retain_specs(&mut self, specs: &[RateLimitSpec]) {
        self.counters.retain(|(spec, _), _| specs.contains(spec));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> FlowMatch {
        FlowMatch { dst_ip: Some(Ipv4Addr::new(10, 0, 0, 9)), ..Default::default() }
    }

    #[test]
    fn exactly_threshold_admitted_per_window() {
        let spec = RateLimitSpec::new(Scope::PerSwitch, 100, target());
        let key = ScopeKey::Switch("SW1".into());
        let mut lim = FixedWindowLimiter::new();
        let mut admitted = 0;
        let mut denied = 0;
        for i in 0..150u64 {
            match lim.admit(&[(spec.clone(), key.clone())], SimTime(i * 5_000)) {
                Admission::Admit => admitted += 1,
                Admission::Deny(Scope::PerSwitch) => denied += 1,
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!((admitted, denied), (100, 50));
    }

    #[test]
    fn first_flow_of_window_admitted_and_counts_reset() {
        let spec = RateLimitSpec::new(Scope::PerDevice, 1, target());
        let key = ScopeKey::Device(Ipv4Addr::new(10, 0, 0, 1));
        let mut lim = FixedWindowLimiter::new();
        let checks = [(spec.clone(), key.clone())];
        assert_eq!(lim.admit(&checks, SimTime(0)), Admission::Admit);
        assert_eq!(lim.admit(&checks, SimTime(999_999)), Admission::Deny(Scope::PerDevice));
        assert_eq!(lim.admit(&checks, SimTime(1_000_000)), Admission::Admit);
        assert_eq!(lim.count(&spec, &key, SimTime(1_000_001)), 1);
    }

    /// Two scopes, replayed event by event: device A sends 10 then device B sends 10,
    /// all inside one window, through one switch.
    #[test]
    fn device_and_switch_budgets_interact() {
        let dev = RateLimitSpec::new(Scope::PerDevice, 5, target());
        let sw = RateLimitSpec::new(Scope::PerSwitch, 8, target());
        let a = Ipv4Addr::new(10, 0, 0, 1);
        let b = Ipv4Addr::new(10, 0, 0, 2);
        let mut lim = FixedWindowLimiter::new();
        let mut admitted = BTreeMap::new();
        for (i, src) in std::iter::repeat_n(a, 10).chain(std::iter::repeat_n(b, 10)).enumerate() {
            let checks = [
                (dev.clone(), ScopeKey::Device(src)),
                (sw.clone(), ScopeKey::Switch("SW1".into())),
            ];
            if lim.admit(&checks, SimTime(i as u64)) == Admission::Admit {
                *admitted.entry(src).or_insert(0) += 1;
            }
        }
        assert_eq!(admitted[&a], 5);
        assert_eq!(admitted[&b], 3);
    }

    #[test]
    fn denial_does_not_consume_budget() {
        let dev = RateLimitSpec::new(Scope::PerDevice, 1, target());
        let sw = RateLimitSpec::new(Scope::PerSwitch, 2, target());
        let mut lim = FixedWindowLimiter::new();
        let a = ScopeKey::Device(Ipv4Addr::new(10, 0, 0, 1));
        let s = ScopeKey::Switch("S".into());
        let checks = [(dev.clone(), a), (sw.clone(), s.clone())];
        assert_eq!(lim.admit(&checks, SimTime(0)), Admission::Admit);
        assert_eq!(lim.admit(&checks, SimTime(1)), Admission::Deny(Scope::PerDevice));
        assert_eq!(lim.count(&sw, &s, SimTime(2)), 1);
    }

    #[test]
    fn validation() {
        let mut spec = RateLimitSpec::new(Scope::PerFlow, 0, FlowMatch::any());
        assert_eq!(spec.validate(), Err(RateLimitError::ZeroThreshold));
        spec.threshold = 3;
        spec.window_ms = 0;
        assert_eq!(spec.validate(), Err(RateLimitError::ZeroWindow));
    }
}
