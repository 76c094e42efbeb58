//! Policy resolution: highest-priority fully matching policy wins.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::net::{HostId, MacAddr, Proto, SimTime, SwitchId};

use super::policy::{Conditions, LocationSel, PolicyAction, PolicySet, SecurityPolicy, Selector};

/// Everything a policy condition can look at for one packet_in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveCtx {
    /// Switch that reported the packet.
    pub switch: SwitchId,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub proto: Proto,
    pub dst_port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_host: Option<HostId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_host: Option<HostId>,
    /// Location tag of the source host.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_location: Option<String>,
    pub minute_of_day: u16,
    #[serde(default)]
    pub events: BTreeSet<String>,
}

/// Simulated wall clock: minutes since midnight, offset by the configured start.
pub fn minute_of_day(now: SimTime, day_offset_min: u32) -> u16 {
    ((now.as_micros() / 60_000_000 + u64::from(day_offset_min)) % 1_440) as u16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub matched_policy: Option<u32>,
    pub effective_action: PolicyAction,
}

impl PolicyDecision {
    pub fn default_deny() -> Self {
        PolicyDecision { matched_policy: None, effective_action: PolicyAction::Deny }
    }
}

fn selector_matches(sel: &Selector, host: Option<&HostId>, ip: Ipv4Addr, mac: MacAddr) -> bool {
    match sel {
        Selector::Host(h) => host == Some(h),
        Selector::Ip(p) => p.contains(ip),
        Selector::Mac(m) => *m == mac,
    }
}

pub fn conditions_match(c: &Conditions, ctx: &ResolveCtx) -> bool {
    if let Some(s) = &c.src {
        if !selector_matches(s, ctx.src_host.as_ref(), ctx.src_ip, ctx.src_mac) {
            return false;
        }
    }
    if let Some(s) = &c.dst {
        if !selector_matches(s, ctx.dst_host.as_ref(), ctx.dst_ip, ctx.dst_mac) {
            return false;
        }
    }
    if let Some(t) = c.time {
        if !t.contains(ctx.minute_of_day) {
            return false;
        }
    }
    match &c.location {
        Some(LocationSel::Switch(s)) if *s != ctx.switch => return false,
        Some(LocationSel::Tag(t)) if ctx.src_location.as_deref() != Some(t.as_str()) => return false,
        _ => {}
    }
    if let Some(e) = &c.event {
        if !ctx.events.contains(e) {
            return false;
        }
    }
    if let Some(t) = c.traffic {
        if t.proto.is_some_and(|p| p != ctx.proto) || t.dport.is_some_and(|d| d != ctx.dst_port) {
            return false;
        }
    }
    true
}

pub fn policy_matches(p: &SecurityPolicy, ctx: &ResolveCtx) -> bool {
    conditions_match(&p.conditions, ctx)
}

/// First match in resolution order; no match is a deny.
pub fn resolve(ctx: &ResolveCtx, policies: &PolicySet) -> PolicyDecision {
    policies
        .policies()
        .iter()
        .find(|p| policy_matches(p, ctx))
        .map(|p| PolicyDecision { matched_policy: Some(p.policy_id), effective_action: p.action.clone() })
        .unwrap_or_else(PolicyDecision::default_deny)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cssa::policy::{Ipv4Prefix, LimitTemplate, TimeWindow, TrafficSel};
    use crate::secfn::Scope;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx() -> ResolveCtx {
        ResolveCtx {
            switch: SwitchId::new("SW1"),
            src_ip: Ipv4Addr::new(10, 0, 0, 1),
            dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            src_mac: MacAddr::from_u64(1),
            dst_mac: MacAddr::from_u64(2),
            proto: Proto::Tcp,
            dst_port: 80,
            src_host: Some(HostId::new("a")),
            dst_host: Some(HostId::new("b")),
            src_location: Some("plant".into()),
            minute_of_day: 600,
            events: BTreeSet::new(),
        }
    }

    fn pol(id: u32, priority: u32, conditions: Conditions, action: PolicyAction) -> SecurityPolicy {
        SecurityPolicy { policy_id: id, priority, conditions, action }
    }

    fn dst_b() -> Conditions {
        Conditions { dst: Some(Selector::Host(HostId::new("b"))), ..Default::default() }
    }

    #[test]
    fn empty_set_denies() {
        let d = resolve(&ctx(), &PolicySet::default());
        assert_eq!(d, PolicyDecision::default_deny());
    }

    #[test]
    fn higher_priority_deny_beats_permit() {
        let set = PolicySet::new(
            vec![
                pol(1, 5, dst_b(), PolicyAction::Permit { max_latency_us: None }),
                pol(2, 9, dst_b(), PolicyAction::Deny),
            ],
            Default::default(),
        )
        .unwrap();
        let d = resolve(&ctx(), &set);
        assert_eq!(d.matched_policy, Some(2));
        assert_eq!(d.effective_action, PolicyAction::Deny);
    }

    #[test]
    fn equal_priority_lowest_id_wins() {
        let set = PolicySet::new(
            vec![pol(7, 3, dst_b(), PolicyAction::Deny), pol(4, 3, dst_b(), PolicyAction::Encrypt)],
            Default::default(),
        )
        .unwrap();
        assert_eq!(resolve(&ctx(), &set).matched_policy, Some(4));
    }

    #[test]
    fn time_window_wraps_midnight() {
        let w = TimeWindow { start_min: 22 * 60, end_min: 6 * 60 };
        assert!(w.contains(23 * 60));
        assert!(w.contains(0));
        assert!(!w.contains(12 * 60));
        assert!(!w.contains(6 * 60));
        assert!(w.contains(22 * 60));
    }

    #[test]
    fn wall_clock_offset() {
        assert_eq!(minute_of_day(SimTime::ZERO, 8 * 60), 480);
        assert_eq!(minute_of_day(SimTime::from_secs(90 * 60), 23 * 60), 30);
    }

    // Random instance generator shared by the oracle and scaling tests.
    fn random_selector(rng: &mut ChaCha8Rng) -> Selector {
        match rng.random_range(0..3) {
            0 => Selector::Host(HostId::new(format!("h{}", rng.random_range(0..4)))),
            1 => Selector::Ip(Ipv4Prefix { addr: Ipv4Addr::new(10, 0, 0, rng.random_range(0..8)), len: rng.random_range(29..=32) }),
            _ => Selector::Mac(MacAddr::from_u64(rng.random_range(0..8))),
        }
    }

    fn random_conditions(rng: &mut ChaCha8Rng) -> Conditions {
        loop {
            let mut c = Conditions::default();
            if rng.random_bool(0.4) {
                c.src = Some(random_selector(rng));
            }
            if rng.random_bool(0.4) {
                c.dst = Some(random_selector(rng));
            }
            if rng.random_bool(0.2) {
                let s = rng.random_range(0..1440u16);
                let mut e = rng.random_range(0..1440u16);
                if e == s {
                    e = (s + 1) % 1440;
                }
                c.time = Some(TimeWindow { start_min: s, end_min: e });
            }
            if rng.random_bool(0.2) {
                c.location = Some(if rng.random_bool(0.5) {
                    LocationSel::Switch(SwitchId::new(format!("SW{}", rng.random_range(0..3))))
                } else {
                    LocationSel::Tag(format!("loc{}", rng.random_range(0..3)))
                });
            }
            if rng.random_bool(0.15) {
                c.event = Some(format!("ev{}", rng.random_range(0..3)));
            }
            if rng.random_bool(0.4) {
                c.traffic = Some(TrafficSel {
                    proto: rng.random_bool(0.5).then(|| if rng.random_bool(0.5) { Proto::Tcp } else { Proto::Udp }),
                    dport: rng.random_bool(0.6).then(|| [80, 502, 22][rng.random_range(0..3)]),
                });
            }
            if !c.is_empty() {
                return c;
            }
        }
    }

    fn random_action(rng: &mut ChaCha8Rng) -> PolicyAction {
        match rng.random_range(0..5) {
            0 => PolicyAction::Permit { max_latency_us: None },
            1 => PolicyAction::Deny,
            2 => PolicyAction::Encrypt,
            3 => PolicyAction::Isolate,
            _ => PolicyAction::RateLimit {
                limits: vec![LimitTemplate { scope: Scope::PerDevice, threshold: 5, window_ms: 1000 }],
            },
        }
    }

    fn random_set(rng: &mut ChaCha8Rng) -> Vec<SecurityPolicy> {
        let n = rng.random_range(0..=100);
        let mut ids: Vec<u32> = (0..1000).collect();
        (0..n)
            .map(|i| {
                let j = rng.random_range(i..ids.len());
                ids.swap(i, j);
                pol(ids[i], rng.random_range(0..20), random_conditions(rng), random_action(rng))
            })
            .collect()
    }

    fn random_ctx(rng: &mut ChaCha8Rng) -> ResolveCtx {
        let src = rng.random_range(0..8u8);
        let dst = rng.random_range(0..8u8);
        ResolveCtx {
            switch: SwitchId::new(format!("SW{}", rng.random_range(0..3))),
            src_ip: Ipv4Addr::new(10, 0, 0, src),
            dst_ip: Ipv4Addr::new(10, 0, 0, dst),
            src_mac: MacAddr::from_u64(u64::from(src)),
            dst_mac: MacAddr::from_u64(u64::from(dst)),
            proto: if rng.random_bool(0.5) { Proto::Tcp } else { Proto::Udp },
            dst_port: [80, 502, 22, 443][rng.random_range(0..4)],
            src_host: (src < 4).then(|| HostId::new(format!("h{src}"))),
            dst_host: (dst < 4).then(|| HostId::new(format!("h{dst}"))),
            src_location: rng.random_bool(0.8).then(|| format!("loc{}", rng.random_range(0..3))),
            minute_of_day: rng.random_range(0..1440),
            events: (0..3).filter(|_| rng.random_bool(0.3)).map(|i| format!("ev{i}")).collect(),
        }
    }

    // Independent oracle: full scan keeping the best (priority, -id) match,
    // with every condition re-evaluated field by field.
    fn oracle(ctx: &ResolveCtx, policies: &[SecurityPolicy]) -> PolicyDecision {
        let mut best: Option<&SecurityPolicy> = None;
        for p in policies {
            let c = &p.conditions;
            let sel_ok = |s: &Option<Selector>, host: &Option<HostId>, ip: Ipv4Addr, mac: MacAddr| match s {
                None => true,
                Some(Selector::Host(h)) => host.as_ref() == Some(h),
                Some(Selector::Ip(pre)) => {
                    let shift = 32 - u32::from(pre.len);
                    let (a, b) = (u32::from(pre.addr), u32::from(ip));
                    shift == 32 || (a >> shift) == (b >> shift)
                }
                Some(Selector::Mac(m)) => *m == mac,
            };
            let time_ok = c.time.is_none_or(|w| {
                let m = ctx.minute_of_day;
                if w.start_min <= w.end_min {
                    w.start_min <= m && m < w.end_min
                } else {
                    !(w.end_min <= m && m < w.start_min)
                }
            });
            let loc_ok = match &c.location {
                None => true,
                Some(LocationSel::Switch(s)) => *s == ctx.switch,
                Some(LocationSel::Tag(t)) => ctx.src_location.as_ref() == Some(t),
            };
            let ev_ok = c.event.as_ref().is_none_or(|e| ctx.events.contains(e));
            let tr_ok = c.traffic.is_none_or(|t| {
                t.proto.is_none_or(|p| p == ctx.proto) && t.dport.is_none_or(|d| d == ctx.dst_port)
            });
            let ok = sel_ok(&c.src, &ctx.src_host, ctx.src_ip, ctx.src_mac)
                && sel_ok(&c.dst, &ctx.dst_host, ctx.dst_ip, ctx.dst_mac)
                && time_ok
                && loc_ok
                && ev_ok
                && tr_ok;
            if ok {
                let better = match best {
                    None => true,
                    Some(b) => p.priority > b.priority || (p.priority == b.priority && p.policy_id < b.policy_id),
                };
                if better {
                    best = Some(p);
                }
            }
        }
        match best {
            Some(p) => PolicyDecision { matched_policy: Some(p.policy_id), effective_action: p.action.clone() },
            None => PolicyDecision { matched_policy: None, effective_action: PolicyAction::Deny },
        }
    }

    #[test]
    fn resolver_equals_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut zero_match = 0;
        for _ in 0..10_000 {
            let policies = random_set(&mut rng);
            let set = PolicySet::new(policies.clone(), Default::default()).unwrap();
            let c = random_ctx(&mut rng);
            let got = resolve(&c, &set);
            let want = oracle(&c, &policies);
            assert_eq!(got, want, "ctx {c:?}");
            if want.matched_policy.is_none() {
                zero_match += 1;
                assert_eq!(got.effective_action, PolicyAction::Deny);
            }
        }
        assert!(zero_match > 100, "generator should produce unmatched contexts");
    }

    #[test]
    fn scaling_priorities_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000 {
            let policies = random_set(&mut rng);
            let k = rng.random_range(1..50u32);
            let scaled: Vec<SecurityPolicy> =
                policies.iter().cloned().map(|mut p| { p.priority *= k; p }).collect();
            let a = PolicySet::new(policies, Default::default()).unwrap();
            let b = PolicySet::new(scaled, Default::default()).unwrap();
            let c = random_ctx(&mut rng);
            assert_eq!(resolve(&c, &a).matched_policy, resolve(&c, &b).matched_policy);
        }
    }
}
