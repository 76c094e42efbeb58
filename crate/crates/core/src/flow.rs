//! Flow matches, rules, actions, and flow-table lookup.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::net::{MacAddr, Packet, PortId, Proto, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Exact-or-wildcard match over the header fields. An absent field is a wildcard.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FlowMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_port: Option<PortId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_mac: Option<MacAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_mac: Option<MacAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<Proto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
}

fn field_ok<T: PartialEq>(want: &Option<T>, have: &T) -> bool {
    want.as_ref().is_none_or(|w| w == have)
}

fn field_within<T: PartialEq>(narrow: &Option<T>, wide: &Option<T>) -> bool {
    match wide {
        None => true,
        Some(w) => narrow.as_ref() == Some(w),
    }
}

impl FlowMatch {
    /// The all-wildcard match.
    pub fn any() -> Self {
        FlowMatch::default()
    }

    /// Service-level match: source, destination, protocol, destination port.
    pub fn service_of(pkt: &Packet) -> Self {
        FlowMatch {
            src_ip: Some(pkt.src_ip),
            dst_ip: Some(pkt.dst_ip),
            proto: Some(pkt.proto),
            dst_port: Some(pkt.dst_port),
            ..FlowMatch::default()
        }
    }

    pub fn with_in_port(mut self, port: PortId) -> Self {
        self.in_port = Some(port);
        self
    }

    pub fn is_wildcard(&self) -> bool {
        *self == FlowMatch::default()
    }

    /// Header-only match; `in_port` wildcarded when `None`.
    pub fn matches(&self, pkt: &Packet, in_port: Option<PortId>) -> bool {
        let port_ok = match (self.in_port, in_port) {
            (None, _) => true,
            (Some(want), Some(have)) => want == have,
            (Some(_), None) => false,
        };
        port_ok
            && field_ok(&self.src_mac, &pkt.src_mac)
            && field_ok(&self.dst_mac, &pkt.dst_mac)
            && field_ok(&self.src_ip, &pkt.src_ip)
            && field_ok(&self.dst_ip, &pkt.dst_ip)
            && field_ok(&self.proto, &pkt.proto)
            && field_ok(&self.src_port, &pkt.src_port)
            && field_ok(&self.dst_port, &pkt.dst_port)
    }

    /// True when every packet matched by `self` is also matched by `wider`.
    pub fn is_subsumed_by(&self, wider: &FlowMatch) -> bool {
        field_within(&self.in_port, &wider.in_port)
            && field_within(&self.src_mac, &wider.src_mac)
            && field_within(&self.dst_mac, &wider.dst_mac)
            && field_within(&self.src_ip, &wider.src_ip)
            && field_within(&self.dst_ip, &wider.dst_ip)
            && field_within(&self.proto, &wider.proto)
            && field_within(&self.src_port, &wider.src_port)
            && field_within(&self.dst_port, &wider.dst_port)
    }
}

impl fmt::Display for FlowMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(p) = self.in_port {
            parts.push(format!("in_port={p}"));
        }
        if let Some(m) = self.src_mac {
            parts.push(format!("src_mac={m}"));
        }
        if let Some(m) = self.dst_mac {
            parts.push(format!("dst_mac={m}"));
        }
        if let Some(ip) = self.src_ip {
            parts.push(format!("src_ip={ip}"));
        }
        if let Some(ip) = self.dst_ip {
            parts.push(format!("dst_ip={ip}"));
        }
        if let Some(p) = self.proto {
            parts.push(format!("proto={}", p.as_str()));
        }
        if let Some(p) = self.src_port {
            parts.push(format!("src_port={p}"));
        }
        if let Some(p) = self.dst_port {
            parts.push(format!("dst_port={p}"));
        }
        if parts.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// Switch-resident security function invoked by a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecFunc {
    Tv,
    FeEncrypt,
    FeDecrypt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    Plain,
    Encrypted,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward(PortId),
    Drop,
    SendToController(String),
    ApplyFunc(SecFunc),
    SetEnvelope(EnvelopeKind),
}

impl Action {
    fn is_terminal(&self) -> bool {
        matches!(self, Action::Forward(_) | Action::Drop | Action::SendToController(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuleError {
    #[error("rule {0} has an empty action list")]
    EmptyActions(RuleId),
    #[error("rule {0}: {1} must be the last action")]
    TerminalNotLast(RuleId, String),
}

/// Priority-ordered match/action entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub rule_id: RuleId,
    #[serde(rename = "match")]
    pub matcher: FlowMatch,
    pub priority: u32,
    pub actions: Vec<Action>,
    /// Seconds without a hit before expiry; 0 disables.
    #[serde(default)]
    pub idle_timeout: u32,
    /// Seconds after install before expiry; 0 disables.
    #[serde(default)]
    pub hard_timeout: u32,
    #[serde(default)]
    pub packet_count: u64,
    #[serde(default)]
    pub byte_count: u64,
    #[serde(default)]
    pub installed_at: SimTime,
    #[serde(default)]
    pub last_hit: SimTime,
}

impl FlowRule {
    pub fn new(rule_id: RuleId, matcher: FlowMatch, priority: u32, actions: Vec<Action>) -> Self {
        FlowRule {
            rule_id,
            matcher,
            priority,
            actions,
            idle_timeout: 0,
            hard_timeout: 0,
            packet_count: 0,
            byte_count: 0,
            installed_at: SimTime::ZERO,
            last_hit: SimTime::ZERO,
        }
    }

    /// Actions must be nonempty and at most one of Forward/Drop/SendToController may
    /// appear, as the final action. A packet therefore leaves a rule at most once.
    pub fn validate(&self) -> Result<(), RuleError> {
        if self.actions.is_empty() {
            return Err(RuleError::EmptyActions(self.rule_id));
        }
        let last = self.actions.len() - 1;
        for (i, a) in self.actions.iter().enumerate() {
            if a.is_terminal() && i != last {
                return Err(RuleError::TerminalNotLast(self.rule_id, format!("{a:?}")));
            }
        }
        Ok(())
    }

    fn order_key(&self) -> (std::cmp::Reverse<u32>, RuleId) {
        (std::cmp::Reverse(self.priority), self.rule_id)
    }
}

/// Highest-priority matching rule; equal priorities resolve to the lowest rule id.
pub fn lookup_flow<'a>(table: &'a [FlowRule], pkt: &Packet, in_port: PortId) -> Option<&'a FlowRule> {
    table
        .iter()
        .filter(|r| r.matcher.matches(pkt, Some(in_port)))
        .min_by_key(|r| r.order_key())
}

/// A switch flow table kept sorted by (priority desc, rule id asc), so the first
/// matching entry is the winner.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    rules: Vec<FlowRule>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[FlowRule] {
        &self.rules
    }

    pub fn contains(&self, id: RuleId) -> bool {
        self.rules.iter().any(|r| r.rule_id == id)
    }

    pub fn get(&self, id: RuleId) -> Option<&FlowRule> {
        self.rules.iter().find(|r| r.rule_id == id)
    }

    /// Inserts keeping sort order. Caller checks for duplicate ids.
    pub fn insert(&mut self, rule: FlowRule) {
        let key = rule.order_key();
        let pos = self.rules.partition_point(|r| r.order_key() < key);
        self.rules.insert(pos, rule);
    }

    pub fn lookup_index(&self, pkt: &Packet, in_port: PortId) -> Option<usize> {
        self.rules.iter().position(|r| r.matcher.matches(pkt, Some(in_port)))
    }

    pub fn rule_mut(&mut self, idx: usize) -> &mut FlowRule {
        &mut self.rules[idx]
    }

    /// Removes every rule whose match equals or is subsumed by `predicate`.
    pub fn remove_matching(&mut self, predicate: &FlowMatch) -> Vec<FlowRule> {
        let (gone, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.rules)
            .into_iter()
            .partition(|r| r.matcher.is_subsumed_by(predicate));
        self.rules = keep;
        gone
    }

    pub fn remove(&mut self, id: RuleId) -> Option<FlowRule> {
        let pos = self.rules.iter().position(|r| r.rule_id == id)?;
        Some(self.rules.remove(pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::PacketId;
    use proptest::prelude::*;

    fn pkt(src: u8, dst: u8, dport: u16) -> Packet {
        let mut p = Packet::new(
            MacAddr::from_u64(src as u64),
            MacAddr::from_u64(dst as u64),
            Ipv4Addr::new(10, 0, 0, src),
            Ipv4Addr::new(10, 0, 0, dst),
            Proto::Tcp,
            40000,
            dport,
            vec![],
        );
        p.pkt_id = PacketId(1);
        p
    }

    fn rule(id: u64, prio: u32, m: FlowMatch) -> FlowRule {
        FlowRule::new(RuleId(id), m, prio, vec![Action::Drop])
    }

    #[test]
    fn empty_table_misses() {
        assert!(lookup_flow(&[], &pkt(1, 2, 80), PortId(1)).is_none());
        assert!(FlowTable::new().lookup_index(&pkt(1, 2, 80), PortId(1)).is_none());
    }

    #[test]
    fn higher_priority_wins() {
        let t = vec![rule(1, 10, FlowMatch::any()), rule(2, 20, FlowMatch::any())];
        assert_eq!(lookup_flow(&t, &pkt(1, 2, 80), PortId(1)).unwrap().rule_id, RuleId(2));
    }

    #[test]
    fn ties_go_to_lowest_rule_id() {
        let t = vec![rule(9, 5, FlowMatch::any()), rule(3, 5, FlowMatch::any())];
        assert_eq!(lookup_flow(&t, &pkt(1, 2, 80), PortId(1)).unwrap().rule_id, RuleId(3));
    }

    #[test]
    fn wildcard_matches_everything() {
        assert!(FlowMatch::any().matches(&pkt(1, 2, 80), Some(PortId(3))));
        assert!(FlowMatch::any().matches(&pkt(7, 9, 1), None));
    }

    #[test]
    fn validate_rejects_bad_action_lists() {
        let mut r = rule(1, 1, FlowMatch::any());
        r.actions.clear();
        assert_eq!(r.validate(), Err(RuleError::EmptyActions(RuleId(1))));
        r.actions = vec![Action::Forward(PortId(1)), Action::ApplyFunc(SecFunc::Tv)];
        assert!(matches!(r.validate(), Err(RuleError::TerminalNotLast(..))));
        r.actions = vec![Action::ApplyFunc(SecFunc::Tv), Action::Forward(PortId(1))];
        assert!(r.validate().is_ok());
    }

    #[test]
    fn remove_all_wildcard_empties_table() {
        let mut t = FlowTable::new();
        for i in 0..5 {
            t.insert(rule(i, i as u32, FlowMatch { dst_port: Some(i as u16), ..Default::default() }));
        }
        assert_eq!(t.remove_matching(&FlowMatch::any()).len(), 5);
        assert!(t.is_empty());
    }

    #[test]
    fn remove_matching_nothing() {
        let mut t = FlowTable::new();
        t.insert(rule(1, 1, FlowMatch { dst_port: Some(80), ..Default::default() }));
        let pred = FlowMatch { dst_port: Some(443), ..Default::default() };
        assert_eq!(t.remove_matching(&pred).len(), 0);
        assert_eq!(t.len(), 1);
    }

    /// Subsumption checked against set inclusion over an enumerated universe of
    /// three fields, each drawn from {a, b} plus one value no match mentions.
    #[test]
    fn subsumption_agrees_with_enumeration_over_three_fields() {
        let values: [Option<u8>; 3] = [None, Some(1), Some(2)];
        let universe = [1u8, 2, 3];
        let mk = |s: Option<u8>, d: Option<u8>, p: Option<u8>| FlowMatch {
            src_ip: s.map(|v| Ipv4Addr::new(10, 0, 0, v)),
            dst_ip: d.map(|v| Ipv4Addr::new(10, 0, 1, v)),
            dst_port: p.map(u16::from),
            ..Default::default()
        };
        let mut all = Vec::new();
        for s in values {
            for d in values {
                for p in values {
                    all.push(mk(s, d, p));
                }
            }
        }
        let mut packets = Vec::new();
        for s in universe {
            for d in universe {
                for p in universe {
                    let mut pk = pkt(0, 0, p as u16);
                    pk.src_ip = Ipv4Addr::new(10, 0, 0, s);
                    pk.dst_ip = Ipv4Addr::new(10, 0, 1, d);
                    packets.push(pk);
                }
            }
        }
        for narrow in &all {
            for wide in &all {
                let inclusion = packets
                    .iter()
                    .filter(|p| narrow.matches(p, None))
                    .all(|p| wide.matches(p, None));
                assert_eq!(narrow.is_subsumed_by(wide), inclusion, "{narrow} within {wide}");
            }
        }
    }

    fn arb_match() -> impl Strategy<Value = FlowMatch> {
        (
            proptest::option::of(1u16..3),
            proptest::option::of(1u8..4),
            proptest::option::of(1u8..4),
            proptest::option::of(prop_oneof![Just(Proto::Tcp), Just(Proto::Udp)]),
            proptest::option::of(79u16..82),
        )
            .prop_map(|(port, s, d, proto, dport)| FlowMatch {
                in_port: port.map(PortId),
                src_ip: s.map(|v| Ipv4Addr::new(10, 0, 0, v)),
                dst_ip: d.map(|v| Ipv4Addr::new(10, 0, 0, v)),
                proto,
                dst_port: dport,
                ..Default::default()
            })
    }

    proptest! {
        /// 50 random rules: table lookup equals a naive (priority desc, id asc) scan.
        #[test]
        fn lookup_agrees_with_linear_scan(
            specs in proptest::collection::vec((arb_match(), 0u32..6), 50),
            s in 1u8..4, d in 1u8..4, dport in 79u16..82, port in 1u16..3,
        ) {
            let rules: Vec<FlowRule> = specs
                .into_iter()
                .enumerate()
                .map(|(i, (m, prio))| rule(i as u64 * 7 % 50, prio, m))
                .collect();
            let p = pkt(s, d, dport);
            let in_port = PortId(port);

            // naive oracle: walk all, keep the best seen
            let mut best: Option<&FlowRule> = None;
            for r in &rules {
                if !r.matcher.matches(&p, Some(in_port)) {
                    continue;
                }
                best = match best {
                    None => Some(r),
                    Some(b) if r.priority > b.priority
                        || (r.priority == b.priority && r.rule_id < b.rule_id) => Some(r),
                    keep => keep,
                };
            }
            let got = lookup_flow(&rules, &p, in_port).map(|r| r.rule_id);
            prop_assert_eq!(got, best.map(|r| r.rule_id));

            let mut table = FlowTable::new();
            for r in rules.iter().cloned() {
                table.insert(r);
            }
            let via_table = table.lookup_index(&p, in_port).map(|i| table.rules()[i].rule_id);
            prop_assert_eq!(via_table, best.map(|r| r.rule_id));
        }
    }
}
