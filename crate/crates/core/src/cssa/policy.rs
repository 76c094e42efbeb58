//! Security policies and their XML form.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use roxmltree::Node;
use serde::{Deserialize, Serialize};

use crate::net::{HostId, MacAddr, Proto, SwitchId};
use crate::secfn::ratelimit::DEFAULT_WINDOW_MS;
use crate::secfn::{DpiError, DpiRuleset, Scope};
use crate::xml::{escape_attr, node_path, wrap_fragment, WRAPPER};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("XML syntax error: {0}")]
    XmlSyntax(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("policy id {0} is defined twice")]
    DuplicatePolicyId(u32),
    #[error("policy {policy_id} references unknown ruleset {ruleset:?}")]
    DanglingRulesetRef { policy_id: u32, ruleset: String },
    #[error("ruleset {0:?} is defined twice")]
    DuplicateRuleset(String),
    #[error("ruleset {id:?}: {source}")]
    Ruleset { id: String, source: DpiError },
}

/// IPv4 prefix; a bare address is a /32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ipv4Prefix {
    pub addr: Ipv4Addr,
    pub len: u8,
}

impl Ipv4Prefix {
    pub fn host(addr: Ipv4Addr) -> Self {
        Ipv4Prefix { addr, len: 32 }
    }

    fn mask(self) -> u32 {
        if self.len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.len))
        }
    }

    pub fn contains(self, ip: Ipv4Addr) -> bool {
        (u32::from(ip) & self.mask()) == (u32::from(self.addr) & self.mask())
    }
}

impl fmt::Display for Ipv4Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len == 32 {
            write!(f, "{}", self.addr)
        } else {
            write!(f, "{}/{}", self.addr, self.len)
        }
    }
}

impl FromStr for Ipv4Prefix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, l) = match s.split_once('/') {
            Some((a, l)) => (a, l.parse::<u8>().map_err(|_| format!("bad prefix length in {s:?}"))?),
            None => (s, 32),
        };
        if l > 32 {
            return Err(format!("bad prefix length in {s:?}"));
        }
        let addr = a.parse().map_err(|_| format!("bad IPv4 address {a:?}"))?;
        Ok(Ipv4Prefix { addr, len: l })
    }
}

/// Host-or-address selector for `<src>` and `<dst>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Host(HostId),
    Ip(Ipv4Prefix),
    Mac(MacAddr),
}

/// Wall-clock-of-day window in minutes, `[start, end)`; wraps past midnight
/// when `start > end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_min: u16,
    pub end_min: u16,
}

impl TimeWindow {
    pub fn contains(self, minute_of_day: u16) -> bool {
        if self.start_min < self.end_min {
            (self.start_min..self.end_min).contains(&minute_of_day)
        } else {
            minute_of_day >= self.start_min || minute_of_day < self.end_min
        }
    }
}

fn parse_hhmm(s: &str) -> Option<u16> {
    let (h, m) = s.split_once(':')?;
    let (h, m): (u16, u16) = (h.parse().ok()?, m.parse().ok()?);
    (h < 24 && m < 60).then_some(h * 60 + m)
}

fn fmt_hhmm(m: u16) -> String {
    format!("{:02}:{:02}", m / 60, m % 60)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationSel {
    /// The switch the packet entered on.
    Switch(SwitchId),
    /// The source host's location tag.
    Tag(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TrafficSel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<Proto>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dport: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Conditions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<Selector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<Selector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<LocationSel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSel>,
}

impl Conditions {
    pub fn is_empty(&self) -> bool {
        self.src.is_none()
            && self.dst.is_none()
            && self.time.is_none()
            && self.location.is_none()
            && self.event.is_none()
            && self.traffic.is_none()
    }
}

/// One new-flow limit inside a `<ratelimit>` action. The target is filled in
/// per flow at enforcement time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LimitTemplate {
    pub scope: Scope,
    pub threshold: u32,
    pub window_ms: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum PolicyAction {
    Permit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_latency_us: Option<u64>,
    },
    Deny,
    RateLimit { limits: Vec<LimitTemplate> },
    Encrypt,
    Monitor { ruleset: String },
    Isolate,
}

impl PolicyAction {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyAction::Permit { .. } => "permit",
            PolicyAction::Deny => "deny",
            PolicyAction::RateLimit { .. } => "ratelimit",
            PolicyAction::Encrypt => "encrypt",
            PolicyAction::Monitor { .. } => "monitor",
            PolicyAction::Isolate => "isolate",
        }
    }

    pub fn summary(&self) -> String {
        match self {
            PolicyAction::Permit { max_latency_us: Some(l) } => format!("permit (max {l} us)"),
            PolicyAction::RateLimit { limits } => {
                let parts: Vec<String> = limits
                    .iter()
                    .map(|l| format!("{} {}/{}ms", l.scope.as_str(), l.threshold, l.window_ms))
                    .collect();
                format!("ratelimit {}", parts.join(", "))
            }
            PolicyAction::Monitor { ruleset } => format!("monitor {ruleset}"),
            other => other.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecurityPolicy {
    pub policy_id: u32,
    pub priority: u32,
    pub conditions: Conditions,
    pub action: PolicyAction,
}

/// List entry for consoles and reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy_id: u32,
    pub priority: u32,
    pub action: String,
    pub conditions: String,
}

impl SecurityPolicy {
    pub fn summary(&self) -> PolicySummary {
        PolicySummary {
            policy_id: self.policy_id,
            priority: self.priority,
            action: self.action.summary(),
            conditions: conditions_text(&self.conditions),
        }
    }
}

fn selector_text(s: &Selector) -> String {
    match s {
        Selector::Host(h) => h.to_string(),
        Selector::Ip(p) => p.to_string(),
        Selector::Mac(m) => m.to_string(),
    }
}

fn conditions_text(c: &Conditions) -> String {
    let mut parts = Vec::new();
    if let Some(s) = &c.src {
        parts.push(format!("src={}", selector_text(s)));
    }
    if let Some(s) = &c.dst {
        parts.push(format!("dst={}", selector_text(s)));
    }
    if let Some(t) = c.time {
        parts.push(format!("time={}-{}", fmt_hhmm(t.start_min), fmt_hhmm(t.end_min)));
    }
    match &c.location {
        Some(LocationSel::Switch(s)) => parts.push(format!("location=switch:{s}")),
        Some(LocationSel::Tag(t)) => parts.push(format!("location=tag:{t}")),
        None => {}
    }
    if let Some(e) = &c.event {
        parts.push(format!("event={e}"));
    }
    if let Some(t) = c.traffic {
        if let Some(p) = t.proto {
            parts.push(format!("proto={}", p.as_str()));
        }
        if let Some(d) = t.dport {
            parts.push(format!("dport={d}"));
        }
    }
    parts.join(" ")
}

/// Policies in resolution order (priority descending, policy id ascending) plus
/// the DPI rulesets they may reference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySet {
    policies: Vec<SecurityPolicy>,
    rulesets: BTreeMap<String, DpiRuleset>,
}

fn resolution_order(a: &SecurityPolicy, b: &SecurityPolicy) -> std::cmp::Ordering {
    b.priority.cmp(&a.priority).then(a.policy_id.cmp(&b.policy_id))
}

impl PolicySet {
    pub fn new(policies: Vec<SecurityPolicy>, rulesets: BTreeMap<String, DpiRuleset>) -> Result<Self, PolicyError> {
        let mut set = PolicySet { policies: Vec::new(), rulesets: BTreeMap::new() };
        set.merge(PolicySet { policies, rulesets })?;
        Ok(set)
    }

    pub fn policies(&self) -> &[SecurityPolicy] {
        &self.policies
    }

    pub fn rulesets(&self) -> &BTreeMap<String, DpiRuleset> {
        &self.rulesets
    }

    pub fn ruleset(&self, id: &str) -> Option<&DpiRuleset> {
        self.rulesets.get(id)
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, policy_id: u32) -> Option<&SecurityPolicy> {
        self.policies.iter().find(|p| p.policy_id == policy_id)
    }

    /// Adds every policy and ruleset of `other`. Nothing changes on error.
    pub fn merge(&mut self, other: PolicySet) -> Result<(), PolicyError> {
        let mut rulesets = self.rulesets.clone();
        for (id, rs) in other.rulesets {
            rs.compile().map_err(|source| PolicyError::Ruleset { id: id.clone(), source })?;
            if rulesets.insert(id.clone(), rs).is_some() {
                return Err(PolicyError::DuplicateRuleset(id));
            }
        }
        let mut policies = self.policies.clone();
        for p in other.policies {
            if policies.iter().any(|q| q.policy_id == p.policy_id) {
                return Err(PolicyError::DuplicatePolicyId(p.policy_id));
            }
            if let PolicyAction::Monitor { ruleset } = &p.action {
                if !rulesets.contains_key(ruleset) {
                    return Err(PolicyError::DanglingRulesetRef { policy_id: p.policy_id, ruleset: ruleset.clone() });
                }
            }
            policies.push(p);
        }
        policies.sort_by(resolution_order);
        self.policies = policies;
        self.rulesets = rulesets;
        Ok(())
    }

    pub fn remove(&mut self, policy_id: u32) -> Option<SecurityPolicy> {
        let idx = self.policies.iter().position(|p| p.policy_id == policy_id)?;
        Some(self.policies.remove(idx))
    }

    pub fn summaries(&self) -> Vec<PolicySummary> {
        self.policies.iter().map(SecurityPolicy::summary).collect()
    }

    /// Serializes back to the XML interchange form accepted by [`load_policies`].
    pub fn to_xml(&self) -> String {
        let mut s = String::from("<policies>");
        for p in &self.policies {
            s.push_str(&policy_xml(p));
        }
        s.push_str("</policies>");
        if !self.rulesets.is_empty() {
            s.push_str("<rulesets>");
            for (id, rs) in &self.rulesets {
                s.push_str(&rs.to_xml(id));
            }
            s.push_str("</rulesets>");
        }
        s
    }
}

fn selector_xml(tag: &str, s: &Selector) -> String {
    match s {
        Selector::Host(h) => format!(r#"<{tag} host="{}"/>"#, escape_attr(h.as_str())),
        Selector::Ip(p) => format!(r#"<{tag} ip="{p}"/>"#),
        Selector::Mac(m) => format!(r#"<{tag} mac="{m}"/>"#),
    }
}

fn policy_xml(p: &SecurityPolicy) -> String {
    let c = &p.conditions;
    let mut s = format!(r#"<policy id="{}" priority="{}">"#, p.policy_id, p.priority);
    if let Some(sel) = &c.src {
        s.push_str(&selector_xml("src", sel));
    }
    if let Some(sel) = &c.dst {
        s.push_str(&selector_xml("dst", sel));
    }
    if let Some(t) = c.time {
        s.push_str(&format!(r#"<time start="{}" end="{}"/>"#, fmt_hhmm(t.start_min), fmt_hhmm(t.end_min)));
    }
    match &c.location {
        Some(LocationSel::Switch(sw)) => s.push_str(&format!(r#"<location switch="{}"/>"#, escape_attr(sw.as_str()))),
        Some(LocationSel::Tag(t)) => s.push_str(&format!(r#"<location tag="{}"/>"#, escape_attr(t))),
        None => {}
    }
    if let Some(e) = &c.event {
        s.push_str(&format!(r#"<event name="{}"/>"#, escape_attr(e)));
    }
    if let Some(t) = c.traffic {
        s.push_str("<traffic");
        if let Some(p) = t.proto {
            s.push_str(&format!(r#" proto="{}""#, p.as_str()));
        }
        if let Some(d) = t.dport {
            s.push_str(&format!(r#" dport="{d}""#));
        }
        s.push_str("/>");
    }
    match &p.action {
        PolicyAction::Permit { max_latency_us: None } => s.push_str("<permit/>"),
        PolicyAction::Permit { max_latency_us: Some(l) } => s.push_str(&format!(r#"<permit max_latency_us="{l}"/>"#)),
        PolicyAction::Deny => s.push_str("<deny/>"),
        PolicyAction::RateLimit { limits } => {
            let (first, rest) = limits.split_first().expect("ratelimit has at least one limit");
            s.push_str(&format!(
                r#"<ratelimit scope="{}" threshold="{}" window_ms="{}">"#,
                first.scope.as_str(),
                first.threshold,
                first.window_ms
            ));
            for l in rest {
                s.push_str(&format!(
                    r#"<limit scope="{}" threshold="{}" window_ms="{}"/>"#,
                    l.scope.as_str(),
                    l.threshold,
                    l.window_ms
                ));
            }
            s.push_str("</ratelimit>");
        }
        PolicyAction::Encrypt => s.push_str("<encrypt/>"),
        PolicyAction::Monitor { ruleset } => s.push_str(&format!(r#"<monitor ruleset="{}"/>"#, escape_attr(ruleset))),
        PolicyAction::Isolate => s.push_str("<isolate/>"),
    }
    s.push_str("</policy>");
    s
}

fn violation(node: Node<'_, '_>, message: impl Into<String>) -> PolicyError {
    PolicyError::SchemaViolation { path: node_path(node), message: message.into() }
}

fn attr_violation(node: Node<'_, '_>, attr: &str, message: impl Into<String>) -> PolicyError {
    PolicyError::SchemaViolation { path: format!("{}/@{attr}", node_path(node)), message: message.into() }
}

fn elements<'a, 'i>(node: Node<'a, 'i>) -> impl Iterator<Item = Node<'a, 'i>> {
    node.children().filter(|c| c.is_element())
}

fn check_attrs(node: Node<'_, '_>, allowed: &[&str]) -> Result<(), PolicyError> {
    for a in node.attributes() {
        if !allowed.contains(&a.name()) {
            return Err(attr_violation(node, a.name(), "unexpected attribute"));
        }
    }
    Ok(())
}

fn no_children(node: Node<'_, '_>) -> Result<(), PolicyError> {
    match elements(node).next() {
        Some(c) => Err(violation(c, "unexpected element")),
        None => Ok(()),
    }
}

fn req_attr<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, PolicyError> {
    node.attribute(name).ok_or_else(|| attr_violation(node, name, "required attribute missing"))
}

fn parse_attr<T: FromStr>(node: Node<'_, '_>, name: &str, what: &str) -> Result<Option<T>, PolicyError> {
    match node.attribute(name) {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| attr_violation(node, name, format!("expected {what}, got {v:?}"))),
    }
}

fn parse_selector(node: Node<'_, '_>) -> Result<Selector, PolicyError> {
    check_attrs(node, &["host", "ip", "mac"])?;
    no_children(node)?;
    let text = node.text().map(str::trim).filter(|t| !t.is_empty());
    let given = ["host", "ip", "mac"].iter().filter(|a| node.attribute(**a).is_some()).count()
        + usize::from(text.is_some());
    if given != 1 {
        return Err(violation(node, "exactly one of host, ip, mac or a text value is required"));
    }
    if let Some(h) = node.attribute("host") {
        return Ok(Selector::Host(HostId::new(h)));
    }
    if let Some(p) = parse_attr::<Ipv4Prefix>(node, "ip", "an IPv4 address or prefix")? {
        return Ok(Selector::Ip(p));
    }
    if let Some(m) = parse_attr::<MacAddr>(node, "mac", "a MAC address")? {
        return Ok(Selector::Mac(m));
    }
    // text form: an address if it parses as one, otherwise a host id
    let t = text.expect("counted above");
    Ok(match t.parse::<Ipv4Prefix>() {
        Ok(p) => Selector::Ip(p),
        Err(_) => Selector::Host(HostId::new(t)),
    })
}

fn parse_time(node: Node<'_, '_>) -> Result<TimeWindow, PolicyError> {
    check_attrs(node, &["start", "end"])?;
    no_children(node)?;
    let start = req_attr(node, "start")?;
    let end = req_attr(node, "end")?;
    let start_min = parse_hhmm(start).ok_or_else(|| attr_violation(node, "start", "expected HH:MM"))?;
    let end_min = parse_hhmm(end).ok_or_else(|| attr_violation(node, "end", "expected HH:MM"))?;
    if start_min == end_min {
        return Err(violation(node, "start and end must differ"));
    }
    Ok(TimeWindow { start_min, end_min })
}

fn parse_location(node: Node<'_, '_>) -> Result<LocationSel, PolicyError> {
    check_attrs(node, &["switch", "tag"])?;
    no_children(node)?;
    match (node.attribute("switch"), node.attribute("tag")) {
        (Some(s), None) => Ok(LocationSel::Switch(SwitchId::new(s))),
        (None, Some(t)) => Ok(LocationSel::Tag(t.to_string())),
        _ => Err(violation(node, "exactly one of switch or tag is required")),
    }
}

fn parse_event(node: Node<'_, '_>) -> Result<String, PolicyError> {
    check_attrs(node, &["name"])?;
    no_children(node)?;
    let text = node.text().map(str::trim).filter(|t| !t.is_empty());
    match (node.attribute("name"), text) {
        (Some(n), None) | (None, Some(n)) if !n.is_empty() => Ok(n.to_string()),
        _ => Err(violation(node, "event needs a name attribute or text")),
    }
}

fn parse_traffic(node: Node<'_, '_>) -> Result<TrafficSel, PolicyError> {
    check_attrs(node, &["proto", "dport"])?;
    no_children(node)?;
    let proto = parse_attr::<Proto>(node, "proto", "tcp, udp, icmp or app")?;
    let dport = parse_attr::<u16>(node, "dport", "a port number")?;
    if proto.is_none() && dport.is_none() {
        return Err(violation(node, "traffic needs proto or dport"));
    }
    Ok(TrafficSel { proto, dport })
}

fn parse_limit(node: Node<'_, '_>) -> Result<LimitTemplate, PolicyError> {
    let scope = parse_attr::<Scope>(node, "scope", "a rate limit scope")?
        .ok_or_else(|| attr_violation(node, "scope", "required attribute missing"))?;
    let threshold = parse_attr::<u32>(node, "threshold", "a positive integer")?
        .ok_or_else(|| attr_violation(node, "threshold", "required attribute missing"))?;
    if threshold == 0 {
        return Err(attr_violation(node, "threshold", "must be positive"));
    }
    let window_ms = parse_attr::<u32>(node, "window_ms", "a positive integer")?.unwrap_or(DEFAULT_WINDOW_MS);
    if window_ms == 0 {
        return Err(attr_violation(node, "window_ms", "must be positive"));
    }
    Ok(LimitTemplate { scope, threshold, window_ms })
}

fn parse_action(node: Node<'_, '_>) -> Result<PolicyAction, PolicyError> {
    let name = node.tag_name().name();
    match name {
        "permit" => {
            check_attrs(node, &["max_latency_us"])?;
            no_children(node)?;
            Ok(PolicyAction::Permit { max_latency_us: parse_attr(node, "max_latency_us", "microseconds")? })
        }
        "deny" | "encrypt" | "isolate" => {
            check_attrs(node, &[])?;
            no_children(node)?;
            Ok(match name {
                "deny" => PolicyAction::Deny,
                "encrypt" => PolicyAction::Encrypt,
                _ => PolicyAction::Isolate,
            })
        }
        "ratelimit" => {
            check_attrs(node, &["scope", "threshold", "window_ms"])?;
            let mut limits = vec![parse_limit(node)?];
            for child in elements(node) {
                if child.tag_name().name() != "limit" {
                    return Err(violation(child, "unexpected element"));
                }
                check_attrs(child, &["scope", "threshold", "window_ms"])?;
                no_children(child)?;
                limits.push(parse_limit(child)?);
            }
            Ok(PolicyAction::RateLimit { limits })
        }
        "monitor" => {
            check_attrs(node, &["ruleset"])?;
            no_children(node)?;
            Ok(PolicyAction::Monitor { ruleset: req_attr(node, "ruleset")?.to_string() })
        }
        _ => unreachable!("caller filters action names"),
    }
}

const ACTIONS: [&str; 6] = ["permit", "deny", "ratelimit", "encrypt", "monitor", "isolate"];

fn parse_policy(node: Node<'_, '_>) -> Result<SecurityPolicy, PolicyError> {
    check_attrs(node, &["id", "priority"])?;
    let policy_id = parse_attr::<u32>(node, "id", "a non-negative integer")?
        .ok_or_else(|| attr_violation(node, "id", "required attribute missing"))?;
    let priority = parse_attr::<u32>(node, "priority", "a non-negative integer")?
        .ok_or_else(|| attr_violation(node, "priority", "required attribute missing"))?;
    let mut conditions = Conditions::default();
    let mut action = None;
    for child in elements(node) {
        let name = child.tag_name().name();
        let dup = || violation(child, format!("<{name}> given more than once"));
        match name {
            "src" if conditions.src.is_none() => conditions.src = Some(parse_selector(child)?),
            "dst" if conditions.dst.is_none() => conditions.dst = Some(parse_selector(child)?),
            "time" if conditions.time.is_none() => conditions.time = Some(parse_time(child)?),
            "location" if conditions.location.is_none() => conditions.location = Some(parse_location(child)?),
            "event" if conditions.event.is_none() => conditions.event = Some(parse_event(child)?),
            "traffic" if conditions.traffic.is_none() => conditions.traffic = Some(parse_traffic(child)?),
            "src" | "dst" | "time" | "location" | "event" | "traffic" => return Err(dup()),
            a if ACTIONS.contains(&a) => {
                if action.is_some() {
                    return Err(violation(child, "a policy has exactly one action"));
                }
                action = Some(parse_action(child)?);
            }
            _ => return Err(violation(child, "unexpected element")),
        }
    }
    if conditions.is_empty() {
        return Err(violation(node, "at least one condition is required"));
    }
    let action = action.ok_or_else(|| violation(node, "missing action"))?;
    Ok(SecurityPolicy { policy_id, priority, conditions, action })
}

type Document = (Vec<SecurityPolicy>, BTreeMap<String, DpiRuleset>);

/// Structural parse; ruleset references are checked by the caller.
fn parse_document(xml: &str) -> Result<Document, PolicyError> {
    let wrapped = wrap_fragment(xml);
    let doc = roxmltree::Document::parse(&wrapped).map_err(|e| PolicyError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    debug_assert_eq!(root.tag_name().name(), WRAPPER);
    let mut policies: Vec<SecurityPolicy> = Vec::new();
    let mut rulesets = BTreeMap::new();
    let (mut seen_policies, mut seen_rulesets) = (false, false);
    for top in elements(root) {
        match top.tag_name().name() {
            "policies" if !seen_policies => {
                seen_policies = true;
                check_attrs(top, &[])?;
                for p in elements(top) {
                    if p.tag_name().name() != "policy" {
                        return Err(violation(p, "unexpected element"));
                    }
                    let policy = parse_policy(p)?;
                    if policies.iter().any(|q| q.policy_id == policy.policy_id) {
                        return Err(PolicyError::DuplicatePolicyId(policy.policy_id));
                    }
                    policies.push(policy);
                }
            }
            "rulesets" if !seen_rulesets => {
                seen_rulesets = true;
                check_attrs(top, &[])?;
                for r in elements(top) {
                    let (id, rs) = DpiRuleset::from_node(r).map_err(|e| match e {
                        DpiError::Xml { path, message } => PolicyError::SchemaViolation { path, message },
                        other => PolicyError::Ruleset { id: r.attribute("id").unwrap_or_default().into(), source: other },
                    })?;
                    if rulesets.insert(id.clone(), rs).is_some() {
                        return Err(PolicyError::DuplicateRuleset(id));
                    }
                }
            }
            _ => return Err(violation(top, "expected <policies> or <rulesets> at top level")),
        }
    }
    if !seen_policies && !seen_rulesets {
        return Err(PolicyError::SchemaViolation { path: "/".into(), message: "no <policies> element".into() });
    }
    Ok((policies, rulesets))
}

/// Parses a policy document: a `<policies>` root, a `<rulesets>` root, or both
/// as sibling roots.
pub fn load_policies(xml: &str) -> Result<PolicySet, PolicyError> {
    let (policies, rulesets) = parse_document(xml)?;
    PolicySet::new(policies, rulesets)
}

/// Syntax and schema check only; references are resolved when the document is merged.
pub fn check_policies(xml: &str) -> Result<usize, PolicyError> {
    parse_document(xml).map(|(policies, _)| policies.len())
}

/// Parses `xml` and adds it to `set`. Monitor references may name rulesets
/// already in `set`. Returns the ids of the added policies.
pub fn load_policies_into(set: &mut PolicySet, xml: &str) -> Result<Vec<u32>, PolicyError> {
    let (policies, rulesets) = parse_document(xml)?;
    let ids = policies.iter().map(|p| p.policy_id).collect();
    set.merge(PolicySet { policies, rulesets })?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"<?xml version="1.0"?>
<policies>
  <policy id="1" priority="50">
    <src host="MTU"/>
    <dst host="PLC1"/>
    <traffic proto="tcp" dport="502"/>
    <encrypt/>
  </policy>
  <policy id="2" priority="80">
    <dst ip="10.0.2.10"/>
    <traffic proto="tcp" dport="80"/>
    <monitor ruleset="shellshock"/>
  </policy>
  <policy id="3" priority="60">
    <dst>10.0.3.0/24</dst>
    <time start="22:00" end="06:00"/>
    <location tag="plant-a"/>
    <event name="maintenance_window"/>
    <ratelimit scope="per_switch" threshold="100" window_ms="1000">
      <limit scope="per_device" threshold="15"/>
    </ratelimit>
  </policy>
  <policy id="4" priority="5">
    <src mac="02:00:00:00:00:09"/>
    <location switch="SW2"/>
    <permit max_latency_us="500"/>
  </policy>
</policies>
<rulesets>
  <ruleset id="shellshock">
    <rule id="1" pattern="\(\)\s*\{" verdict="deny" alert="true" description="Shellshock"/>
  </ruleset>
</rulesets>"#;

    fn schema_path(xml: &str) -> String {
        match load_policies(xml) {
            Err(PolicyError::SchemaViolation { path, .. }) => path,
            other => panic!("expected schema violation, got {other:?}"),
        }
    }

    #[test]
    fn parses_sample_document() {
        let set = load_policies(SAMPLE).unwrap();
        assert_eq!(set.len(), 4);
        let ids: Vec<u32> = set.policies().iter().map(|p| p.policy_id).collect();
        assert_eq!(ids, [2, 3, 1, 4]);
        let enc = set.get(1).unwrap();
        assert_eq!(enc.action, PolicyAction::Encrypt);
        assert_eq!(enc.conditions.src, Some(Selector::Host(HostId::new("MTU"))));
        assert_eq!(enc.conditions.traffic, Some(TrafficSel { proto: Some(Proto::Tcp), dport: Some(502) }));
        let rl = set.get(3).unwrap();
        assert_eq!(
            rl.action,
            PolicyAction::RateLimit {
                limits: vec![
                    LimitTemplate { scope: Scope::PerSwitch, threshold: 100, window_ms: 1000 },
                    LimitTemplate { scope: Scope::PerDevice, threshold: 15, window_ms: 1000 },
                ]
            }
        );
        assert_eq!(rl.conditions.dst, Some(Selector::Ip("10.0.3.0/24".parse().unwrap())));
        assert_eq!(rl.conditions.time, Some(TimeWindow { start_min: 1320, end_min: 360 }));
        assert_eq!(rl.conditions.event.as_deref(), Some("maintenance_window"));
        assert_eq!(set.get(4).unwrap().action, PolicyAction::Permit { max_latency_us: Some(500) });
        assert_eq!(set.ruleset("shellshock").unwrap().rules.len(), 1);
    }

    #[test]
    fn xml_round_trip() {
        let set = load_policies(SAMPLE).unwrap();
        let again = load_policies(&set.to_xml()).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn empty_document_is_empty_set() {
        assert!(load_policies("<policies/>").unwrap().is_empty());
    }

    #[test]
    fn duplicate_policy_id_rejected() {
        let xml = r#"<policies><policy id="1" priority="1"><src host="a"/><deny/></policy>
                     <policy id="1" priority="2"><src host="b"/><deny/></policy></policies>"#;
        assert_eq!(load_policies(xml), Err(PolicyError::DuplicatePolicyId(1)));
    }

    #[test]
    fn dangling_ruleset_rejected() {
        let xml = r#"<policies><policy id="9" priority="1"><src host="a"/><monitor ruleset="nope"/></policy></policies>"#;
        assert_eq!(
            load_policies(xml),
            Err(PolicyError::DanglingRulesetRef { policy_id: 9, ruleset: "nope".into() })
        );
    }

    #[test]
    fn syntax_errors_reported() {
        assert!(matches!(load_policies("<policies><policy></policies>"), Err(PolicyError::XmlSyntax(_))));
    }

    #[test]
    fn schema_violations_carry_paths() {
        let two = r#"<policies><policy id="1" priority="1"><src host="a"/><deny/></policy>
                     <policy id="2" priority="x"><src host="a"/><deny/></policy></policies>"#;
        assert_eq!(schema_path(two), "/policies/policy[2]/@priority");
        let no_cond = r#"<policies><policy id="1" priority="1"><deny/></policy></policies>"#;
        assert_eq!(schema_path(no_cond), "/policies/policy");
        let two_actions = r#"<policies><policy id="1" priority="1"><src host="a"/><deny/><permit/></policy></policies>"#;
        assert_eq!(schema_path(two_actions), "/policies/policy/permit");
        let no_action = r#"<policies><policy id="1" priority="1"><src host="a"/></policy></policies>"#;
        assert_eq!(schema_path(no_action), "/policies/policy");
        let zero = r#"<policies><policy id="1" priority="1"><src host="a"/><ratelimit scope="per_flow" threshold="0"/></policy></policies>"#;
        assert_eq!(schema_path(zero), "/policies/policy/ratelimit/@threshold");
        let scope = r#"<policies><policy id="1" priority="1"><src host="a"/><ratelimit scope="galaxy" threshold="3"/></policy></policies>"#;
        assert_eq!(schema_path(scope), "/policies/policy/ratelimit/@scope");
        let time = r#"<policies><policy id="1" priority="1"><time start="25:00" end="01:00"/><deny/></policy></policies>"#;
        assert_eq!(schema_path(time), "/policies/policy/time/@start");
        let root = r#"<rules/>"#;
        assert_eq!(schema_path(root), "/rules");
        let extra = r#"<policies><policy id="1" priority="1" owner="me"><src host="a"/><deny/></policy></policies>"#;
        assert_eq!(schema_path(extra), "/policies/policy/@owner");
        let bad_rule = r#"<policies/><rulesets><ruleset id="r"><rule id="1" verdict="deny"/></ruleset></rulesets>"#;
        assert_eq!(schema_path(bad_rule), "/rulesets/ruleset/rule");
    }

    #[test]
    fn ruleset_patterns_must_compile() {
        let xml = r#"<rulesets><ruleset id="r"><rule id="1" pattern="(" verdict="deny"/></ruleset></rulesets>"#;
        assert!(matches!(load_policies(xml), Err(PolicyError::Ruleset { .. })));
    }

    #[test]
    fn incremental_load_sees_known_rulesets() {
        let mut set = load_policies(SAMPLE).unwrap();
        let more = r#"<policies><policy id="10" priority="1"><src host="x"/><monitor ruleset="shellshock"/></policy></policies>"#;
        assert_eq!(load_policies_into(&mut set, more).unwrap(), vec![10]);
        assert_eq!(set.len(), 5);
        let clash = r#"<policies><policy id="10" priority="1"><src host="x"/><deny/></policy></policies>"#;
        assert_eq!(load_policies_into(&mut set, clash), Err(PolicyError::DuplicatePolicyId(10)));
        assert_eq!(set.len(), 5);
    }

    #[test]
    fn prefixes() {
        let p: Ipv4Prefix = "10.1.0.0/16".parse().unwrap();
        assert!(p.contains(Ipv4Addr::new(10, 1, 200, 3)));
        assert!(!p.contains(Ipv4Addr::new(10, 2, 0, 1)));
        assert!("0.0.0.0/0".parse::<Ipv4Prefix>().unwrap().contains(Ipv4Addr::new(1, 2, 3, 4)));
        assert!("10.0.0.1/33".parse::<Ipv4Prefix>().is_err());
    }
}
