//! Switch-resident security functions: LS(), TV(), and FE().
//!
//! Each switch owns one [`SwitchSecFn`]. Configuration arrives through the
//! control channel and replaces the previous state in one step, so a packet is
//! always validated against exactly one configuration.

pub mod crypto;
pub mod dpi;
pub mod ratelimit;
pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::flow::{FlowMatch, SecFunc};
use crate::net::{FiveTuple, MacAddr, Packet, PacketId, PortId, Proto, SimTime, SwitchId};

pub use crypto::{fe_decrypt, fe_encrypt, FeError, KeyRecord, KeyRole, SecretKey, KEY_LEN};
pub use dpi::{dpi_scan, CompiledRuleset, DpiError, DpiRule, DpiRuleset, DpiVerdict, ScanOutcome};
pub use ratelimit::{Admission, FixedWindowLimiter, RateLimitSpec, Scope, ScopeKey};
pub use store::{LogicalStore, LsEntry, LsError, LsNamespace};

/// Why a packet left the data plane without delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// A rule's explicit Drop action (policy deny, isolation).
    RuleDrop,
    SpoofedSource,
    RateExceeded,
    SignatureMatch,
    DpiDefaultDeny,
    AuthFailure,
    MissingKey,
    EnvelopeMismatch,
    BufferOverflow,
    BufferTimeout,
    NoLink,
    HopLimit,
    UnknownSwitch,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::RuleDrop => "rule_drop",
            DropReason::SpoofedSource => "spoofed_source",
            DropReason::RateExceeded => "rate_exceeded",
            DropReason::SignatureMatch => "signature_match",
            DropReason::DpiDefaultDeny => "dpi_default_deny",
            DropReason::AuthFailure => "auth_failure",
            DropReason::MissingKey => "missing_key",
            DropReason::EnvelopeMismatch => "envelope_mismatch",
            DropReason::BufferOverflow => "buffer_overflow",
            DropReason::BufferTimeout => "buffer_timeout",
            DropReason::NoLink => "no_link",
            DropReason::HopLimit => "hop_limit",
            DropReason::UnknownSwitch => "unknown_switch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertReason {
    SignatureMatch,
    RateExceeded,
    SpoofedSource,
    RepeatedDeniedFlows,
    AuthFailure,
    EnforcementFailure,
}

impl AlertReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertReason::SignatureMatch => "signature_match",
            AlertReason::RateExceeded => "rate_exceeded",
            AlertReason::SpoofedSource => "spoofed_source",
            AlertReason::RepeatedDeniedFlows => "repeated_denied_flows",
            AlertReason::AuthFailure => "auth_failure",
            AlertReason::EnforcementFailure => "enforcement_failure",
        }
    }
}

/// What a switch reports upward when a security function blocks traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertEvidence {
    pub switch: SwitchId,
    pub in_port: PortId,
    pub reason: AlertReason,
    pub pkt_id: PacketId,
    pub src_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: Proto,
    pub dst_port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpi_id: Option<u32>,
    #[serde(default)]
    pub detail: String,
}

impl AlertEvidence {
    fn for_packet(switch: &SwitchId, in_port: PortId, reason: AlertReason, pkt: &Packet, detail: String) -> Self {
        AlertEvidence {
            switch: switch.clone(),
            in_port,
            reason,
            pkt_id: pkt.pkt_id,
            src_mac: pkt.src_mac,
            src_ip: pkt.src_ip,
            dst_ip: pkt.dst_ip,
            proto: pkt.proto,
            dst_port: pkt.dst_port,
            dpi_id: None,
            detail,
        }
    }
}

/// Binding of a single-host access port to its legitimate addresses.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HostBinding {
    pub port: PortId,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
}

/// Domain and location tags used to key per-domain and per-location limits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HostTags {
    pub ip: Ipv4Addr,
    pub domain: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SecFnError {
    #[error(transparent)]
    Dpi(#[from] DpiError),
    #[error("port {0} has two host bindings")]
    DuplicateBinding(PortId),
    #[error(transparent)]
    RateLimit(#[from] ratelimit::RateLimitError),
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Ls(#[from] LsError),
}

/// Active TV() configuration.
#[derive(Debug, Clone)]
pub struct TvConfig {
    ruleset: CompiledRuleset,
    limits: Vec<RateLimitSpec>,
    bindings: BTreeMap<PortId, HostBinding>,
    tags: BTreeMap<Ipv4Addr, HostTags>,
}

impl TvConfig {
    pub fn ruleset(&self) -> &CompiledRuleset {
        &self.ruleset
    }

    pub fn limits(&self) -> &[RateLimitSpec] {
        &self.limits
    }

    pub fn binding(&self, port: PortId) -> Option<&HostBinding> {
        self.bindings.get(&port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlowState {
    Admitted,
    Denied,
}

/// Record of a new-flow admission decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewFlowDecision {
    pub flow: FiveTuple,
    pub admitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denied_by: Option<Scope>,
    /// Limits that applied, as (scope, key) pairs.
    pub keys: Vec<(Scope, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TvVerdict {
    Pass,
    Drop(DropReason),
}

#[derive(Debug, Clone)]
pub struct TvOutcome {
    pub verdict: TvVerdict,
    pub evidence: Option<AlertEvidence>,
    pub new_flow: Option<NewFlowDecision>,
    pub scan: Option<ScanOutcome>,
    /// True when TV was invoked on a switch without configuration.
    pub unconfigured: bool,
}

impl TvOutcome {
    fn pass() -> Self {
        TvOutcome { verdict: TvVerdict::Pass, evidence: None, new_flow: None, scan: None, unconfigured: false }
    }
}

/// Active encryption or decryption key plus its nonce counter.
#[derive(Debug, Clone)]
struct FeKey {
    record: KeyRecord,
    next_counter: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecFnStats {
    pub tv_invocations: u64,
    pub dpi_scans: u64,
    pub dpi_rules_evaluated: u64,
    pub fe_encrypts: u64,
    pub fe_decrypts: u64,
    /// Host wall-clock spent in FE() since the switch started; benchmark use only.
    #[serde(skip)]
    pub crypto_wall_ns: u128,
}

/// All security-function state owned by one switch.
#[derive(Debug, Clone)]
pub struct SwitchSecFn {
    switch: SwitchId,
    ls: LogicalStore,
    tv: Option<TvConfig>,
    flows: HashMap<FiveTuple, FlowState>,
    limiter: FixedWindowLimiter,
    rate_alerted: BTreeSet<(Scope, String, u64)>,
    keys: Vec<FeKey>,
    audit_seq: u64,
    stats: SecFnStats,
}

impl SwitchSecFn {
    pub fn new(switch: SwitchId) -> Self {
        SwitchSecFn {
            switch,
            ls: LogicalStore::new(),
            tv: None,
            flows: HashMap::new(),
            limiter: FixedWindowLimiter::new(),
            rate_alerted: BTreeSet::new(),
            keys: Vec::new(),
            audit_seq: 0,
            stats: SecFnStats::default(),
        }
    }

    pub fn switch_id(&self) -> &SwitchId {
        &self.switch
    }

    pub fn stats(&self) -> SecFnStats {
        self.stats
    }

    pub fn tv_config(&self) -> Option<&TvConfig> {
        self.tv.as_ref()
    }

    pub fn ls(&self) -> &LogicalStore {
        &self.ls
    }

    pub fn ls_put(&mut self, entry: LsEntry) -> Result<(), LsError> {
        self.ls.put(entry)
    }

    pub fn ls_get(&self, namespace: LsNamespace, key: &[u8]) -> Option<&[u8]> {
        self.ls.get(namespace, key)
    }

    /// Appends an audit record under the next sequence key.
    pub fn ls_audit(&mut self, text: String, at: SimTime) {
        self.audit_seq += 1;
        let key = format!("audit/{:012}", self.audit_seq);
        // sequence keys are fresh, so the append cannot collide
        let _ = self.ls.put(LsEntry::new(LsNamespace::Audit, key, text, at));
    }

    /// Replaces the TV() configuration. Either everything compiles and the new
    /// configuration becomes active, or the previous one stays in place.
    pub fn tv_configure(
        &mut self,
        ruleset: &DpiRuleset,
        limits: Vec<RateLimitSpec>,
        bindings: Vec<HostBinding>,
        tags: Vec<HostTags>,
        now: SimTime,
    ) -> Result<(), SecFnError> {
        let compiled = ruleset.compile()?;
        for l in &limits {
            l.validate()?;
        }
        let mut by_port = BTreeMap::new();
        for b in bindings {
            let port = b.port;
            if by_port.insert(port, b).is_some() {
                return Err(SecFnError::DuplicateBinding(port));
            }
        }

        self.ls.clear(LsNamespace::Signatures);
        self.ls.clear(LsNamespace::Whitelist);
        for rule in &ruleset.rules {
            self.ls.put(LsEntry::new(
                LsNamespace::Signatures,
                format!("rule/{}", rule.dpi_id),
                rule.to_xml(),
                now,
            ))?;
        }
        self.ls.put(LsEntry::new(
            LsNamespace::Signatures,
            "ruleset/default",
            ruleset.default_verdict.as_str(),
            now,
        ))?;
        for b in by_port.values() {
            self.ls.put(LsEntry::new(
                LsNamespace::Whitelist,
                format!("binding/{}", b.port),
                format!("{},{}", b.mac, b.ip),
                now,
            ))?;
        }

        self.limiter.retain_specs(&limits);
        self.tv = Some(TvConfig {
            ruleset: compiled,
            limits,
            bindings: by_port,
            tags: tags.into_iter().map(|t| (t.ip, t)).collect(),
        });
        Ok(())
    }

    fn scope_key(&self, scope: Scope, pkt: &Packet, tags: &BTreeMap<Ipv4Addr, HostTags>) -> ScopeKey {
        match scope {
            Scope::PerFlow => ScopeKey::Flow {
                src_ip: pkt.src_ip,
                dst_ip: pkt.dst_ip,
                proto: pkt.proto,
                dst_port: pkt.dst_port,
            },
            Scope::PerDevice => ScopeKey::Device(pkt.src_ip),
            Scope::PerSwitch => ScopeKey::Switch(self.switch.clone()),
            Scope::PerDomain => ScopeKey::Domain(
                tags.get(&pkt.src_ip).map(|t| t.domain.clone()).unwrap_or_else(|| "unknown".into()),
            ),
            Scope::PerLocation => ScopeKey::Location(
                tags.get(&pkt.src_ip).map(|t| t.location.clone()).unwrap_or_else(|| "unknown".into()),
            ),
        }
    }

    /// TV() pipeline: source validation, then new-flow rate admission, then DPI.
    /// The first failing stage decides the drop reason.
    pub fn tv_validate(&mut self, pkt: &Packet, in_port: PortId, now: SimTime) -> TvOutcome {
        self.stats.tv_invocations += 1;
        let Some(cfg) = self.tv.as_ref() else {
            return TvOutcome { unconfigured: true, ..TvOutcome::pass() };
        };

        if let Some(b) = cfg.bindings.get(&in_port) {
            if b.ip != pkt.src_ip || b.mac != pkt.src_mac {
                let detail = format!(
                    "port {in_port} bound to {}/{}, packet claims {}/{}",
                    b.mac, b.ip, pkt.src_mac, pkt.src_ip
                );
                let ev = AlertEvidence::for_packet(&self.switch, in_port, AlertReason::SpoofedSource, pkt, detail);
                return TvOutcome {
                    verdict: TvVerdict::Drop(DropReason::SpoofedSource),
                    evidence: Some(ev),
                    ..TvOutcome::pass()
                };
            }
        }

        let mut outcome = TvOutcome::pass();
        let applicable: Vec<&RateLimitSpec> =
            cfg.limits.iter().filter(|l| l.target.matches(pkt, None)).collect();
        if !applicable.is_empty() {
            let flow = pkt.five_tuple();
            match self.flows.get(&flow) {
                Some(FlowState::Denied) => {
                    outcome.verdict = TvVerdict::Drop(DropReason::RateExceeded);
                    return outcome;
                }
                Some(FlowState::Admitted) => {}
                None => {
                    let checks: Vec<(RateLimitSpec, ScopeKey)> = applicable
                        .iter()
                        .map(|l| ((*l).clone(), self.scope_key(l.scope, pkt, &cfg.tags)))
                        .collect();
                    let keys = checks.iter().map(|(l, k)| (l.scope, k.to_string())).collect();
                    match self.limiter.admit(&checks, now) {
                        Admission::Admit => {
                            self.flows.insert(flow, FlowState::Admitted);
                            outcome.new_flow = Some(NewFlowDecision { flow, admitted: true, denied_by: None, keys });
                        }
                        Admission::Deny(scope) => {
                            self.flows.insert(flow, FlowState::Denied);
                            let (spec, key) = checks
                                .iter()
                                .find(|(l, _)| l.scope == scope)
                                .expect("denying scope is among the checks");
                            // one alert per offending key per window
                            let marker = (scope, key.to_string(), spec.window_index(now));
                            if self.rate_alerted.insert(marker) {
                                let detail = format!("{} over {} new flows per {} ms", key, spec.threshold, spec.window_ms);
                                outcome.evidence = Some(AlertEvidence::for_packet(
                                    &self.switch,
                                    in_port,
                                    AlertReason::RateExceeded,
                                    pkt,
                                    detail,
                                ));
                            }
                            outcome.verdict = TvVerdict::Drop(DropReason::RateExceeded);
                            outcome.new_flow =
                                Some(NewFlowDecision { flow, admitted: false, denied_by: Some(scope), keys });
                            return outcome;
                        }
                    }
                }
            }
        }

        let cfg = self.tv.as_ref().expect("checked above");
        if !cfg.ruleset.is_empty() || cfg.ruleset.source().default_verdict == DpiVerdict::Deny {
            let scan = dpi_scan(&cfg.ruleset, &pkt.payload);
            self.stats.dpi_scans += 1;
            self.stats.dpi_rules_evaluated += scan.rules_evaluated as u64;
            outcome.scan = Some(scan);
            if scan.verdict == DpiVerdict::Deny {
                match scan.matched {
                    Some(id) => {
                        let rule = cfg.ruleset.rule(id).expect("matched rule exists");
                        if rule.alert_on_match {
                            let mut ev = AlertEvidence::for_packet(
                                &self.switch,
                                in_port,
                                AlertReason::SignatureMatch,
                                pkt,
                                rule.description.clone(),
                            );
                            ev.dpi_id = Some(id);
                            outcome.evidence = Some(ev);
                        }
                        outcome.verdict = TvVerdict::Drop(DropReason::SignatureMatch);
                    }
                    None => outcome.verdict = TvVerdict::Drop(DropReason::DpiDefaultDeny),
                }
            }
        }
        outcome
    }

    /// Installs a key. A record for the same flow and role is replaced, and the
    /// replacement's key id is used for later packets.
    pub fn fe_set_key(&mut self, rec: KeyRecord) -> Result<(), FeError> {
        rec.validate()?;
        self.keys.retain(|k| !(k.record.flow == rec.flow && k.record.role == rec.role));
        self.keys.push(FeKey { record: rec, next_counter: 0 });
        Ok(())
    }

    pub fn key_ids(&self) -> Vec<(u32, KeyRole)> {
        self.keys.iter().map(|k| (k.record.key_id, k.record.role)).collect()
    }

    fn key_for(&mut self, pkt: &Packet, role: KeyRole) -> Option<&mut FeKey> {
        // key flows are matched on headers only; in_port is not part of a key flow
        self.keys
            .iter_mut()
            .rev()
            .find(|k| k.record.role == role && k.record.flow.matches(pkt, None))
    }

    /// Applies FE_Encrypt or FE_Decrypt using the matching key record.
    pub fn fe_apply(&mut self, func: SecFunc, pkt: &Packet) -> Result<Packet, FeError> {
        let role = match func {
            SecFunc::FeEncrypt => KeyRole::Encrypt,
            SecFunc::FeDecrypt => KeyRole::Decrypt,
            SecFunc::Tv => unreachable!("TV is not a crypto function"),
        };
        let started = Instant::now();
        let key = self.key_for(pkt, role).ok_or(FeError::MissingKey)?;
        let result = match role {
            KeyRole::Encrypt => {
                let counter = key.next_counter;
                key.next_counter += 1;
                fe_encrypt(&key.record, counter, pkt)
            }
            KeyRole::Decrypt => fe_decrypt(&key.record, pkt),
        };
        self.stats.crypto_wall_ns += started.elapsed().as_nanos();
        match role {
            KeyRole::Encrypt => self.stats.fe_encrypts += 1,
            KeyRole::Decrypt => self.stats.fe_decrypts += 1,
        }
        result
    }

    pub fn has_key_for(&self, flow: &FlowMatch, role: KeyRole) -> bool {
        self.keys.iter().any(|k| &k.record.flow == flow && k.record.role == role)
    }
}

pub fn auth_failure_evidence(switch: &SwitchId, in_port: PortId, pkt: &Packet) -> AlertEvidence {
    AlertEvidence::for_packet(switch, in_port, AlertReason::AuthFailure, pkt, "payload failed authentication".into())
}
