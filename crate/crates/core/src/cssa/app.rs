//! The security controller application: resolution, enforcement, key
//! management, alerting and audit, driven by switch messages and operator
//! commands.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{ControlBody, ControlMsg, FuncConfig, RemoveReason};
use crate::controller::{
    AppState, CommandError, ControllerApp, ControllerCtx, NetworkView, OperatorCommand, RuleIdAlloc, SwitchGraph,
    Topic,
};
use crate::flow::{Action, FlowMatch, FlowRule, RuleId, SecFunc};
use crate::net::{HostId, Packet, PortId, SimTime, SwitchId};
use crate::secfn::{AlertEvidence, AlertReason, DpiRuleset, DpiVerdict, HostBinding, HostTags, KeyRole, RateLimitSpec};
use crate::sim::log::LogKind;
use crate::topology::{Capability, Topology};

use super::alerts::{AlertBook, AlertInput, AlertState, Raised};
use super::audit::{AuditDirection, AuditLog};
use super::enforce::{enforce, EnforceEnv, EnforcementFailure, Ingress, Obligation, Priorities, TvChange};
use super::keys::KeyManager;
use super::policy::{load_policies_into, PolicySet};
use super::resolve::{minute_of_day, resolve, PolicyDecision, ResolveCtx};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CssaConfig {
    /// Denied flows from one source within `escalate_window_us` that raise an alert.
    pub escalate_count: usize,
    pub escalate_window_us: u64,
    pub dedup_us: u64,
    /// Wall-clock minute of day at simulated time zero.
    pub day_offset_min: u32,
    pub key_seed: u64,
    pub priorities: Priorities,
    /// Publish every audit record on the audit topic.
    pub notify_audit: bool,
}

impl Default for CssaConfig {
    fn default() -> Self {
        CssaConfig {
            escalate_count: 20,
            escalate_window_us: 10_000_000,
            dedup_us: 5_000_000,
            day_offset_min: 8 * 60,
            key_seed: 0,
            priorities: Priorities::default(),
            notify_audit: true,
        }
    }
}

/// Desired TV() state for one switch, beyond bindings and tags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TvDesired {
    limits: BTreeSet<RateLimitSpec>,
    monitors: BTreeSet<String>,
}

#[derive(Debug)]
pub struct CssaApp {
    cfg: CssaConfig,
    view: NetworkView,
    graph: SwitchGraph,
    policies: PolicySet,
    ids: RuleIdAlloc,
    keys: KeyManager,
    alerts: AlertBook,
    audit: AuditLog,
    events: BTreeSet<String>,
    /// Rules installed on behalf of policy decisions.
    installed: BTreeMap<(SwitchId, FlowMatch), RuleId>,
    guards: BTreeSet<(SwitchId, PortId)>,
    desired: BTreeMap<SwitchId, TvDesired>,
    pushed: BTreeMap<SwitchId, FuncConfig>,
    keys_pushed: BTreeSet<(SwitchId, u32, KeyRole)>,
    isolated: BTreeSet<HostId>,
    restricted: BTreeMap<HostId, RateLimitSpec>,
    denials: BTreeMap<Ipv4Addr, VecDeque<SimTime>>,
    next_xid: u64,
    decisions: u64,
}

impl CssaApp {
    pub fn new(topology: Arc<Topology>, policies: PolicySet, cfg: CssaConfig) -> Self {
        CssaApp {
            graph: SwitchGraph::new(&topology),
            view: NetworkView::new(topology),
            policies,
            ids: RuleIdAlloc::default(),
            keys: KeyManager::new(cfg.key_seed),
            alerts: AlertBook::new(cfg.dedup_us),
            audit: AuditLog::new(),
            events: BTreeSet::new(),
            installed: BTreeMap::new(),
            guards: BTreeSet::new(),
            desired: BTreeMap::new(),
            pushed: BTreeMap::new(),
            keys_pushed: BTreeSet::new(),
            isolated: BTreeSet::new(),
            restricted: BTreeMap::new(),
            denials: BTreeMap::new(),
            next_xid: 1,
            decisions: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &CssaConfig {
        &self.cfg
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn view(&self) -> &NetworkView {
        &self.view
    }

    pub fn alerts(&self) -> &AlertBook {
        &self.alerts
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    pub fn policy_rules(&self) -> usize {
        self.installed.len()
    }

    fn xid(&mut self) -> u64 {
        let x = self.next_xid;
        self.next_xid += 1;
        x
    }

    fn audit_record(&mut self, ctx: &mut ControllerCtx, direction: AuditDirection, kind: &str, switch: Option<SwitchId>, summary: String) {
        self.audit.append(ctx.now, direction, kind, switch, summary);
        if self.cfg.notify_audit {
            let rec = self.audit.last().expect("just appended");
            ctx.notify(Topic::Audit, serde_json::to_value(rec).expect("serializable"));
        }
    }

    fn raise(&mut self, ctx: &mut ControllerCtx, input: AlertInput) -> u64 {
        let raised = self.alerts.raise(input, ctx.now);
        let alert = self.alerts.get(raised.alert_id()).expect("just raised");
        let event = match raised {
            Raised::New(_) => "new",
            Raised::Coalesced(_) => "update",
        };
        ctx.notify(Topic::Alerts, json!({"event": event, "alert": alert}));
        raised.alert_id()
    }

    fn notify_alert(&self, ctx: &mut ControllerCtx, alert_id: u64) {
        if let Some(a) = self.alerts.get(alert_id) {
            ctx.notify(Topic::Alerts, json!({"event": "update", "alert": a}));
        }
    }

    /// Complete TV() configuration for `switch` under `desired`.
    fn func_config(&self, switch: &SwitchId, desired: &BTreeMap<SwitchId, TvDesired>) -> Result<FuncConfig, String> {
        let topo = self.view.topology();
        let bindings: Vec<HostBinding> = topo
            .hosts
            .values()
            .filter(|h| &h.switch == switch)
            .map(|h| HostBinding { port: h.port, mac: h.mac, ip: h.ip })
            .collect();
        let tags: Vec<HostTags> = self
            .view
            .hosts()
            .map(|h| HostTags { ip: h.ip, domain: h.domain.clone(), location: h.location.clone() })
            .collect();
        let d = desired.get(switch).cloned().unwrap_or_default();
        let mut limits: BTreeSet<RateLimitSpec> = d.limits;
        for (host, spec) in &self.restricted {
            if self.view.host(host).is_some_and(|h| &h.switch == switch) {
                limits.insert(spec.clone());
            }
        }
        let ruleset_xml = match d.monitors.len() {
            0 => None,
            _ => {
                let mut merged = DpiRuleset::new(Vec::new(), DpiVerdict::Permit);
                for id in &d.monitors {
                    let rs = self.policies.ruleset(id).ok_or_else(|| format!("ruleset {id:?} no longer loaded"))?;
                    merged.rules.extend(rs.rules.iter().cloned());
                    if rs.default_verdict == DpiVerdict::Deny {
                        merged.default_verdict = DpiVerdict::Deny;
                    }
                }
                merged.compile().map_err(|e| e.to_string())?;
                let id = d.monitors.iter().cloned().collect::<Vec<_>>().join("+");
                Some(merged.to_xml(&id))
            }
        };
        Ok(FuncConfig { ruleset_xml, limits: limits.into_iter().collect(), bindings, tags })
    }

    /// Pushes a FuncConfig to each switch in `switches` whose config changed.
    fn push_configs(&mut self, ctx: &mut ControllerCtx, configs: Vec<(SwitchId, FuncConfig)>) {
        for (sw, config) in configs {
            if self.pushed.get(&sw) == Some(&config) {
                continue;
            }
            self.pushed.insert(sw.clone(), config.clone());
            ctx.send(sw, ControlBody::FuncConfig { config });
        }
    }

    fn tv_switches(&self) -> Vec<SwitchId> {
        self.view
            .switches()
            .filter(|s| s.connected && s.caps.contains(&Capability::Tv))
            .map(|s| s.id.clone())
            .collect()
    }

    fn on_features(&mut self, ctx: &mut ControllerCtx, switch: &SwitchId, caps: &[Capability], ports: &[PortId]) {
        self.view.register_switch(switch, caps.iter().copied().collect(), ports.to_vec());
        if !caps.contains(&Capability::Tv) {
            return;
        }
        let config = match self.func_config(switch, &self.desired) {
            Ok(c) => c,
            Err(cause) => return self.enforcement_failed(ctx, None, EnforcementFailure { switch: switch.clone(), cause }),
        };
        self.push_configs(ctx, vec![(switch.clone(), config)]);
        // every first packet from a host is validated before it reaches the controller
        let host_ports: Vec<PortId> = self.view.hosts_on(switch).map(|h| h.port).collect();
        let mut any = false;
        for port in host_ports {
            if !self.guards.insert((switch.clone(), port)) {
                continue;
            }
            let rule = FlowRule::new(
                self.ids.next_id(),
                FlowMatch::any().with_in_port(port),
                self.cfg.priorities.guard,
                vec![Action::ApplyFunc(SecFunc::Tv), Action::SendToController("guard".into())],
            );
            ctx.send(switch.clone(), ControlBody::FlowMod { rule });
            any = true;
        }
        if any {
            let xid = self.xid();
            ctx.send(switch.clone(), ControlBody::Barrier { xid });
        }
    }

    fn enforcement_failed(&mut self, ctx: &mut ControllerCtx, host: Option<HostId>, f: EnforcementFailure) {
        ctx.record(LogKind::Decision, f.switch.as_str(), json!({"enforcement_failure": f.cause}));
        self.raise(
            ctx,
            AlertInput {
                switch: f.switch.clone(),
                host_id: host,
                reason: AlertReason::EnforcementFailure,
                evidence: json!({"switch": f.switch, "cause": f.cause}),
            },
        );
    }

    fn resolve_ctx(&self, switch: &SwitchId, pkt: &Packet, now: SimTime) -> ResolveCtx {
        let src = self.view.host_by_ip(pkt.src_ip);
        let dst = self.view.host_by_ip(pkt.dst_ip);
        ResolveCtx {
            switch: switch.clone(),
            src_ip: pkt.src_ip,
            dst_ip: pkt.dst_ip,
            src_mac: pkt.src_mac,
            dst_mac: pkt.dst_mac,
            proto: pkt.proto,
            dst_port: pkt.dst_port,
            src_host: src.map(|h| h.id.clone()),
            dst_host: dst.map(|h| h.id.clone()),
            src_location: src.map(|h| h.location.clone()),
            minute_of_day: minute_of_day(now, self.cfg.day_offset_min),
            events: self.events.clone(),
        }
    }

    fn on_packet_in(&mut self, ctx: &mut ControllerCtx, switch: &SwitchId, in_port: PortId, pkt: &Packet) {
        let now = ctx.now;
        let at_edge = self.view.is_host_port(switch, in_port);
        let mut spoofed = None;
        if at_edge {
            if let Err(conflict) = self.view.learn_host(switch, in_port, pkt.src_mac, pkt.src_ip) {
                spoofed = Some(conflict);
            }
        }
        let src_host = self.view.host_by_ip(pkt.src_ip).map(|h| h.id.clone());

        let decision = if let Some(conflict) = &spoofed {
            self.raise(
                ctx,
                AlertInput {
                    switch: switch.clone(),
                    host_id: Some(conflict.existing.clone()),
                    reason: AlertReason::SpoofedSource,
                    evidence: json!({
                        "switch": switch,
                        "in_port": in_port,
                        "pkt_id": pkt.pkt_id,
                        "src_mac": pkt.src_mac,
                        "src_ip": pkt.src_ip,
                        "detail": conflict.to_string(),
                    }),
                },
            );
            PolicyDecision::default_deny()
        } else {
            let rctx = self.resolve_ctx(switch, pkt, now);
            resolve(&rctx, &self.policies)
        };
        self.decisions += 1;
        ctx.record(
            LogKind::Decision,
            switch.as_str(),
            json!({
                "pkt_id": pkt.pkt_id,
                "in_port": in_port,
                "src_ip": pkt.src_ip,
                "dst_ip": pkt.dst_ip,
                "proto": pkt.proto,
                "dst_port": pkt.dst_port,
                "matched_policy": decision.matched_policy,
                "action": decision.effective_action.name(),
                "spoofed": spoofed.is_some(),
            }),
        );

        let policy = decision.matched_policy.and_then(|id| self.policies.get(id)).cloned();
        let mut env = EnforceEnv {
            view: &self.view,
            graph: &self.graph,
            ids: &mut self.ids,
            keys: &mut self.keys,
            priorities: self.cfg.priorities,
            now,
        };
        let at = Ingress { switch, in_port, packet: pkt };
        let result = enforce(&decision, policy.as_ref(), at, &mut env).and_then(|obl| self.stage(obl));
        match result {
            Ok(staged) => self.commit(ctx, staged),
            Err(f) => self.enforcement_failed(ctx, src_host.clone(), f),
        }

        if decision.effective_action == super::policy::PolicyAction::Deny {
            self.count_denial(ctx, switch, pkt, src_host);
        }
    }

    fn count_denial(&mut self, ctx: &mut ControllerCtx, switch: &SwitchId, pkt: &Packet, host: Option<HostId>) {
        let now = ctx.now;
        let window = self.cfg.escalate_window_us;
        let q = self.denials.entry(pkt.src_ip).or_default();
        q.push_back(now);
        while q.front().is_some_and(|t| now.saturating_sub(*t) >= window) {
            q.pop_front();
        }
        if q.len() >= self.cfg.escalate_count {
            let n = q.len();
            self.raise(
                ctx,
                AlertInput {
                    switch: switch.clone(),
                    host_id: host,
                    reason: AlertReason::RepeatedDeniedFlows,
                    evidence: json!({
                        "src_ip": pkt.src_ip,
                        "denied_in_window": n,
                        "window_us": window,
                    }),
                },
            );
        }
    }

    /// Validates obligations against the current desired state without
    /// committing anything.
    fn stage(&self, obligations: Vec<Obligation>) -> Result<Staged, EnforcementFailure> {
        let mut desired = self.desired.clone();
        let mut touched_tv = BTreeSet::new();
        let mut keys = Vec::new();
        let mut rules = Vec::new();
        for o in obligations {
            match o {
                Obligation::Configure { switch, change } => {
                    let d = desired.entry(switch.clone()).or_default();
                    match change {
                        TvChange::AddLimits(specs) => d.limits.extend(specs),
                        TvChange::AddMonitor(id) => {
                            d.monitors.insert(id);
                        }
                    }
                    touched_tv.insert(switch);
                }
                Obligation::KeyPush { switch, record } => keys.push((switch, record)),
                Obligation::Install { switch, rule } => rules.push((switch, rule)),
            }
        }
        let mut configs = Vec::new();
        for sw in touched_tv {
            let config = self
                .func_config(&sw, &desired)
                .map_err(|cause| EnforcementFailure { switch: sw.clone(), cause })?;
            configs.push((sw, config));
        }
        Ok(Staged { desired, configs, keys, rules })
    }

    fn commit(&mut self, ctx: &mut ControllerCtx, staged: Staged) {
        self.desired = staged.desired;
        self.push_configs(ctx, staged.configs);
        for (sw, record) in staged.keys {
            if self.keys_pushed.insert((sw.clone(), record.key_id, record.role)) {
                ctx.send(sw, ControlBody::KeyPush { record });
            }
        }
        let mut touched = Vec::new();
        for (sw, rule) in staged.rules {
            let key = (sw.clone(), rule.matcher.clone());
            if self.installed.contains_key(&key) {
                continue;
            }
            self.installed.insert(key, rule.rule_id);
            if !touched.contains(&sw) {
                touched.push(sw.clone());
            }
            ctx.send(sw, ControlBody::FlowMod { rule });
        }
        for sw in touched {
            let xid = self.xid();
            ctx.send(sw, ControlBody::Barrier { xid });
        }
    }

    fn on_alert_up(&mut self, ctx: &mut ControllerCtx, ev: &AlertEvidence) {
        let by_port = self.view.host_at(&ev.switch, ev.in_port).map(|h| h.id.clone());
        let host = match ev.reason {
            AlertReason::SpoofedSource => by_port,
            _ => self.view.host_by_ip(ev.src_ip).map(|h| h.id.clone()).or(by_port),
        };
        self.raise(
            ctx,
            AlertInput {
                switch: ev.switch.clone(),
                host_id: host,
                reason: ev.reason,
                evidence: serde_json::to_value(ev).expect("serializable"),
            },
        );
    }

    /// Removes every policy-installed rule and TV() addition, then re-pushes
    /// configuration so new decisions are made under the current policies.
    fn flush_policy_state(&mut self, ctx: &mut ControllerCtx) {
        let mut by_switch: BTreeMap<SwitchId, Vec<RuleId>> = BTreeMap::new();
        for ((sw, _), id) in std::mem::take(&mut self.installed) {
            by_switch.entry(sw).or_default().push(id);
        }
        for (sw, rule_ids) in by_switch {
            ctx.send(sw, ControlBody::FlowRemove { matcher: FlowMatch::any(), rule_ids, reason: RemoveReason::Command });
        }
        self.desired.clear();
        self.repush_all(ctx);
    }

    fn repush_all(&mut self, ctx: &mut ControllerCtx) {
        let mut configs = Vec::new();
        for sw in self.tv_switches() {
            match self.func_config(&sw, &self.desired) {
                Ok(c) => configs.push((sw, c)),
                Err(cause) => self.enforcement_failed(ctx, None, EnforcementFailure { switch: sw, cause }),
            }
        }
        self.push_configs(ctx, configs);
    }

    fn isolate(&mut self, ctx: &mut ControllerCtx, host: &HostId) -> Result<(), CommandError> {
        let h = self.view.host(host).cloned().ok_or_else(|| CommandError::UnknownHost(host.clone()))?;
        if self.isolated.insert(host.clone()) {
            let preds = [
                FlowMatch { src_ip: Some(h.ip), ..FlowMatch::default() },
                FlowMatch { dst_ip: Some(h.ip), ..FlowMatch::default() },
            ];
            let switches: Vec<SwitchId> = self.view.switches().map(|s| s.id.clone()).collect();
            for sw in &switches {
                for p in &preds {
                    ctx.send(
                        sw.clone(),
                        ControlBody::FlowRemove { matcher: p.clone(), rule_ids: Vec::new(), reason: RemoveReason::Command },
                    );
                }
            }
            self.installed.retain(|(_, m), _| !preds.iter().any(|p| m.is_subsumed_by(p)));
            let rule = FlowRule::new(
                self.ids.next_id(),
                FlowMatch::any().with_in_port(h.port),
                self.cfg.priorities.isolate,
                vec![Action::Drop],
            );
            ctx.send(h.switch.clone(), ControlBody::FlowMod { rule });
            let xid = self.xid();
            ctx.send(h.switch.clone(), ControlBody::Barrier { xid });
            ctx.notify(Topic::Topology, json!({"event": "isolated", "host": host}));
        }
        for id in self.alerts.take_action_on_host(host, "isolate", ctx.now) {
            self.notify_alert(ctx, id);
        }
        Ok(())
    }

    fn restrict(&mut self, ctx: &mut ControllerCtx, host: &HostId, spec: &RateLimitSpec) -> Result<(), CommandError> {
        let h = self.view.host(host).cloned().ok_or_else(|| CommandError::UnknownHost(host.clone()))?;
        spec.validate().map_err(|e| CommandError::InvalidLimit(e.to_string()))?;
        if !self.view.has_cap(&h.switch, Capability::Tv) {
            return Err(CommandError::Unsupported("restricting a host behind a switch without TV"));
        }
        let mut spec = spec.clone();
        if spec.target.src_ip.is_none() {
            spec.target.src_ip = Some(h.ip);
        }
        self.restricted.insert(host.clone(), spec);
        match self.func_config(&h.switch, &self.desired) {
            Ok(c) => self.push_configs(ctx, vec![(h.switch.clone(), c)]),
            Err(cause) => {
                self.restricted.remove(host);
                return Err(CommandError::InvalidLimit(cause));
            }
        }
        for id in self.alerts.take_action_on_host(host, "restrict", ctx.now) {
            self.notify_alert(ctx, id);
        }
        Ok(())
    }

    fn apply_command(&mut self, ctx: &mut ControllerCtx, cmd: &OperatorCommand) -> Result<(), CommandError> {
        match cmd {
            OperatorCommand::Isolate { host } => self.isolate(ctx, host),
            OperatorCommand::Restrict { host, spec } => self.restrict(ctx, host, spec),
            OperatorCommand::Acknowledge { alert_id } => {
                match self.alerts.advance(*alert_id, AlertState::Acknowledged, ctx.now) {
                    None => return Err(CommandError::UnknownAlert(*alert_id)),
                    Some(true) => self.notify_alert(ctx, *alert_id),
                    Some(false) => {}
                }
                Ok(())
            }
            OperatorCommand::LoadPolicies { xml } => {
                load_policies_into(&mut self.policies, xml)?;
                self.flush_policy_state(ctx);
                Ok(())
            }
            OperatorCommand::DeletePolicy { policy_id } => {
                self.policies.remove(*policy_id).ok_or(CommandError::UnknownPolicy(*policy_id))?;
                self.flush_policy_state(ctx);
                Ok(())
            }
            OperatorCommand::FireEvent { name } => {
                if self.events.insert(name.clone()) {
                    self.flush_policy_state(ctx);
                }
                Ok(())
            }
            OperatorCommand::ClearEvent { name } => {
                if self.events.remove(name) {
                    self.flush_policy_state(ctx);
                }
                Ok(())
            }
        }
    }

    fn audit_outbound(&mut self, ctx: &mut ControllerCtx, from: usize) {
        let out: Vec<(SwitchId, String, String)> = ctx.outbound()[from..]
            .iter()
            .map(|(sw, body)| (sw.clone(), body.kind().as_str().to_string(), body.summary()))
            .collect();
        for (sw, kind, summary) in out {
            self.audit_record(ctx, AuditDirection::FromCssa, &kind, Some(sw), summary);
        }
    }
}

#[derive(Debug)]
struct Staged {
    desired: BTreeMap<SwitchId, TvDesired>,
    configs: Vec<(SwitchId, FuncConfig)>,
    keys: Vec<(SwitchId, crate::secfn::KeyRecord)>,
    rules: Vec<(SwitchId, FlowRule)>,
}

impl ControllerApp for CssaApp {
    fn name(&self) -> &'static str {
        "cssa"
    }

    fn on_message(&mut self, ctx: &mut ControllerCtx, msg: &ControlMsg) {
        self.audit_record(ctx, AuditDirection::ToCssa, msg.kind().as_str(), Some(msg.switch.clone()), msg.body.summary());
        let before = ctx.outbound().len();
        match &msg.body {
            ControlBody::Features { caps, ports } => self.on_features(ctx, &msg.switch, caps, ports),
            ControlBody::PacketIn { in_port, packet, .. } => self.on_packet_in(ctx, &msg.switch, *in_port, packet),
            ControlBody::AlertUp { evidence } => self.on_alert_up(ctx, evidence),
            ControlBody::FlowRemove { rule_ids, .. } => {
                let gone: BTreeSet<RuleId> = rule_ids.iter().copied().collect();
                self.installed.retain(|(sw, _), id| !(sw == &msg.switch && gone.contains(id)));
            }
            _ => {}
        }
        self.audit_outbound(ctx, before);
    }

    fn on_command(&mut self, ctx: &mut ControllerCtx, cmd: &OperatorCommand) -> Result<(), CommandError> {
        let before = ctx.outbound().len();
        let result = self.apply_command(ctx, cmd);
        let outcome = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => format!("rejected: {e}"),
        };
        self.audit_record(ctx, AuditDirection::Operator, "command", None, format!("{} ({outcome})", cmd.summary()));
        self.audit_outbound(ctx, before);
        result
    }

    fn state(&self) -> AppState {
        AppState {
            view: Some(self.view.snapshot()),
            alerts: self.alerts.all().to_vec(),
            audit: self.audit.records().to_vec(),
            policies: self.policies.summaries(),
            isolated: self.isolated.iter().cloned().collect(),
            restricted: self.restricted.keys().cloned().collect(),
            active_events: self.events.iter().cloned().collect(),
        }
    }
}
