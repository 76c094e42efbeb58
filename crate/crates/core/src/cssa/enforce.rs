//! Turns a policy decision into concrete switch obligations.

use serde::{Deserialize, Serialize};

use crate::controller::{compile_path, NetworkView, PathSecurity, RuleIdAlloc, SwitchGraph};
use crate::flow::{Action, FlowMatch, FlowRule};
use crate::net::{Packet, PortId, SimTime, SwitchId};
use crate::secfn::{KeyRecord, RateLimitSpec};
use crate::topology::Capability;

use super::keys::KeyManager;
use super::policy::{PolicyAction, SecurityPolicy};
use super::resolve::PolicyDecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Priorities {
    pub permit: u32,
    pub deny: u32,
    pub isolate: u32,
    pub guard: u32,
}

impl Default for Priorities {
    fn default() -> Self {
        Priorities { permit: 100, deny: 200, isolate: u32::MAX, guard: 1 }
    }
}

/// Change to a switch's desired TV() configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvChange {
    AddLimits(Vec<RateLimitSpec>),
    AddMonitor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obligation {
    Install { switch: SwitchId, rule: FlowRule },
    Configure { switch: SwitchId, change: TvChange },
    KeyPush { switch: SwitchId, record: KeyRecord },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("enforcement failed at {switch}: {cause}")]
pub struct EnforcementFailure {
    pub switch: SwitchId,
    pub cause: String,
}

/// Where the packet_in came from.
#[derive(Debug, Clone, Copy)]
pub struct Ingress<'a> {
    pub switch: &'a SwitchId,
    pub in_port: PortId,
    pub packet: &'a Packet,
}

pub struct EnforceEnv<'a> {
    pub view: &'a NetworkView,
    pub graph: &'a SwitchGraph,
    pub ids: &'a mut RuleIdAlloc,
    pub keys: &'a mut KeyManager,
    pub priorities: Priorities,
    pub now: SimTime,
}

fn fail(switch: &SwitchId, cause: impl Into<String>) -> EnforcementFailure {
    EnforcementFailure { switch: switch.clone(), cause: cause.into() }
}

/// Obligations for one decision. Either every obligation is returned or none:
/// all checks run before anything stateful besides id allocation.
pub fn enforce(
    decision: &PolicyDecision,
    policy: Option<&SecurityPolicy>,
    at: Ingress<'_>,
    env: &mut EnforceEnv<'_>,
) -> Result<Vec<Obligation>, EnforcementFailure> {
    let base = FlowMatch::service_of(at.packet);
    let view = env.view;
    match &decision.effective_action {
        PolicyAction::Deny => {
            let rule = FlowRule::new(
                env.ids.next_id(),
                base.with_in_port(at.in_port),
                env.priorities.deny,
                vec![Action::Drop],
            );
            Ok(vec![Obligation::Install { switch: at.switch.clone(), rule }])
        }
        PolicyAction::Isolate => {
            let (switch, port) = match view.host_by_ip(at.packet.src_ip) {
                Some(h) => (h.switch.clone(), h.port),
                None if view.is_host_port(at.switch, at.in_port) => (at.switch.clone(), at.in_port),
                None => return Err(fail(at.switch, "source host attachment unknown")),
            };
            let rule = FlowRule::new(
                env.ids.next_id(),
                FlowMatch::any().with_in_port(port),
                env.priorities.isolate,
                vec![Action::Drop],
            );
            Ok(vec![Obligation::Install { switch, rule }])
        }
        action => {
            let dst = view
                .host_by_ip(at.packet.dst_ip)
                .ok_or_else(|| fail(at.switch, format!("no host with address {}", at.packet.dst_ip)))?;
            let constraint = match action {
                PolicyAction::Permit { max_latency_us } => *max_latency_us,
                _ => None,
            };
            let path = env
                .graph
                .route(at.switch, at.in_port, &dst.switch, dst.port, constraint)
                .map_err(|e| fail(at.switch, e.to_string()))?;
            let edge_tv = view.is_host_port(at.switch, at.in_port) && view.has_cap(at.switch, Capability::Tv);
            let needs_tv = matches!(action, PolicyAction::RateLimit { .. } | PolicyAction::Monitor { .. });
            if needs_tv && !edge_tv {
                return Err(fail(at.switch, format!("{} needs TV at the source edge", action.name())));
            }

            let mut out = Vec::new();
            let mut sec = PathSecurity { tv_at_ingress: edge_tv, ..PathSecurity::default() };
            match action {
                PolicyAction::RateLimit { limits } => {
                    let traffic = policy.and_then(|p| p.conditions.traffic).unwrap_or_default();
                    let target = FlowMatch {
                        dst_ip: Some(at.packet.dst_ip),
                        proto: traffic.proto,
                        dst_port: traffic.dport,
                        ..FlowMatch::default()
                    };
                    let specs = limits
                        .iter()
                        .map(|l| RateLimitSpec {
                            scope: l.scope,
                            threshold: l.threshold,
                            window_ms: l.window_ms,
                            target: target.clone(),
                        })
                        .collect();
                    out.push(Obligation::Configure { switch: at.switch.clone(), change: TvChange::AddLimits(specs) });
                }
                PolicyAction::Monitor { ruleset } => {
                    out.push(Obligation::Configure {
                        switch: at.switch.clone(),
                        change: TvChange::AddMonitor(ruleset.clone()),
                    });
                }
                PolicyAction::Encrypt => {
                    let (first, last) = (&path.first().switch, &path.last().switch);
                    for sw in [first, last] {
                        if !view.has_cap(sw, Capability::Fe) {
                            return Err(fail(sw, "switch lacks flow encryption"));
                        }
                    }
                    let (enc, dec) = env.keys.pair_for(&base, env.now);
                    sec.fe = Some(enc.key_id);
                    out.push(Obligation::KeyPush { switch: first.clone(), record: enc });
                    out.push(Obligation::KeyPush { switch: last.clone(), record: dec });
                }
                _ => {}
            }
            let rules = compile_path(&path, &base, sec, env.priorities.permit, view, env.ids)
                .map_err(|e| fail(at.switch, e.to_string()))?;
            out.extend(rules.into_iter().map(|(switch, rule)| Obligation::Install { switch, rule }));
            Ok(out)
        }
    }
}
