//! Switch/controller control protocol: message types, framing codec, and the
//! per-switch ordered channel.

mod codec;

pub use codec::{decode, encode, FrameDecoder, MalformedFrame, MAX_FRAME};

use serde::{Deserialize, Serialize};

use crate::flow::{FlowMatch, FlowRule, RuleId};
use crate::net::{Packet, PortId, SimTime, SwitchId};
use crate::secfn::{AlertEvidence, HostBinding, HostTags, KeyRecord, RateLimitSpec, SecFnStats};
use crate::topology::Capability;

/// Default one-way control-plane latency.
pub const DEFAULT_CTRL_LATENCY_US: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SwitchToController,
    ControllerToSwitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketInReason {
    NoMatch,
    SendToController,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoveReason {
    Command,
    IdleTimeout,
    HardTimeout,
}

/// Complete TV() configuration for one switch. The ruleset travels as its XML
/// interchange text.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FuncConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ruleset_xml: Option<String>,
    #[serde(default)]
    pub limits: Vec<RateLimitSpec>,
    #[serde(default)]
    pub bindings: Vec<HostBinding>,
    #[serde(default)]
    pub tags: Vec<HostTags>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Hello,
    Features,
    PacketIn,
    FlowMod,
    FlowRemove,
    FuncConfig,
    KeyPush,
    StatsRequest,
    StatsReply,
    AlertUp,
    Barrier,
}

impl ControlKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Hello => "hello",
            ControlKind::Features => "features",
            ControlKind::PacketIn => "packet_in",
            ControlKind::FlowMod => "flow_mod",
            ControlKind::FlowRemove => "flow_remove",
            ControlKind::FuncConfig => "func_config",
            ControlKind::KeyPush => "key_push",
            ControlKind::StatsRequest => "stats_request",
            ControlKind::StatsReply => "stats_reply",
            ControlKind::AlertUp => "alert_up",
            ControlKind::Barrier => "barrier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum ControlBody {
    Hello { version: u32 },
    Features { caps: Vec<Capability>, ports: Vec<PortId> },
    PacketIn { in_port: PortId, reason: PacketInReason, packet: Packet },
    FlowMod { rule: FlowRule },
    /// Controller to switch: remove rules subsumed by `matcher` (or exactly the
    /// listed ids when nonempty). Switch to controller: rules that expired.
    FlowRemove {
        matcher: FlowMatch,
        #[serde(default)]
        rule_ids: Vec<RuleId>,
        reason: RemoveReason,
    },
    FuncConfig { config: FuncConfig },
    KeyPush { record: KeyRecord },
    StatsRequest {},
    StatsReply { rules: Vec<FlowRule>, secfn: SecFnStats },
    AlertUp { evidence: AlertEvidence },
    Barrier { xid: u64 },
}

impl ControlBody {
    pub fn kind(&self) -> ControlKind {
        match self {
            ControlBody::Hello { .. } => ControlKind::Hello,
            ControlBody::Features { .. } => ControlKind::Features,
            ControlBody::PacketIn { .. } => ControlKind::PacketIn,
            ControlBody::FlowMod { .. } => ControlKind::FlowMod,
            ControlBody::FlowRemove { .. } => ControlKind::FlowRemove,
            ControlBody::FuncConfig { .. } => ControlKind::FuncConfig,
            ControlBody::KeyPush { .. } => ControlKind::KeyPush,
            ControlBody::StatsRequest {} => ControlKind::StatsRequest,
            ControlBody::StatsReply { .. } => ControlKind::StatsReply,
            ControlBody::AlertUp { .. } => ControlKind::AlertUp,
            ControlBody::Barrier { .. } => ControlKind::Barrier,
        }
    }

    /// One-line description safe for logs: key material is reduced to its id.
    pub fn summary(&self) -> String {
        match self {
            ControlBody::Hello { version } => format!("hello v{version}"),
            ControlBody::Features { caps, ports } => format!("features caps={caps:?} ports={}", ports.len()),
            ControlBody::PacketIn { in_port, reason, packet } => format!(
                "packet_in port={in_port} reason={reason:?} pkt={} {}",
                packet.pkt_id,
                packet.five_tuple()
            ),
            ControlBody::FlowMod { rule } => {
                format!("flow_mod rule={} prio={} match={} actions={:?}", rule.rule_id, rule.priority, rule.matcher, rule.actions)
            }
            ControlBody::FlowRemove { matcher, rule_ids, reason } => {
                format!("flow_remove match={matcher} ids={} reason={reason:?}", rule_ids.len())
            }
            ControlBody::FuncConfig { config } => format!(
                "func_config ruleset={} limits={} bindings={}",
                config.ruleset_xml.is_some(),
                config.limits.len(),
                config.bindings.len()
            ),
            ControlBody::KeyPush { record } => {
                format!("key_push key_id={} role={:?} flow={}", record.key_id, record.role, record.flow)
            }
            ControlBody::StatsRequest {} => "stats_request".into(),
            ControlBody::StatsReply { rules, .. } => format!("stats_reply rules={}", rules.len()),
            ControlBody::AlertUp { evidence } => {
                format!("alert_up {} pkt={} src={}", evidence.reason.as_str(), evidence.pkt_id, evidence.src_ip)
            }
            ControlBody::Barrier { xid } => format!("barrier xid={xid}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMsg {
    pub msg_id: u64,
    pub direction: Direction,
    /// The switch end of the channel.
    pub switch: SwitchId,
    pub sent_at: SimTime,
    #[serde(flatten)]
    pub body: ControlBody,
}

impl ControlMsg {
    pub fn kind(&self) -> ControlKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("control channel to {0} is closed")]
    ChannelClosed(SwitchId),
    #[error("no control channel for switch {0}")]
    UnknownSwitch(SwitchId),
}

/// Point-to-point ordered channel between one switch and the controller.
/// Delivery times never decrease, so per-channel FIFO holds once the event
/// queue breaks ties by insertion order.
#[derive(Debug, Clone)]
pub struct ControlChannel {
    switch: SwitchId,
    latency_us: u64,
    open: bool,
    last_delivery: [SimTime; 2],
}

impl ControlChannel {
    pub fn new(switch: SwitchId, latency_us: u64) -> Self {
        ControlChannel { switch, latency_us, open: true, last_delivery: [SimTime::ZERO; 2] }
    }

    pub fn switch(&self) -> &SwitchId {
        &self.switch
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn close(&mut self) {
        self.open = false;
    }

    /// Delivery time for a message sent now in `dir`.
    pub fn send(&mut self, dir: Direction, now: SimTime) -> Result<SimTime, ChannelError> {
        if !self.open {
            return Err(ChannelError::ChannelClosed(self.switch.clone()));
        }
        let slot = match dir {
            Direction::SwitchToController => 0,
            Direction::ControllerToSwitch => 1,
        };
        let at = (now + self.latency_us).max(self.last_delivery[slot]);
        self.last_delivery[slot] = at;
        Ok(at)
    }
}
