//! Controller core: network view, path computation, rule compilation, and the
//! application interface the simulator drives.

pub mod compile;
mod forwarding;
pub mod path;
pub mod view;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{ControlBody, ControlMsg};
use crate::cssa::{Alert, AuditRecord, PolicyError, PolicySummary};
use crate::net::{HostId, SimTime, SwitchId};
use crate::secfn::RateLimitSpec;
use crate::sim::log::LogKind;

pub use compile::{compile_path, CompileError, PathSecurity, RuleIdAlloc};
pub use forwarding::ForwardingApp;
pub use path::{compute_path, Hop, PathError, PathSpec, SwitchGraph};
pub use view::{BindingConflict, HostInfo, NetworkView, SwitchInfo, ViewSnapshot};

/// Operator-originated requests, serialized through the simulation command queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OperatorCommand {
    Isolate { host: HostId },
    Restrict { host: HostId, spec: RateLimitSpec },
    Acknowledge { alert_id: u64 },
    LoadPolicies { xml: String },
    DeletePolicy { policy_id: u32 },
    FireEvent { name: String },
    ClearEvent { name: String },
}

impl OperatorCommand {
    pub fn summary(&self) -> String {
        match self {
            OperatorCommand::Isolate { host } => format!("isolate {host}"),
            OperatorCommand::Restrict { host, spec } => {
                format!("restrict {host} {} {}/{}ms", spec.scope.as_str(), spec.threshold, spec.window_ms)
            }
            OperatorCommand::Acknowledge { alert_id } => format!("acknowledge alert {alert_id}"),
            OperatorCommand::LoadPolicies { xml } => format!("load policies ({} bytes)", xml.len()),
            OperatorCommand::DeletePolicy { policy_id } => format!("delete policy {policy_id}"),
            OperatorCommand::FireEvent { name } => format!("fire event {name}"),
            OperatorCommand::ClearEvent { name } => format!("clear event {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CommandError {
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("unknown alert {0}")]
    UnknownAlert(u64),
    #[error("unknown policy {0}")]
    UnknownPolicy(u32),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid rate limit: {0}")]
    InvalidLimit(String),
    #[error("{0} is not supported by this controller application")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    Alerts,
    Flows,
    Topology,
    Audit,
}

impl Topic {
    pub const ALL: [Topic; 4] = [Topic::Alerts, Topic::Flows, Topic::Topology, Topic::Audit];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Alerts => "alerts",
            Topic::Flows => "flows",
            Topic::Topology => "topology",
            Topic::Audit => "audit",
        }
    }
}

impl FromStr for Topic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown topic {s:?}"))
    }
}

/// Something the operator console should hear about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notice {
    pub topic: Topic,
    pub body: Value,
}

/// Handler context: outbound messages, notices and log records produced while
/// handling one input.
#[derive(Debug)]
pub struct ControllerCtx {
    pub now: SimTime,
    out: Vec<(SwitchId, ControlBody)>,
    notices: Vec<Notice>,
    records: Vec<(LogKind, String, Value)>,
}

impl ControllerCtx {
    pub fn new(now: SimTime) -> Self {
        ControllerCtx { now, out: Vec::new(), notices: Vec::new(), records: Vec::new() }
    }

    pub fn send(&mut self, switch: SwitchId, body: ControlBody) {
        self.out.push((switch, body));
    }

    pub fn notify(&mut self, topic: Topic, body: Value) {
        self.notices.push(Notice { topic, body });
    }

    pub fn record(&mut self, kind: LogKind, subject: impl Into<String>, detail: Value) {
        self.records.push((kind, subject.into(), detail));
    }

    pub fn outbound(&self) -> &[(SwitchId, ControlBody)] {
        &self.out
    }

    #[allow(clippy::type_complexity)]
    pub fn into_parts(self) -> (Vec<(SwitchId, ControlBody)>, Vec<Notice>, Vec<(LogKind, String, Value)>) {
        (self.out, self.notices, self.records)
    }
}

/// Read-only export of controller application state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppState {
    pub view: Option<ViewSnapshot>,
    pub alerts: Vec<Alert>,
    pub audit: Vec<AuditRecord>,
    pub policies: Vec<PolicySummary>,
    pub isolated: Vec<HostId>,
    pub restricted: Vec<HostId>,
    pub active_events: Vec<String>,
}

pub trait ControllerApp: Send {
    fn name(&self) -> &'static str;

    fn on_message(&mut self, ctx: &mut ControllerCtx, msg: &ControlMsg);

    fn on_command(&mut self, ctx: &mut ControllerCtx, cmd: &OperatorCommand) -> Result<(), CommandError>;

    fn state(&self) -> AppState;
}
