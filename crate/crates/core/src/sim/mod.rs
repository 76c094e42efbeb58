//! Deterministic discrete-event simulation of hosts, links and switches.
//!
//! One event loop owns all state. Events are ordered by (time, sequence number),
//! so identical inputs always replay identically. External callers interact
//! through [`CommandQueue`] and by reading state between `run_until` calls.

pub mod log;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{
    ControlBody, ControlChannel, ControlMsg, Direction, FuncConfig, PacketInReason, RemoveReason,
    DEFAULT_CTRL_LATENCY_US,
};
use crate::controller::{AppState, CommandError, ControllerApp, ControllerCtx, Notice, OperatorCommand, Topic};
use crate::flow::{Action, EnvelopeKind, FlowMatch, FlowRule, FlowTable, RuleError, RuleId, SecFunc};
use crate::net::{FiveTuple, HostId, Packet, PacketId, PortId, SimTime, SwitchId};
use crate::secfn::{
    auth_failure_evidence, AlertEvidence, DpiRuleset, DropReason, FeError, SwitchSecFn, TvVerdict,
};
use crate::topology::{Capability, PortPeer, Topology};

use self::log::{EventLog, LogKind};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("no link between {0} and {1}")]
    UnknownLink(SwitchId, SwitchId),
    #[error("rule id {0} already installed")]
    DuplicateRuleId(RuleId),
    #[error(transparent)]
    InvalidRule(#[from] RuleError),
    #[error("time {requested} is before the current time {now}")]
    TimeTravel { requested: SimTime, now: SimTime },
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub ctrl_latency_us: u64,
    /// Packets held per flow while a controller decision is pending.
    pub buffer_capacity: usize,
    /// How long a buffered packet waits for a decision before it is dropped.
    pub buffer_timeout_us: u64,
    pub max_hops: u16,
    pub record_log: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ctrl_latency_us: DEFAULT_CTRL_LATENCY_US,
            buffer_capacity: 64,
            buffer_timeout_us: 1_000_000,
            max_hops: 64,
            record_log: true,
        }
    }
}

/// Requests accepted from other threads and applied at the next `run_until`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    Inject { host: HostId, packet: Packet },
    Operator { command: OperatorCommand },
    StartScenario { name: String },
}

/// Thread-safe command ingress.
#[derive(Debug, Clone, Default)]
pub struct CommandQueue {
    inner: Arc<Mutex<VecDeque<Command>>>,
}

impl CommandQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, cmd: Command) {
        self.inner.lock().expect("command queue poisoned").push_back(cmd);
    }

    pub fn drain(&self) -> Vec<Command> {
        self.inner.lock().expect("command queue poisoned").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("command queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrainReport {
    pub injected: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<DropReason, u64>,
    pub pending: u64,
}

impl DrainReport {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn balanced(&self) -> bool {
        self.injected == self.delivered + self.dropped_total() + self.pending
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub time: SimTime,
    pub host: HostId,
    pub packet: Packet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapRecord {
    pub time: SimTime,
    /// `"A->B"` in switch ids.
    pub direction: String,
    pub packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFault {
    /// Flip the lowest bit of the first payload byte of every packet on the link.
    FlipPayloadBit,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct BufferKey {
    in_port: PortId,
    flow: FiveTuple,
}

#[derive(Debug, Clone)]
struct PendingBuffer {
    packets: Vec<(Packet, u16)>,
    generation: u64,
}

/// One switch: flow table, security functions, and packets awaiting a decision.
#[derive(Debug, Clone)]
pub struct SwitchState {
    pub id: SwitchId,
    pub caps: BTreeSet<Capability>,
    pub table: FlowTable,
    pub secfn: SwitchSecFn,
    buffers: BTreeMap<BufferKey, PendingBuffer>,
}

impl SwitchState {
    pub fn buffered(&self) -> usize {
        self.buffers.values().map(|b| b.packets.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Event {
    PacketArrival { switch: SwitchId, in_port: PortId, pkt: Packet, hops: u16 },
    RuleTimeout { switch: SwitchId, rule_id: RuleId },
    Inject { host: HostId, pkt: Packet },
    BufferExpiry { switch: SwitchId, key: BufferKey, generation: u64 },
    ControlMsgDelivery { msg: ControlMsg },
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we pop the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Tap {
    link: usize,
    records: Vec<TapRecord>,
}

pub struct Simulation {
    now: SimTime,
    cfg: SimConfig,
    seed: u64,
    topology: Arc<Topology>,
    ports: BTreeMap<(SwitchId, PortId), PortPeer>,
    switches: BTreeMap<SwitchId, SwitchState>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    link_busy: Vec<[SimTime; 2]>,
    channels: BTreeMap<SwitchId, ControlChannel>,
    controller: Box<dyn ControllerApp>,
    log: EventLog,
    taps: Vec<Tap>,
    faults: BTreeMap<usize, LinkFault>,
    deliveries: BTreeMap<HostId, Vec<Delivery>>,
    next_pkt: u64,
    next_msg: u64,
    next_buffer_gen: u64,
    report: DrainReport,
    commands: CommandQueue,
    notices: Vec<Notice>,
    scenario_requests: Vec<String>,
    command_errors: Vec<(OperatorCommand, CommandError)>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.now)
            .field("seed", &self.seed)
            .field("switches", &self.switches.len())
            .field("controller", &self.controller.name())
            .finish_non_exhaustive()
    }
}

fn dir_label(from: &SwitchId, to: &SwitchId) -> String {
    format!("{from}->{to}")
}

impl Simulation {
    /// Builds the simulation with empty flow tables. Every switch opens its
    /// control channel at time zero with Hello and Features.
    pub fn new(topology: Arc<Topology>, seed: u64, controller: Box<dyn ControllerApp>, cfg: SimConfig) -> Self {
        let mut switches = BTreeMap::new();
        let mut channels = BTreeMap::new();
        for (id, caps) in &topology.switches {
            switches.insert(
                id.clone(),
                SwitchState {
                    id: id.clone(),
                    caps: caps.clone(),
                    table: FlowTable::new(),
                    secfn: SwitchSecFn::new(id.clone()),
                    buffers: BTreeMap::new(),
                },
            );
            channels.insert(id.clone(), ControlChannel::new(id.clone(), cfg.ctrl_latency_us));
        }
        let mut sim = Simulation {
            now: SimTime::ZERO,
            seed,
            ports: topology.port_map(),
            link_busy: vec![[SimTime::ZERO; 2]; topology.links.len()],
            topology: topology.clone(),
            switches,
            queue: BinaryHeap::new(),
            seq: 0,
            channels,
            controller,
            log: EventLog::new(cfg.record_log),
            cfg,
            taps: Vec::new(),
            faults: BTreeMap::new(),
            deliveries: BTreeMap::new(),
            next_pkt: 1,
            next_msg: 1,
            next_buffer_gen: 1,
            report: DrainReport::default(),
            commands: CommandQueue::new(),
            notices: Vec::new(),
            scenario_requests: Vec::new(),
            command_errors: Vec::new(),
        };
        for id in topology.switches.keys() {
            let caps = sim.switches[id].caps.iter().copied().collect();
            let ports = topology.ports_of(id);
            sim.send_up(id, ControlBody::Hello { version: 1 });
            sim.send_up(id, ControlBody::Features { caps, ports });
        }
        sim
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn commands(&self) -> CommandQueue {
        self.commands.clone()
    }

    /// Replaces the command ingress, e.g. with one a gateway already holds.
    pub fn set_command_queue(&mut self, queue: CommandQueue) {
        self.commands = queue;
    }

    pub fn switch(&self, id: &SwitchId) -> Option<&SwitchState> {
        self.switches.get(id)
    }

    pub fn switches(&self) -> impl Iterator<Item = &SwitchState> {
        self.switches.values()
    }

    pub fn controller_state(&self) -> AppState {
        self.controller.state()
    }

    pub fn controller_name(&self) -> &'static str {
        self.controller.name()
    }

    pub fn take_notices(&mut self) -> Vec<Notice> {
        std::mem::take(&mut self.notices)
    }

    pub fn take_scenario_requests(&mut self) -> Vec<String> {
        std::mem::take(&mut self.scenario_requests)
    }

    pub fn take_command_errors(&mut self) -> Vec<(OperatorCommand, CommandError)> {
        std::mem::take(&mut self.command_errors)
    }

    pub fn deliveries(&self, host: &HostId) -> &[Delivery] {
        self.deliveries.get(host).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_deliveries(&self) -> impl Iterator<Item = &Delivery> {
        self.deliveries.values().flatten()
    }

    pub fn report(&self) -> DrainReport {
        let mut r = self.report.clone();
        let in_flight = self
            .queue
            .iter()
            .filter(|s| matches!(s.event, Event::PacketArrival { .. }))
            .count() as u64;
        let buffered: u64 = self.switches.values().map(|s| s.buffered() as u64).sum();
        r.pending = in_flight + buffered;
        r
    }

    pub fn has_pending_events(&self) -> bool {
        !self.queue.is_empty()
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, event });
    }

    fn record(&mut self, kind: LogKind, subject: impl Into<String>, detail: serde_json::Value) {
        self.log.push(self.now, kind, subject, detail);
    }

    fn host_attachment(&self, host: &HostId) -> Result<(SwitchId, PortId), SimError> {
        self.topology
            .host(host)
            .map(|h| (h.switch.clone(), h.port))
            .ok_or_else(|| SimError::UnknownHost(host.clone()))
    }

    /// Injects now at the host's attachment point; returns the assigned id.
    pub fn inject_packet(&mut self, host: &HostId, pkt: Packet) -> Result<PacketId, SimError> {
        self.host_attachment(host)?;
        if pkt.payload.len() > crate::net::MAX_PAYLOAD {
            return Err(SimError::PayloadTooLarge(pkt.payload.len()));
        }
        Ok(self.do_inject(host, pkt))
    }

    /// Schedules an injection at `at`; the packet id is assigned when it fires.
    pub fn inject_at(&mut self, at: SimTime, host: &HostId, pkt: Packet) -> Result<(), SimError> {
        self.host_attachment(host)?;
        if at < self.now {
            return Err(SimError::TimeTravel { requested: at, now: self.now });
        }
        if pkt.payload.len() > crate::net::MAX_PAYLOAD {
            return Err(SimError::PayloadTooLarge(pkt.payload.len()));
        }
        self.schedule(at, Event::Inject { host: host.clone(), pkt });
        Ok(())
    }

    fn do_inject(&mut self, host: &HostId, mut pkt: Packet) -> PacketId {
        let (switch, port) = self.host_attachment(host).expect("checked by caller");
        pkt.pkt_id = PacketId(self.next_pkt);
        self.next_pkt += 1;
        pkt.injected_at = self.now;
        self.report.injected += 1;
        let id = pkt.pkt_id;
        self.record(
            LogKind::Inject,
            host.as_str(),
            json!({
                "pkt_id": id.0,
                "switch": switch.as_str(),
                "port": port.0,
                "src_mac": pkt.src_mac.to_string(),
                "src_ip": pkt.src_ip.to_string(),
                "dst_ip": pkt.dst_ip.to_string(),
                "proto": pkt.proto.as_str(),
                "src_port": pkt.src_port,
                "dst_port": pkt.dst_port,
                "bytes": pkt.payload.len(),
            }),
        );
        self.schedule(self.now, Event::PacketArrival { switch, in_port: port, pkt, hops: 0 });
        id
    }

    pub fn tap_link(&mut self, a: &SwitchId, b: &SwitchId) -> Result<TapId, SimError> {
        let link = self
            .topology
            .link_index(a, b)
            .ok_or_else(|| SimError::UnknownLink(a.clone(), b.clone()))?;
        self.taps.push(Tap { link, records: Vec::new() });
        Ok(TapId(self.taps.len() - 1))
    }

    pub fn read_tap(&self, tap: TapId) -> &[TapRecord] {
        self.taps.get(tap.0).map(|t| t.records.as_slice()).unwrap_or(&[])
    }

    pub fn set_link_fault(&mut self, a: &SwitchId, b: &SwitchId, fault: Option<LinkFault>) -> Result<(), SimError> {
        let link = self
            .topology
            .link_index(a, b)
            .ok_or_else(|| SimError::UnknownLink(a.clone(), b.clone()))?;
        match fault {
            Some(f) => self.faults.insert(link, f),
            None => self.faults.remove(&link),
        };
        Ok(())
    }

    pub fn close_channel(&mut self, switch: &SwitchId) -> Result<(), SimError> {
        self.channels
            .get_mut(switch)
            .ok_or_else(|| SimError::UnknownSwitch(switch.clone()))?
            .close();
        Ok(())
    }

    /// Installs a rule directly, bypassing the control channel.
    pub fn install_rule(&mut self, switch: &SwitchId, rule: FlowRule) -> Result<(), SimError> {
        self.install(switch, rule)
    }

    /// Removes rules whose match equals or is subsumed by `predicate`.
    pub fn remove_rules(&mut self, switch: &SwitchId, predicate: &FlowMatch) -> Result<usize, SimError> {
        if !self.switches.contains_key(switch) {
            return Err(SimError::UnknownSwitch(switch.clone()));
        }
        Ok(self.remove(switch, predicate, &[], RemoveReason::Command).len())
    }

    /// Applies a command immediately at the current time.
    pub fn apply_command(&mut self, cmd: Command) {
        match cmd {
            Command::Inject { host, packet } => {
                if let Err(e) = self.inject_packet(&host, packet) {
                    self.record(LogKind::Command, host.as_str(), json!({"inject_error": e.to_string()}));
                }
            }
            Command::Operator { command } => {
                self.record(LogKind::Command, "controller", json!({"command": command.summary()}));
                let mut ctx = ControllerCtx::new(self.now);
                let result = self.controller.on_command(&mut ctx, &command);
                self.flush_ctx(ctx);
                if let Err(e) = result {
                    self.record(LogKind::Command, "controller", json!({"error": e.to_string()}));
                    self.command_errors.push((command, e));
                }
            }
            Command::StartScenario { name } => {
                self.record(LogKind::Command, "harness", json!({"start_scenario": name}));
                self.scenario_requests.push(name);
            }
        }
    }

    /// Processes every event with time ≤ `t_end` and advances the clock to it.
    pub fn run_until(&mut self, t_end: SimTime) -> DrainReport {
        for cmd in self.commands.drain() {
            self.apply_command(cmd);
        }
        while self.queue.peek().is_some_and(|s| s.time <= t_end) {
            let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
            self.now = time;
            self.dispatch(event);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        self.report()
    }

    /// Runs until the queue is empty or `limit` is reached.
    pub fn run_to_quiescence(&mut self, limit: SimTime) -> DrainReport {
        for cmd in self.commands.drain() {
            self.apply_command(cmd);
        }
        while let Some(next) = self.queue.peek().map(|s| s.time) {
            if next > limit {
                break;
            }
            let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
            self.now = time;
            self.dispatch(event);
        }
        self.report()
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::PacketArrival { switch, in_port, pkt, hops } => self.process_packet(&switch, in_port, pkt, hops),
            Event::RuleTimeout { switch, rule_id } => self.rule_timeout(&switch, rule_id),
            Event::Inject { host, pkt } => {
                self.do_inject(&host, pkt);
            }
            Event::BufferExpiry { switch, key, generation } => self.buffer_expiry(&switch, &key, generation),
            Event::ControlMsgDelivery { msg } => self.deliver_control(msg),
        }
    }

    fn drop_packet(&mut self, switch: &SwitchId, pkt: &Packet, reason: DropReason, rule: Option<RuleId>) {
        *self.report.dropped.entry(reason).or_insert(0) += 1;
        let mut detail = json!({
            "pkt_id": pkt.pkt_id.0,
            "reason": reason.as_str(),
            "src_ip": pkt.src_ip.to_string(),
            "dst_ip": pkt.dst_ip.to_string(),
        });
        if let Some(r) = rule {
            detail["rule_id"] = json!(r.0);
        }
        self.record(LogKind::Drop, switch.as_str(), detail);
    }

    fn process_packet(&mut self, switch: &SwitchId, in_port: PortId, pkt: Packet, hops: u16) {
        self.record(
            LogKind::Arrival,
            switch.as_str(),
            json!({"pkt_id": pkt.pkt_id.0, "in_port": in_port.0, "encrypted": pkt.envelope.is_encrypted()}),
        );
        let now = self.now;
        let Some(sw) = self.switches.get_mut(switch) else {
            self.drop_packet(switch, &pkt, DropReason::UnknownSwitch, None);
            return;
        };
        let Some(idx) = sw.table.lookup_index(&pkt, in_port) else {
            self.record(LogKind::Miss, switch.as_str(), json!({"pkt_id": pkt.pkt_id.0, "in_port": in_port.0}));
            self.punt(switch, in_port, pkt, hops, PacketInReason::NoMatch);
            return;
        };
        let rule = sw.table.rule_mut(idx);
        rule.packet_count += 1;
        rule.byte_count += pkt.wire_len() as u64;
        rule.last_hit = now;
        let rule_id = rule.rule_id;
        let actions = rule.actions.clone();
        self.record(LogKind::Match, switch.as_str(), json!({"pkt_id": pkt.pkt_id.0, "rule_id": rule_id.0}));
        self.execute(switch, in_port, pkt, hops, rule_id, &actions);
    }

    fn execute(&mut self, switch: &SwitchId, in_port: PortId, mut pkt: Packet, hops: u16, rule_id: RuleId, actions: &[Action]) {
        let now = self.now;
        for action in actions {
            match action {
                Action::Forward(port) => return self.forward(switch, *port, pkt, hops),
                Action::Drop => return self.drop_packet(switch, &pkt, DropReason::RuleDrop, Some(rule_id)),
                Action::SendToController(_) => {
                    return self.punt(switch, in_port, pkt, hops, PacketInReason::SendToController)
                }
                Action::ApplyFunc(SecFunc::Tv) => {
                    let sw = self.switches.get_mut(switch).expect("switch exists");
                    let out = sw.secfn.tv_validate(&pkt, in_port, now);
                    if out.unconfigured {
                        self.record(
                            LogKind::TvWarning,
                            switch.as_str(),
                            json!({"pkt_id": pkt.pkt_id.0, "warning": "tv not configured, passing"}),
                        );
                    }
                    if let Some(nf) = &out.new_flow {
                        self.record(
                            LogKind::NewFlow,
                            switch.as_str(),
                            json!({
                                "pkt_id": pkt.pkt_id.0,
                                "admitted": nf.admitted,
                                "denied_by": nf.denied_by.map(|s| s.as_str()),
                                "src_ip": nf.flow.src_ip.to_string(),
                                "dst_ip": nf.flow.dst_ip.to_string(),
                                "proto": nf.flow.proto.as_str(),
                                "src_port": nf.flow.src_port,
                                "dst_port": nf.flow.dst_port,
                                "keys": nf.keys.iter().map(|(s, k)| format!("{}={k}", s.as_str())).collect::<Vec<_>>(),
                            }),
                        );
                    }
                    if let Some(ev) = out.evidence {
                        self.send_alert(switch, ev);
                    }
                    if let TvVerdict::Drop(reason) = out.verdict {
                        let sw = self.switches.get_mut(switch).expect("switch exists");
                        sw.secfn.ls_audit(format!("drop pkt={} reason={}", pkt.pkt_id, reason.as_str()), now);
                        return self.drop_packet(switch, &pkt, reason, Some(rule_id));
                    }
                }
                Action::ApplyFunc(func) => {
                    let sw = self.switches.get_mut(switch).expect("switch exists");
                    match sw.secfn.fe_apply(*func, &pkt) {
                        Ok(p) => pkt = p,
                        Err(FeError::AuthFailure) => {
                            let ev = auth_failure_evidence(switch, in_port, &pkt);
                            self.send_alert(switch, ev);
                            return self.drop_packet(switch, &pkt, DropReason::AuthFailure, Some(rule_id));
                        }
                        Err(FeError::MissingKey) => {
                            return self.drop_packet(switch, &pkt, DropReason::MissingKey, Some(rule_id))
                        }
                        Err(_) => return self.drop_packet(switch, &pkt, DropReason::EnvelopeMismatch, Some(rule_id)),
                    }
                }
                Action::SetEnvelope(kind) => {
                    let have = if pkt.envelope.is_encrypted() { EnvelopeKind::Encrypted } else { EnvelopeKind::Plain };
                    if have != *kind {
                        return self.drop_packet(switch, &pkt, DropReason::EnvelopeMismatch, Some(rule_id));
                    }
                }
            }
        }
        // a rule without a terminal action leaves the packet nowhere to go
        self.drop_packet(switch, &pkt, DropReason::RuleDrop, Some(rule_id));
    }

    fn send_alert(&mut self, switch: &SwitchId, evidence: AlertEvidence) {
        self.send_up(switch, ControlBody::AlertUp { evidence });
    }

    fn punt(&mut self, switch: &SwitchId, in_port: PortId, pkt: Packet, hops: u16, reason: PacketInReason) {
        let key = BufferKey { in_port, flow: pkt.five_tuple() };
        let cap = self.cfg.buffer_capacity;
        let sw = self.switches.get_mut(switch).expect("switch exists");
        if let Some(buf) = sw.buffers.get_mut(&key) {
            if buf.packets.len() >= cap {
                return self.drop_packet(switch, &pkt, DropReason::BufferOverflow, None);
            }
            buf.packets.push((pkt.clone(), hops));
            let depth = buf.packets.len();
            self.record(LogKind::Buffered, switch.as_str(), json!({"pkt_id": pkt.pkt_id.0, "depth": depth}));
            return;
        }
        let generation = self.next_buffer_gen;
        self.next_buffer_gen += 1;
        sw.buffers.insert(key.clone(), PendingBuffer { packets: vec![(pkt.clone(), hops)], generation });
        self.record(LogKind::Buffered, switch.as_str(), json!({"pkt_id": pkt.pkt_id.0, "depth": 1}));
        let expiry = self.now + self.cfg.buffer_timeout_us;
        self.schedule(expiry, Event::BufferExpiry { switch: switch.clone(), key, generation });
        self.send_up(switch, ControlBody::PacketIn { in_port, reason, packet: pkt });
    }

    fn buffer_expiry(&mut self, switch: &SwitchId, key: &BufferKey, generation: u64) {
        let sw = self.switches.get_mut(switch).expect("switch exists");
        if sw.buffers.get(key).map(|b| b.generation) != Some(generation) {
            return;
        }
        let buf = sw.buffers.remove(key).expect("present");
        for (pkt, _) in buf.packets {
            self.drop_packet(switch, &pkt, DropReason::BufferTimeout, None);
        }
    }

    fn forward(&mut self, switch: &SwitchId, port: PortId, mut pkt: Packet, hops: u16) {
        match self.ports.get(&(switch.clone(), port)).cloned() {
            None => self.drop_packet(switch, &pkt, DropReason::NoLink, None),
            Some(PortPeer::Host(host)) => {
                self.report.delivered += 1;
                self.record(
                    LogKind::Deliver,
                    host.as_str(),
                    json!({
                        "pkt_id": pkt.pkt_id.0,
                        "switch": switch.as_str(),
                        "latency_us": self.now.saturating_sub(pkt.injected_at),
                        "bytes": pkt.payload.len(),
                        "encrypted": pkt.envelope.is_encrypted(),
                    }),
                );
                self.deliveries.entry(host.clone()).or_default().push(Delivery { time: self.now, host, packet: pkt });
            }
            Some(PortPeer::Link { link, peer, peer_port }) => {
                if hops >= self.cfg.max_hops {
                    return self.drop_packet(switch, &pkt, DropReason::HopLimit, None);
                }
                let l = &self.topology.links[link];
                let dir = usize::from(&l.a != switch);
                if let Some(LinkFault::FlipPayloadBit) = self.faults.get(&link) {
                    if let Some(b) = pkt.payload.first_mut() {
                        *b ^= 1;
                    }
                }
                let label = dir_label(switch, &peer);
                for tap in self.taps.iter_mut().filter(|t| t.link == link) {
                    tap.records.push(TapRecord { time: self.now, direction: label.clone(), packet: pkt.clone() });
                }
                let start = self.now.max(self.link_busy[link][dir]);
                let done = start + l.serialization_us(pkt.wire_len());
                self.link_busy[link][dir] = done;
                let arrival = done + l.latency_us;
                self.record(
                    LogKind::Forward,
                    switch.as_str(),
                    json!({"pkt_id": pkt.pkt_id.0, "out_port": port.0, "to": peer.as_str(), "arrival": arrival.as_micros()}),
                );
                self.schedule(arrival, Event::PacketArrival { switch: peer, in_port: peer_port, pkt, hops: hops + 1 });
            }
        }
    }

    fn install(&mut self, switch: &SwitchId, mut rule: FlowRule) -> Result<(), SimError> {
        let now = self.now;
        if !self.switches.contains_key(switch) {
            return Err(SimError::UnknownSwitch(switch.clone()));
        }
        if let Err(e) = rule.validate() {
            self.record(LogKind::RuleReject, switch.as_str(), json!({"rule_id": rule.rule_id.0, "error": e.to_string()}));
            return Err(e.into());
        }
        if self.switches[switch].table.contains(rule.rule_id) {
            self.record(
                LogKind::RuleReject,
                switch.as_str(),
                json!({"rule_id": rule.rule_id.0, "error": "duplicate rule id"}),
            );
            return Err(SimError::DuplicateRuleId(rule.rule_id));
        }
        rule.installed_at = now;
        rule.last_hit = now;
        rule.packet_count = 0;
        rule.byte_count = 0;
        let deadline = rule_deadline(&rule);
        let rule_id = rule.rule_id;
        let punts = rule.actions.iter().any(|a| matches!(a, Action::SendToController(_)));
        let matcher = rule.matcher.clone();
        self.record(
            LogKind::RuleInstall,
            switch.as_str(),
            json!({
                "rule_id": rule_id.0,
                "priority": rule.priority,
                "match": serde_json::to_value(&rule.matcher).expect("serializable"),
                "actions": serde_json::to_value(&rule.actions).expect("serializable"),
            }),
        );
        self.notices.push(Notice {
            topic: Topic::Flows,
            body: json!({"event": "install", "switch": switch.as_str(), "rule": serde_json::to_value(&rule).expect("serializable")}),
        });
        self.switches.get_mut(switch).expect("checked").table.insert(rule);
        if let Some(t) = deadline {
            self.schedule(t, Event::RuleTimeout { switch: switch.clone(), rule_id });
        }
        if !punts {
            self.release_buffers(switch, &matcher);
        }
        Ok(())
    }

    /// Re-processes packets waiting on a decision that the new rule now covers.
    fn release_buffers(&mut self, switch: &SwitchId, matcher: &FlowMatch) {
        let sw = self.switches.get_mut(switch).expect("switch exists");
        let keys: Vec<BufferKey> = sw
            .buffers
            .iter()
            .filter(|(k, b)| matcher.matches(&b.packets[0].0, Some(k.in_port)))
            .map(|(k, _)| k.clone())
            .collect();
        for key in keys {
            let buf = self.switches.get_mut(switch).expect("switch exists").buffers.remove(&key).expect("present");
            for (pkt, hops) in buf.packets {
                self.record(LogKind::Released, switch.as_str(), json!({"pkt_id": pkt.pkt_id.0}));
                self.process_packet(switch, key.in_port, pkt, hops);
            }
        }
    }

    fn remove(&mut self, switch: &SwitchId, predicate: &FlowMatch, ids: &[RuleId], reason: RemoveReason) -> Vec<FlowRule> {
        let sw = self.switches.get_mut(switch).expect("switch exists");
        let gone = if ids.is_empty() {
            sw.table.remove_matching(predicate)
        } else {
            ids.iter().filter_map(|id| sw.table.remove(*id)).collect()
        };
        for r in &gone {
            self.record(
                LogKind::RuleRemove,
                switch.as_str(),
                json!({"rule_id": r.rule_id.0, "reason": reason, "packet_count": r.packet_count}),
            );
            self.notices.push(Notice {
                topic: Topic::Flows,
                body: json!({"event": "remove", "switch": switch.as_str(), "rule_id": r.rule_id.0}),
            });
        }
        gone
    }

    fn rule_timeout(&mut self, switch: &SwitchId, rule_id: RuleId) {
        let now = self.now;
        let Some(rule) = self.switches[switch].table.get(rule_id) else { return };
        let hard = (rule.hard_timeout > 0)
            .then(|| rule.installed_at + u64::from(rule.hard_timeout) * 1_000_000)
            .filter(|t| *t <= now);
        let idle = (rule.idle_timeout > 0)
            .then(|| rule.last_hit + u64::from(rule.idle_timeout) * 1_000_000)
            .filter(|t| *t <= now);
        let reason = match (hard, idle) {
            (Some(_), _) => RemoveReason::HardTimeout,
            (None, Some(_)) => RemoveReason::IdleTimeout,
            (None, None) => {
                if let Some(t) = rule_deadline(rule) {
                    self.schedule(t, Event::RuleTimeout { switch: switch.clone(), rule_id });
                }
                return;
            }
        };
        let gone = self.remove(switch, &FlowMatch::any(), &[rule_id], reason);
        if let Some(r) = gone.into_iter().next() {
            self.send_up(switch, ControlBody::FlowRemove { matcher: r.matcher, rule_ids: vec![rule_id], reason });
        }
    }

    fn send_up(&mut self, switch: &SwitchId, body: ControlBody) {
        self.send(switch, Direction::SwitchToController, body);
    }

    fn send(&mut self, switch: &SwitchId, direction: Direction, body: ControlBody) {
        let kind = body.kind();
        let Some(ch) = self.channels.get_mut(switch) else {
            self.record(LogKind::CtrlError, switch.as_str(), json!({"kind": kind.as_str(), "error": "unknown switch"}));
            return;
        };
        let at = match ch.send(direction, self.now) {
            Ok(at) => at,
            Err(e) => {
                self.record(LogKind::CtrlError, switch.as_str(), json!({"kind": kind.as_str(), "error": e.to_string()}));
                return;
            }
        };
        let msg = ControlMsg { msg_id: self.next_msg, direction, switch: switch.clone(), sent_at: self.now, body };
        self.next_msg += 1;
        self.record(
            LogKind::CtrlSend,
            switch.as_str(),
            json!({"msg_id": msg.msg_id, "kind": kind.as_str(), "direction": direction, "summary": msg.body.summary()}),
        );
        self.schedule(at, Event::ControlMsgDelivery { msg });
    }

    fn deliver_control(&mut self, msg: ControlMsg) {
        self.record(
            LogKind::CtrlDeliver,
            msg.switch.as_str(),
            json!({"msg_id": msg.msg_id, "kind": msg.kind().as_str(), "direction": msg.direction}),
        );
        match msg.direction {
            Direction::SwitchToController => {
                let mut ctx = ControllerCtx::new(self.now);
                self.controller.on_message(&mut ctx, &msg);
                self.flush_ctx(ctx);
            }
            Direction::ControllerToSwitch => self.switch_handle(msg),
        }
    }

    fn flush_ctx(&mut self, ctx: ControllerCtx) {
        let (out, notices, records) = ctx.into_parts();
        for (kind, subject, detail) in records {
            self.record(kind, subject, detail);
        }
        for n in &notices {
            if n.topic == Topic::Alerts {
                self.record(LogKind::Alert, "controller", n.body.clone());
            }
        }
        self.notices.extend(notices);
        for (switch, body) in out {
            self.send(&switch, Direction::ControllerToSwitch, body);
        }
    }

    fn switch_handle(&mut self, msg: ControlMsg) {
        let switch = msg.switch.clone();
        if !self.switches.contains_key(&switch) {
            return;
        }
        match msg.body {
            ControlBody::FlowMod { rule } => {
                let _ = self.install(&switch, rule);
            }
            ControlBody::FlowRemove { matcher, rule_ids, reason } => {
                self.remove(&switch, &matcher, &rule_ids, reason);
            }
            ControlBody::FuncConfig { config } => self.apply_func_config(&switch, config),
            ControlBody::KeyPush { record } => {
                let (key_id, role) = (record.key_id, record.role);
                let sw = self.switches.get_mut(&switch).expect("exists");
                match sw.secfn.fe_set_key(record) {
                    Ok(()) => self.record(LogKind::KeyInstall, switch.as_str(), json!({"key_id": key_id, "role": role})),
                    Err(e) => self.record(
                        LogKind::KeyInstall,
                        switch.as_str(),
                        json!({"key_id": key_id, "role": role, "error": e.to_string()}),
                    ),
                }
            }
            ControlBody::StatsRequest {} => {
                let sw = &self.switches[&switch];
                let body = ControlBody::StatsReply { rules: sw.table.rules().to_vec(), secfn: sw.secfn.stats() };
                self.send_up(&switch, body);
            }
            ControlBody::Barrier { xid } => self.send_up(&switch, ControlBody::Barrier { xid }),
            ControlBody::Hello { .. } => {}
            other => self.record(
                LogKind::CtrlError,
                switch.as_str(),
                json!({"kind": other.kind().as_str(), "error": "unexpected at switch"}),
            ),
        }
    }

    fn apply_func_config(&mut self, switch: &SwitchId, config: FuncConfig) {
        let now = self.now;
        let ruleset = match &config.ruleset_xml {
            None => Ok(DpiRuleset::default()),
            Some(text) => DpiRuleset::from_xml(text).map(|(_, r)| r),
        };
        let rules = ruleset.as_ref().map(|r| r.rules.len()).unwrap_or(0);
        let result = ruleset.map_err(Into::into).and_then(|r| {
            let sw = self.switches.get_mut(switch).expect("exists");
            sw.secfn.tv_configure(&r, config.limits.clone(), config.bindings.clone(), config.tags.clone(), now)
        });
        match result {
            Ok(()) => self.record(
                LogKind::FuncConfig,
                switch.as_str(),
                json!({"rules": rules, "limits": config.limits.len(), "bindings": config.bindings.len()}),
            ),
            Err(e) => self.record(LogKind::FuncConfig, switch.as_str(), json!({"error": e.to_string()})),
        }
    }
}

fn rule_deadline(rule: &FlowRule) -> Option<SimTime> {
    let hard = (rule.hard_timeout > 0).then(|| rule.installed_at + u64::from(rule.hard_timeout) * 1_000_000);
    let idle = (rule.idle_timeout > 0).then(|| rule.last_hit + u64::from(rule.idle_timeout) * 1_000_000);
    match (hard, idle) {
        (Some(h), Some(i)) => Some(h.min(i)),
        (h, i) => h.or(i),
    }
}
