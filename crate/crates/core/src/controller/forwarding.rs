use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::channel::{ControlBody, ControlMsg};
use crate::flow::{FlowMatch, RuleId};
use crate::net::SwitchId;
use crate::topology::Topology;

use super::{
    compile_path, AppState, CommandError, ControllerApp, ControllerCtx, NetworkView, OperatorCommand, PathSecurity,
    RuleIdAlloc, SwitchGraph,
};

pub const FORWARDING_PRIORITY: u32 = 100;

/// Plain shortest-path forwarding with no policy or security functions.
#[derive(Debug)]
pub struct ForwardingApp {
    view: NetworkView,
    graph: SwitchGraph,
    ids: RuleIdAlloc,
    installed: BTreeMap<(SwitchId, FlowMatch), RuleId>,
    next_xid: u64,
}

impl ForwardingApp {
    pub fn new(topology: Arc<Topology>) -> Self {
        ForwardingApp {
            graph: SwitchGraph::new(&topology),
            view: NetworkView::new(topology),
            ids: RuleIdAlloc::default(),
            installed: BTreeMap::new(),
            next_xid: 1,
        }
    }

    pub fn installed_rules(&self) -> usize {
        self.installed.len()
    }
}

impl ControllerApp for ForwardingApp {
    fn name(&self) -> &'static str {
        "forwarding"
    }

    fn on_message(&mut self, ctx: &mut ControllerCtx, msg: &ControlMsg) {
        match &msg.body {
            ControlBody::Features { caps, ports } => {
                self.view.register_switch(&msg.switch, caps.iter().copied().collect(), ports.clone());
            }
            ControlBody::PacketIn { in_port, packet, .. } => {
                let _ = self.view.learn_host(&msg.switch, *in_port, packet.src_mac, packet.src_ip);
                let Some(dst) = self.view.host_by_ip(packet.dst_ip) else { return };
                let Ok(path) = self.graph.route(&msg.switch, *in_port, &dst.switch, dst.port, None) else { return };
                let base = FlowMatch::service_of(packet);
                let Ok(rules) = compile_path(
                    &path,
                    &base,
                    PathSecurity::default(),
                    FORWARDING_PRIORITY,
                    &self.view,
                    &mut self.ids,
                ) else {
                    return;
                };
                let mut touched = BTreeSet::new();
                let mut order = Vec::new();
                for (sw, rule) in rules {
                    let key = (sw.clone(), rule.matcher.clone());
                    if self.installed.contains_key(&key) {
                        continue;
                    }
                    self.installed.insert(key, rule.rule_id);
                    if touched.insert(sw.clone()) {
                        order.push(sw.clone());
                    }
                    ctx.send(sw, ControlBody::FlowMod { rule });
                }
                for sw in order {
                    let xid = self.next_xid;
                    self.next_xid += 1;
                    ctx.send(sw, ControlBody::Barrier { xid });
                }
            }
            ControlBody::FlowRemove { rule_ids, .. } => {
                let gone: BTreeSet<RuleId> = rule_ids.iter().copied().collect();
                self.installed.retain(|(sw, _), id| !(sw == &msg.switch && gone.contains(id)));
            }
            _ => {}
        }
    }

    fn on_command(&mut self, _ctx: &mut ControllerCtx, _cmd: &OperatorCommand) -> Result<(), CommandError> {
        Err(CommandError::Unsupported("operator commands"))
    }

    fn state(&self) -> AppState {
        AppState { view: Some(self.view.snapshot()), ..AppState::default() }
    }
}
