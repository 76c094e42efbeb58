//! Path-to-flow-rule compilation.

use serde::{Deserialize, Serialize};

use crate::flow::{Action, FlowMatch, FlowRule, RuleId, SecFunc};
use crate::net::SwitchId;
use crate::topology::Capability;

use super::path::PathSpec;
use super::view::NetworkView;

/// Security functions to weave into a compiled path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSecurity {
    pub tv_at_ingress: bool,
    /// Also validate at the last hop, e.g. to meter traffic converging on a server.
    pub tv_at_egress: bool,
    /// Key id for edge-to-edge encryption.
    pub fe: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("switch {switch} lacks {func:?}")]
    MissingCapability { switch: SwitchId, func: SecFunc },
}

/// Monotonic rule id source.
#[derive(Debug, Clone)]
pub struct RuleIdAlloc {
    next: u64,
}

impl Default for RuleIdAlloc {
    fn default() -> Self {
        RuleIdAlloc { next: 1 }
    }
}

impl RuleIdAlloc {
    pub fn starting_at(next: u64) -> Self {
        RuleIdAlloc { next }
    }

    pub fn next_id(&mut self) -> RuleId {
        let id = RuleId(self.next);
        self.next += 1;
        id
    }
}

fn require(view: &NetworkView, switch: &SwitchId, cap: Capability, func: SecFunc) -> Result<(), CompileError> {
    if view.has_cap(switch, cap) {
        Ok(())
    } else {
        Err(CompileError::MissingCapability { switch: switch.clone(), func })
    }
}

/// One rule per hop, each matching `base` plus the hop's in_port. The result is
/// in reverse path order, the order in which the rules should be installed.
pub fn compile_path(
    path: &PathSpec,
    base: &FlowMatch,
    sec: PathSecurity,
    priority: u32,
    view: &NetworkView,
    ids: &mut RuleIdAlloc,
) -> Result<Vec<(SwitchId, FlowRule)>, CompileError> {
    let last = path.hops.len() - 1;
    let mut rules = Vec::with_capacity(path.hops.len());
    for (i, hop) in path.hops.iter().enumerate() {
        let mut actions = Vec::new();
        if i == 0 && sec.tv_at_ingress {
            require(view, &hop.switch, Capability::Tv, SecFunc::Tv)?;
            actions.push(Action::ApplyFunc(SecFunc::Tv));
        }
        if let Some(_key) = sec.fe {
            if i == 0 {
                require(view, &hop.switch, Capability::Fe, SecFunc::FeEncrypt)?;
                actions.push(Action::ApplyFunc(SecFunc::FeEncrypt));
            }
            if i == last {
                require(view, &hop.switch, Capability::Fe, SecFunc::FeDecrypt)?;
                actions.push(Action::ApplyFunc(SecFunc::FeDecrypt));
            }
        }
        if i == last && sec.tv_at_egress && !(i == 0 && sec.tv_at_ingress) {
            require(view, &hop.switch, Capability::Tv, SecFunc::Tv)?;
            actions.push(Action::ApplyFunc(SecFunc::Tv));
        }
        actions.push(Action::Forward(hop.out_port));
        let matcher = base.clone().with_in_port(hop.in_port);
        rules.push((hop.switch.clone(), FlowRule::new(RuleId(0), matcher, priority, actions)));
    }
    rules.reverse();
    for (_, r) in &mut rules {
        r.rule_id = ids.next_id();
    }
    Ok(rules)
}
