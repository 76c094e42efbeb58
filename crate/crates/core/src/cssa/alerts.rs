//! Alert records, deduplication, and operator state transitions.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::net::{HostId, SimTime, SwitchId};
use crate::secfn::AlertReason;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum AlertState {
    Open,
    Acknowledged,
    ActionTaken { action: String },
}

impl AlertState {
    fn rank(&self) -> u8 {
        match self {
            AlertState::Open => 0,
            AlertState::Acknowledged => 1,
            AlertState::ActionTaken { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlertState::Open => "open",
            AlertState::Acknowledged => "acknowledged",
            AlertState::ActionTaken { .. } => "action_taken",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: u64,
    pub time: SimTime,
    pub last_seen: SimTime,
    pub switch: SwitchId,
    /// Suspected source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_id: Option<HostId>,
    pub reason: AlertReason,
    pub evidence: Value,
    /// Occurrences coalesced into this alert.
    pub count: u64,
    pub state: AlertState,
    pub history: Vec<(SimTime, AlertState)>,
}

/// A new occurrence before deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertInput {
    pub switch: SwitchId,
    pub host_id: Option<HostId>,
    pub reason: AlertReason,
    pub evidence: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Raised {
    New(u64),
    Coalesced(u64),
}

impl Raised {
    pub fn alert_id(self) -> u64 {
        match self {
            Raised::New(id) | Raised::Coalesced(id) => id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlertBook {
    alerts: Vec<Alert>,
    next_id: u64,
    dedup_us: u64,
}

impl AlertBook {
    pub fn new(dedup_us: u64) -> Self {
        AlertBook { alerts: Vec::new(), next_id: 1, dedup_us }
    }

    pub fn all(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn get(&self, alert_id: u64) -> Option<&Alert> {
        self.alerts.iter().find(|a| a.alert_id == alert_id)
    }

    /// Coalesces into an unresolved alert for the same host and reason raised
    /// less than the dedup window ago; otherwise opens a new alert.
    pub fn raise(&mut self, input: AlertInput, now: SimTime) -> Raised {
        let window = self.dedup_us;
        if let Some(a) = self.alerts.iter_mut().rev().find(|a| {
            a.host_id == input.host_id
                && a.reason == input.reason
                && !matches!(a.state, AlertState::ActionTaken { .. })
                && now.saturating_sub(a.time) < window
        }) {
            a.count += 1;
            a.last_seen = now;
            return Raised::Coalesced(a.alert_id);
        }
        let alert_id = self.next_id;
        self.next_id += 1;
        self.alerts.push(Alert {
            alert_id,
            time: now,
            last_seen: now,
            switch: input.switch,
            host_id: input.host_id,
            reason: input.reason,
            evidence: input.evidence,
            count: 1,
            state: AlertState::Open,
            history: vec![(now, AlertState::Open)],
        });
        Raised::New(alert_id)
    }

    /// Moves an alert forward. Backward or repeated transitions are ignored and
    /// return false.
    pub fn advance(&mut self, alert_id: u64, to: AlertState, now: SimTime) -> Option<bool> {
        let a = self.alerts.iter_mut().find(|a| a.alert_id == alert_id)?;
        if to.rank() <= a.state.rank() {
            return Some(false);
        }
        if to.rank() == 2 && a.state.rank() == 0 {
            // acting without an explicit acknowledgement still passes through it
            a.history.push((now, AlertState::Acknowledged));
        }
        a.state = to.clone();
        a.history.push((now, to));
        Some(true)
    }

    /// Marks every unresolved alert about `host` as acted upon; returns their ids.
    pub fn take_action_on_host(&mut self, host: &HostId, action: &str, now: SimTime) -> Vec<u64> {
        let ids: Vec<u64> = self
            .alerts
            .iter()
            .filter(|a| a.host_id.as_ref() == Some(host) && !matches!(a.state, AlertState::ActionTaken { .. }))
            .map(|a| a.alert_id)
            .collect();
        for id in &ids {
            self.advance(*id, AlertState::ActionTaken { action: action.to_string() }, now);
        }
        ids
    }
}
