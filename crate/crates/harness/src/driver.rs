//! Steps a simulation through generated traffic, streaming notices to an
//! optional gateway and standing in for the operator when asked to.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use cssasim_core::controller::{Notice, OperatorCommand, Topic};
use cssasim_core::net::{HostId, PacketId, SimTime};
use cssasim_core::secfn::AlertReason;
use cssasim_core::sim::{Command, SimError, Simulation};
use cssasim_gateway::Gateway;

use crate::traffic::{Label, Timed};

pub const DEFAULT_STEP_US: u64 = 10_000;

#[derive(Debug, Clone, Default)]
pub struct DriverOptions {
    /// Isolate the suspected source of each new alert.
    pub auto_operator: bool,
    pub gateway: Option<Gateway>,
    /// Hold traffic until the gateway receives a start request for this name.
    pub wait_for_start: Option<String>,
    /// Simulated seconds per wall-clock second; `None` runs flat out.
    pub pace: Option<f64>,
}

pub struct Driver {
    sim: Simulation,
    opts: DriverOptions,
    step_us: u64,
    labels: BTreeMap<PacketId, Label>,
    isolations: BTreeMap<HostId, SimTime>,
    wall_start: Instant,
    sim_start: SimTime,
}

impl Driver {
    pub fn new(mut sim: Simulation, opts: DriverOptions) -> Self {
        if let Some(gw) = &opts.gateway {
            sim.set_command_queue(gw.commands().clone());
        }
        let sim_start = sim.now();
        Driver {
            sim,
            opts,
            step_us: DEFAULT_STEP_US,
            labels: BTreeMap::new(),
            isolations: BTreeMap::new(),
            wall_start: Instant::now(),
            sim_start,
        }
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn into_sim(self) -> Simulation {
        self.sim
    }

    pub fn labels(&self) -> &BTreeMap<PacketId, Label> {
        &self.labels
    }

    /// Hosts the auto-operator isolated, with the time it issued the command.
    pub fn isolations(&self) -> &BTreeMap<HostId, SimTime> {
        &self.isolations
    }

    /// Blocks until a start request arrives when one is required.
    pub fn await_start(&mut self) {
        let Some(name) = self.opts.wait_for_start.clone() else { return };
        loop {
            let t = self.sim.now() + self.step_us;
            self.sim.run_until(t);
            self.poll();
            if self.sim.take_scenario_requests().iter().any(|n| *n == name) {
                break;
            }
            std::thread::sleep(Duration::from_micros(self.step_us));
        }
        self.wall_start = Instant::now();
        self.sim_start = self.sim.now();
    }

    /// Injects `traffic` (sorted by time) and runs until `end`.
    pub fn run(&mut self, traffic: Vec<Timed>, end: SimTime) -> Result<(), SimError> {
        let mut pending = traffic.into_iter().peekable();
        let mut now = self.sim.now();
        while now < end {
            let step_end = (now + self.step_us).min(end);
            while let Some(t) = pending.next_if(|t| t.at <= step_end) {
                self.sim.run_until(t.at.max(self.sim.now()));
                let id = self.sim.inject_packet(&t.host, t.packet)?;
                self.labels.insert(id, t.label);
            }
            self.sim.run_until(step_end);
            self.poll();
            self.pace_to(step_end);
            now = step_end;
        }
        Ok(())
    }

    /// Runs on until nothing is left in flight, or `grace_us` has passed.
    pub fn settle(&mut self, grace_us: u64) {
        let limit = self.sim.now() + grace_us;
        self.sim.run_to_quiescence(limit);
        self.poll();
    }

    fn pace_to(&self, t: SimTime) {
        let Some(rate) = self.opts.pace else { return };
        let sim_elapsed = t.saturating_sub(self.sim_start) as f64 / 1e6;
        let target = Duration::from_secs_f64(sim_elapsed / rate);
        if let Some(wait) = target.checked_sub(self.wall_start.elapsed()) {
            std::thread::sleep(wait);
        }
    }

    fn poll(&mut self) {
        let notices = match &self.opts.gateway {
            Some(gw) => gw.sync(&mut self.sim),
            None => self.sim.take_notices(),
        };
        if self.opts.auto_operator {
            for host in alert_sources(&notices) {
                if self.isolations.contains_key(&host) {
                    continue;
                }
                self.isolations.insert(host.clone(), self.sim.now());
                self.sim.apply_command(Command::Operator { command: OperatorCommand::Isolate { host } });
            }
        }
    }
}

/// Suspected sources of newly raised alerts. Rate alerts are left to the
/// limiter that raised them.
fn alert_sources(notices: &[Notice]) -> BTreeSet<HostId> {
    notices
        .iter()
        .filter(|n| n.topic == Topic::Alerts && n.body.get("event").and_then(|e| e.as_str()) == Some("new"))
        .filter(|n| n.body.pointer("/alert/reason").and_then(|r| r.as_str()) != Some(AlertReason::RateExceeded.as_str()))
        .filter_map(|n| n.body.pointer("/alert/host_id")?.as_str().map(HostId::new))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn only_new_non_rate_alerts_trigger() {
        let alert = |id: u64, reason: &str, host: Option<&str>| {
            json!({"alert_id": id, "switch": "SW1", "host_id": host, "reason": reason})
        };
        let notices = vec![
            Notice { topic: Topic::Alerts, body: json!({"event": "new", "alert": alert(1, "signature_match", Some("ATK1"))}) },
            Notice { topic: Topic::Alerts, body: json!({"event": "update", "alert": alert(1, "signature_match", Some("ATK2"))}) },
            Notice { topic: Topic::Alerts, body: json!({"event": "new", "alert": alert(2, "rate_exceeded", Some("ATK3"))}) },
            Notice { topic: Topic::Alerts, body: json!({"event": "new", "alert": alert(3, "spoofed_source", None)}) },
            Notice { topic: Topic::Flows, body: json!({"event": "new"}) },
        ];
        let got = alert_sources(&notices);
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![HostId::new("ATK1")]);
    }
}
