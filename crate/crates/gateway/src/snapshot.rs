//! Immutable copies of simulation state for request handlers.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use cssasim_core::controller::AppState;
use cssasim_core::flow::FlowRule;
use cssasim_core::net::{SimTime, SwitchId};
use cssasim_core::sim::Simulation;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: SimTime,
    pub controller: String,
    pub flows: BTreeMap<SwitchId, Vec<FlowRule>>,
    pub state: AppState,
}

impl Snapshot {
    pub fn capture(sim: &Simulation) -> Self {
        Snapshot {
            time: sim.now(),
            controller: sim.controller_name().to_string(),
            flows: sim.switches().map(|s| (s.id.clone(), s.table.rules().to_vec())).collect(),
            state: sim.controller_state(),
        }
    }
}

/// Latest published snapshot; readers get a cheap `Arc` clone.
#[derive(Debug, Clone, Default)]
pub struct SnapshotCell(Arc<RwLock<Arc<Snapshot>>>);

impl SnapshotCell {
    pub fn new(s: Snapshot) -> Self {
        SnapshotCell(Arc::new(RwLock::new(Arc::new(s))))
    }

    pub fn publish(&self, s: Snapshot) {
        *self.0.write().expect("snapshot lock") = Arc::new(s);
    }

    pub fn load(&self) -> Arc<Snapshot> {
        self.0.read().expect("snapshot lock").clone()
    }
}
