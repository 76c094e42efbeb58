#![allow(dead_code)]

use std::sync::Arc;

use cssasim_core::net::{HostId, Packet, Proto, SwitchId};
use cssasim_core::topology::Topology;

pub const PLANT: &str = include_str!("../../../../scenarios/topologies/plant.json");

pub fn plant() -> Arc<Topology> {
    Arc::new(Topology::from_json(PLANT).expect("plant topology"))
}

pub fn h(id: &str) -> HostId {
    HostId::new(id)
}

pub fn sw(id: &str) -> SwitchId {
    SwitchId::new(id)
}

/// A TCP packet between two hosts of `topo`, addressed with their real bindings.
pub fn tcp(topo: &Topology, from: &str, to: &str, sport: u16, dport: u16, payload: &[u8]) -> Packet {
    let a = topo.host(&h(from)).expect("src host");
    let b = topo.host(&h(to)).expect("dst host");
    Packet::new(a.mac, b.mac, a.ip, b.ip, Proto::Tcp, sport, dport, payload.to_vec())
}
