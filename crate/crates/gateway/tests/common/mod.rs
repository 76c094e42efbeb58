#![allow(dead_code)]

use std::sync::Arc;

use cssasim_core::cssa::{load_policies, CssaApp, CssaConfig};
use cssasim_core::net::{HostId, Packet, Proto, SimTime};
use cssasim_core::sim::{SimConfig, Simulation};
use cssasim_core::topology::Topology;
use cssasim_gateway::Gateway;

pub const PLANT: &str = include_str!("../../../../scenarios/topologies/plant.json");

pub fn live() -> (Simulation, Gateway) {
    let topo = Arc::new(Topology::from_json(PLANT).unwrap());
    let set = load_policies(
        r#"<policies><policy id="1" priority="10"><dst host="WEB"/><traffic proto="tcp" dport="80"/><permit/></policy></policies>"#,
    )
    .unwrap();
    let app = CssaApp::new(topo.clone(), set, CssaConfig::default());
    let mut sim = Simulation::new(topo, 3, Box::new(app), SimConfig::default());
    sim.run_until(SimTime::from_millis(5));
    let gw = Gateway::new(sim.commands(), vec!["shellshock".into(), "flood".into()]);
    gw.sync(&mut sim);
    (sim, gw)
}

pub fn spoofed(sim: &Simulation, from: &str) -> Packet {
    let topo = sim.topology();
    let a = topo.host(&HostId::new(from)).unwrap();
    let web = topo.host(&HostId::new("WEB")).unwrap();
    Packet::new(a.mac, web.mac, "10.66.0.1".parse().unwrap(), web.ip, Proto::Tcp, 1, 80, b"x".to_vec())
}
