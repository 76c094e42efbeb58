//! Built-in scenario inputs, so the CLI works without a checkout of `scenarios/`.

use std::sync::Arc;

use cssasim_core::topology::{Capability, HostEntry, LinkEntry, SwitchEntry, Topology, TopologyConfig};
use cssasim_core::net::{HostId, MacAddr, PortId, SwitchId};

pub const PLANT_TOPOLOGY: &str = include_str!("../../../scenarios/topologies/plant.json");
pub const FLOOD_POLICIES: &str = include_str!("../../../scenarios/policies/flood.xml");
pub const SHELLSHOCK_POLICIES: &str = include_str!("../../../scenarios/policies/shellshock.xml");
pub const SHELLSHOCK_NOSIG_POLICIES: &str = include_str!("../../../scenarios/policies/shellshock_nosig.xml");
pub const LEGACY_ENCRYPT_POLICIES: &str = include_str!("../../../scenarios/policies/legacy_encrypt.xml");
pub const MODBUS_POLICIES: &str = include_str!("../../../scenarios/policies/modbus.xml");

fn ip(n: u32) -> std::net::Ipv4Addr {
    std::net::Ipv4Addr::from(n)
}

/// Switches `S1..Sn` in a line, `hosts_per_edge` hosts on each end switch
/// (`A0..` on S1, `B0..` on Sn). End switches have TV and FE; the middle does not.
pub fn line_topology(path_len: usize, hosts_per_edge: usize, latency_us: u64, bandwidth_mbps: u64) -> Arc<Topology> {
    assert!(path_len >= 2, "a path needs two switches");
    let sid = |i: usize| SwitchId::new(format!("S{}", i + 1));
    let switches = (0..path_len)
        .map(|i| {
            let caps = if i == 0 || i == path_len - 1 { vec![Capability::Tv, Capability::Fe] } else { vec![] };
            SwitchEntry::Detailed { id: sid(i), caps }
        })
        .collect();
    let mut hosts = Vec::new();
    for (side, sw, net) in [("A", sid(0), 0x0a01_0000u32), ("B", sid(path_len - 1), 0x0a02_0000)] {
        for k in 0..hosts_per_edge {
            let n = net + k as u32 + 1;
            hosts.push(HostEntry {
                id: HostId::new(format!("{side}{k}")),
                switch: sw.clone(),
                port: PortId(k as u16 + 1),
                mac: MacAddr::from_u64(0x0200_0000_0000 | u64::from(n)),
                ip: ip(n),
                role: "field".into(),
                domain: None,
                location: None,
            });
        }
    }
    let links = (0..path_len - 1)
        .map(|i| LinkEntry { a: sid(i), b: sid(i + 1), latency_us, bandwidth_mbps, a_port: None, b_port: None })
        .collect();
    Arc::new(Topology::from_config(TopologyConfig { switches, hosts, links }).expect("generated topology is valid"))
}

/// `switches` switches in a ring with chords to the switch five hops ahead,
/// `hosts_per_switch` hosts on each. Host `H{s}_{k}` sits on `S{s}`.
pub fn campus_topology(switches: usize, hosts_per_switch: usize) -> Arc<Topology> {
    assert!(switches >= 3, "a ring needs three switches");
    let sid = |i: usize| SwitchId::new(format!("S{i}"));
    let sw = (0..switches).map(|i| SwitchEntry::Id(sid(i))).collect();
    let mut hosts = Vec::new();
    for s in 0..switches {
        for k in 0..hosts_per_switch {
            let n = 0x0a00_0000u32 | ((s as u32 + 1) << 8) | (k as u32 + 1);
            hosts.push(HostEntry {
                id: HostId::new(format!("H{s}_{k}")),
                switch: sid(s),
                port: PortId(k as u16 + 1),
                mac: MacAddr::from_u64(0x0200_0000_0000 | u64::from(n)),
                ip: ip(n),
                role: "host".into(),
                domain: None,
                location: None,
            });
        }
    }
    let mut links = Vec::new();
    for i in 0..switches {
        links.push(LinkEntry { a: sid(i), b: sid((i + 1) % switches), latency_us: 100, bandwidth_mbps: 1000, a_port: None, b_port: None });
        if switches > 10 && i % 2 == 0 {
            links.push(LinkEntry { a: sid(i), b: sid((i + 5) % switches), latency_us: 150, bandwidth_mbps: 1000, a_port: None, b_port: None });
        }
    }
    Arc::new(Topology::from_config(TopologyConfig { switches: sw, hosts, links }).expect("generated topology is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_inputs_parse() {
        Topology::from_json(PLANT_TOPOLOGY).unwrap();
        for xml in [FLOOD_POLICIES, SHELLSHOCK_POLICIES, SHELLSHOCK_NOSIG_POLICIES, LEGACY_ENCRYPT_POLICIES, MODBUS_POLICIES] {
            cssasim_core::cssa::load_policies(xml).unwrap();
        }
    }

    #[test]
    fn generated_topologies() {
        let t = line_topology(4, 200, 100, 100);
        assert_eq!(t.hosts.len(), 400);
        assert_eq!(t.links.len(), 3);
        let c = campus_topology(20, 10);
        assert_eq!(c.hosts.len(), 200);
        assert_eq!(c.switches.len(), 20);
        assert_eq!(c.links.len(), 30);
    }
}
