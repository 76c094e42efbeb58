//! Global network view: switch registry, host table, and static topology.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::net::{HostId, MacAddr, PortId, SwitchId};
use crate::topology::{Capability, Link, PortPeer, Topology};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostInfo {
    pub id: HostId,
    pub switch: SwitchId,
    pub port: PortId,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    pub role: String,
    pub domain: String,
    pub location: String,
    /// True when learned from traffic rather than configured.
    pub learned: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchInfo {
    pub id: SwitchId,
    pub caps: BTreeSet<Capability>,
    pub ports: Vec<PortId>,
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("port {switch}:{port} is bound to {existing} but reported {mac}/{ip}")]
pub struct BindingConflict {
    pub switch: SwitchId,
    pub port: PortId,
    pub existing: HostId,
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
}

/// Immutable JSON mirror of the view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSnapshot {
    pub version: u64,
    pub switches: Vec<SwitchInfo>,
    pub hosts: Vec<HostInfo>,
    pub links: Vec<Link>,
}

#[derive(Debug, Clone)]
pub struct NetworkView {
    topology: Arc<Topology>,
    ports: BTreeMap<(SwitchId, PortId), PortPeer>,
    switches: BTreeMap<SwitchId, SwitchInfo>,
    hosts: BTreeMap<HostId, HostInfo>,
    by_port: BTreeMap<(SwitchId, PortId), HostId>,
    by_ip: BTreeMap<Ipv4Addr, HostId>,
    version: u64,
}

impl NetworkView {
    /// Starts from the configured topology; switches count as connected only
    /// after they register.
    pub fn new(topology: Arc<Topology>) -> Self {
        let mut view = NetworkView {
            ports: topology.port_map(),
            switches: BTreeMap::new(),
            hosts: BTreeMap::new(),
            by_port: BTreeMap::new(),
            by_ip: BTreeMap::new(),
            version: 0,
            topology: topology.clone(),
        };
        for (id, caps) in &topology.switches {
            view.switches.insert(
                id.clone(),
                SwitchInfo { id: id.clone(), caps: caps.clone(), ports: topology.ports_of(id), connected: false },
            );
        }
        for h in topology.hosts.values() {
            view.insert_host(HostInfo {
                id: h.id.clone(),
                switch: h.switch.clone(),
                port: h.port,
                mac: h.mac,
                ip: h.ip,
                role: h.role.clone(),
                domain: h.domain.clone(),
                location: h.location.clone(),
                learned: false,
            });
        }
        view
    }

    fn insert_host(&mut self, h: HostInfo) {
        self.by_port.insert((h.switch.clone(), h.port), h.id.clone());
        self.by_ip.insert(h.ip, h.id.clone());
        self.hosts.insert(h.id.clone(), h);
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Idempotent; returns true when something changed.
    pub fn register_switch(&mut self, id: &SwitchId, caps: BTreeSet<Capability>, ports: Vec<PortId>) -> bool {
        let info = SwitchInfo { id: id.clone(), caps, ports, connected: true };
        if self.switches.get(id) == Some(&info) {
            return false;
        }
        self.switches.insert(id.clone(), info);
        self.version += 1;
        true
    }

    pub fn switch(&self, id: &SwitchId) -> Option<&SwitchInfo> {
        self.switches.get(id)
    }

    pub fn switches(&self) -> impl Iterator<Item = &SwitchInfo> {
        self.switches.values()
    }

    pub fn has_cap(&self, id: &SwitchId, cap: Capability) -> bool {
        self.switches.get(id).is_some_and(|s| s.caps.contains(&cap))
    }

    pub fn is_host_port(&self, switch: &SwitchId, port: PortId) -> bool {
        !matches!(self.ports.get(&(switch.clone(), port)), Some(PortPeer::Link { .. }))
    }

    /// Learns (mac, ip) at an access port. Identical re-learning changes nothing;
    /// a different host on an already bound port is a conflict. Returns the id of
    /// a newly learned host.
    pub fn learn_host(
        &mut self,
        switch: &SwitchId,
        port: PortId,
        mac: MacAddr,
        ip: Ipv4Addr,
    ) -> Result<Option<HostId>, BindingConflict> {
        if !self.is_host_port(switch, port) {
            return Ok(None);
        }
        if let Some(existing) = self.by_port.get(&(switch.clone(), port)) {
            let h = &self.hosts[existing];
            if h.mac == mac && h.ip == ip {
                return Ok(None);
            }
            return Err(BindingConflict { switch: switch.clone(), port, existing: existing.clone(), mac, ip });
        }
        let id = HostId::new(format!("learned-{switch}-{port}"));
        self.insert_host(HostInfo {
            id: id.clone(),
            switch: switch.clone(),
            port,
            mac,
            ip,
            role: String::new(),
            domain: "unknown".into(),
            location: switch.0.clone(),
            learned: true,
        });
        self.version += 1;
        Ok(Some(id))
    }

    pub fn host(&self, id: &HostId) -> Option<&HostInfo> {
        self.hosts.get(id)
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<&HostInfo> {
        self.by_ip.get(&ip).and_then(|id| self.hosts.get(id))
    }

    pub fn host_at(&self, switch: &SwitchId, port: PortId) -> Option<&HostInfo> {
        self.by_port.get(&(switch.clone(), port)).and_then(|id| self.hosts.get(id))
    }

    pub fn hosts(&self) -> impl Iterator<Item = &HostInfo> {
        self.hosts.values()
    }

    pub fn hosts_on(&self, switch: &SwitchId) -> impl Iterator<Item = &HostInfo> + '_ {
        let switch = switch.clone();
        self.hosts.values().filter(move |h| h.switch == switch)
    }

    pub fn snapshot(&self) -> ViewSnapshot {
        ViewSnapshot {
            version: self.version,
            switches: self.switches.values().cloned().collect(),
            hosts: self.hosts.values().cloned().collect(),
            links: self.topology.links.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> Arc<Topology> {
        Arc::new(
            Topology::from_json(
                r#"{"switches":["SW1","SW2"],
                    "hosts":[{"id":"plc","switch":"SW1","port":1,"mac":"02:00:00:00:00:01","ip":"172.56.16.20","role":"plc"}],
                    "links":[{"a":"SW1","b":"SW2","latency_us":10,"bandwidth_mbps":0}]}"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn static_hosts_and_relearning() {
        let mut v = NetworkView::new(topo());
        let plc = v.host(&"plc".into()).unwrap().clone();
        assert_eq!(v.host_by_ip(plc.ip).unwrap().id, plc.id);
        let before = v.version();
        assert_eq!(v.learn_host(&plc.switch, plc.port, plc.mac, plc.ip), Ok(None));
        assert_eq!(v.version(), before);
    }

    #[test]
    fn learning_new_host_bumps_version() {
        let mut v = NetworkView::new(topo());
        let mac: MacAddr = "02:00:00:00:00:07".parse().unwrap();
        let id = v.learn_host(&"SW2".into(), PortId(5), mac, Ipv4Addr::new(10, 0, 0, 7)).unwrap().unwrap();
        assert_eq!(v.version(), 1);
        assert!(v.host(&id).unwrap().learned);
        assert_eq!(v.learn_host(&"SW2".into(), PortId(5), mac, Ipv4Addr::new(10, 0, 0, 7)), Ok(None));
        assert_eq!(v.version(), 1);
    }

    #[test]
    fn second_host_on_port_conflicts() {
        let mut v = NetworkView::new(topo());
        let err = v
            .learn_host(&"SW1".into(), PortId(1), MacAddr::from_u64(0xbad), Ipv4Addr::new(172, 56, 16, 20))
            .unwrap_err();
        assert_eq!(err.existing, HostId::from("plc"));
    }

    #[test]
    fn link_ports_are_not_learned() {
        let mut v = NetworkView::new(topo());
        let link_port = v.topology().links[0].a_port;
        assert_eq!(v.learn_host(&"SW1".into(), link_port, MacAddr::from_u64(3), Ipv4Addr::new(1, 1, 1, 1)), Ok(None));
        assert_eq!(v.version(), 0);
    }

    #[test]
    fn register_is_idempotent() {
        let mut v = NetworkView::new(topo());
        let caps: BTreeSet<_> = [Capability::Tv].into_iter().collect();
        assert!(v.register_switch(&"SW1".into(), caps.clone(), vec![PortId(1)]));
        assert!(!v.register_switch(&"SW1".into(), caps, vec![PortId(1)]));
        assert_eq!(v.version(), 1);
        assert!(v.has_cap(&"SW1".into(), Capability::Tv));
        assert!(!v.has_cap(&"SW1".into(), Capability::Fe));
    }
}
