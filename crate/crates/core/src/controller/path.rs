//! Minimum-latency path computation with optional latency bound.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::net::{HostId, PortId, SwitchId};
use crate::topology::Topology;

use super::view::NetworkView;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub switch: SwitchId,
    pub in_port: PortId,
    pub out_port: PortId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub hops: Vec<Hop>,
    pub total_latency_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<u64>,
}

impl PathSpec {
    pub fn switches(&self) -> Vec<SwitchId> {
        self.hops.iter().map(|h| h.switch.clone()).collect()
    }

    pub fn first(&self) -> &Hop {
        &self.hops[0]
    }

    pub fn last(&self) -> &Hop {
        self.hops.last().expect("paths have at least one hop")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("no path from {from} to {to}")]
    NoPath { from: SwitchId, to: SwitchId },
    #[error("latency constraint unsatisfiable; minimum achievable is {min_achievable} us")]
    ConstraintUnsatisfiable { min_achievable: u64 },
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    latency: u64,
    out_port: PortId,
    peer_in_port: PortId,
}

/// Undirected switch graph; parallel links collapse to the lowest-latency one
/// (lowest link index on ties).
#[derive(Debug, Clone)]
pub struct SwitchGraph {
    adj: BTreeMap<SwitchId, BTreeMap<SwitchId, Edge>>,
}

impl SwitchGraph {
    pub fn new(topo: &Topology) -> Self {
        let mut adj: BTreeMap<SwitchId, BTreeMap<SwitchId, Edge>> =
            topo.switches.keys().map(|s| (s.clone(), BTreeMap::new())).collect();
        for l in &topo.links {
            for (from, to, out_port, peer_in_port) in [(&l.a, &l.b, l.a_port, l.b_port), (&l.b, &l.a, l.b_port, l.a_port)] {
                let e = Edge { latency: l.latency_us, out_port, peer_in_port };
                let slot = adj.get_mut(from).expect("validated topology");
                match slot.get(to) {
                    Some(old) if old.latency <= e.latency => {}
                    _ => {
                        slot.insert(to.clone(), e);
                    }
                }
            }
        }
        SwitchGraph { adj }
    }

    fn dist_to(&self, dst: &SwitchId) -> BTreeMap<SwitchId, u64> {
        let mut dist = BTreeMap::new();
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0u64, dst.clone())));
        while let Some(Reverse((d, u))) = heap.pop() {
            if dist.contains_key(&u) {
                continue;
            }
            dist.insert(u.clone(), d);
            for (v, e) in &self.adj[&u] {
                if !dist.contains_key(v) {
                    heap.push(Reverse((d + e.latency, v.clone())));
                }
            }
        }
        dist
    }

    /// Minimum-latency switch sequence; among equal-latency paths the
    /// lexicographically smallest sequence of switch ids.
    pub fn shortest(&self, from: &SwitchId, to: &SwitchId) -> Result<(Vec<SwitchId>, u64), PathError> {
        for s in [from, to] {
            if !self.adj.contains_key(s) {
                return Err(PathError::UnknownSwitch(s.clone()));
            }
        }
        let dist = self.dist_to(to);
        let Some(&total) = dist.get(from) else {
            return Err(PathError::NoPath { from: from.clone(), to: to.clone() });
        };
        // walk tight edges in id order; backtracking handles zero-latency cycles
        let mut path = vec![from.clone()];
        let mut on_path: BTreeSet<SwitchId> = [from.clone()].into_iter().collect();
        if self.tight_dfs(to, &dist, &mut path, &mut on_path) {
            Ok((path, total))
        } else {
            Err(PathError::NoPath { from: from.clone(), to: to.clone() })
        }
    }

    fn tight_dfs(
        &self,
        to: &SwitchId,
        dist: &BTreeMap<SwitchId, u64>,
        path: &mut Vec<SwitchId>,
        on_path: &mut BTreeSet<SwitchId>,
    ) -> bool {
        let u = path.last().expect("nonempty").clone();
        if &u == to {
            return true;
        }
        let du = dist[&u];
        for (v, e) in &self.adj[&u] {
            if on_path.contains(v) || dist.get(v).map(|dv| dv + e.latency) != Some(du) {
                continue;
            }
            path.push(v.clone());
            on_path.insert(v.clone());
            if self.tight_dfs(to, dist, path, on_path) {
                return true;
            }
            on_path.remove(v);
            path.pop();
        }
        false
    }

    fn edge(&self, a: &SwitchId, b: &SwitchId) -> Edge {
        self.adj[a][b]
    }

    /// Path from a packet entering `from` on `in_port` to leaving `to` on `out_port`.
    pub fn route(
        &self,
        from: &SwitchId,
        in_port: PortId,
        to: &SwitchId,
        out_port: PortId,
        constraint: Option<u64>,
    ) -> Result<PathSpec, PathError> {
        let (seq, total) = self.shortest(from, to)?;
        if let Some(max) = constraint {
            if total > max {
                return Err(PathError::ConstraintUnsatisfiable { min_achievable: total });
            }
        }
        let mut hops = Vec::with_capacity(seq.len());
        let mut cur_in = in_port;
        for i in 0..seq.len() {
            if i + 1 < seq.len() {
                let e = self.edge(&seq[i], &seq[i + 1]);
                hops.push(Hop { switch: seq[i].clone(), in_port: cur_in, out_port: e.out_port });
                cur_in = e.peer_in_port;
            } else {
                hops.push(Hop { switch: seq[i].clone(), in_port: cur_in, out_port });
            }
        }
        Ok(PathSpec { hops, total_latency_us: total, constraint })
    }
}

pub fn compute_path(
    view: &NetworkView,
    graph: &SwitchGraph,
    src: &HostId,
    dst: &HostId,
    constraint: Option<u64>,
) -> Result<PathSpec, PathError> {
    let s = view.host(src).ok_or_else(|| PathError::UnknownHost(src.clone()))?;
    let d = view.host(dst).ok_or_else(|| PathError::UnknownHost(dst.clone()))?;
    graph.route(&s.switch, s.port, &d.switch, d.port, constraint)
}
