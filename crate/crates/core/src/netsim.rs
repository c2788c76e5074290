//! Discrete-event network simulator: topology, shortest-path routing and
//! store-and-forward packet transit with per-link FIFO queueing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{EventId, EventQueue, KernelError, SimTime};

/// Bytes of link-layer framing added to every payload put on the wire.
pub const FRAMING_OVERHEAD_BYTES: u64 = 60;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("malformed topology: {0}")]
    MalformedTopology(String),
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("simulator {0} is not bound to a network node")]
    UnboundSimulator(String),
    #[error("duplicate packet id {0}")]
    DuplicatePacket(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Client,
    BaseStation,
    Router,
    Gateway,
    Switch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub kind: NodeKind,
}

/// Point-to-point link. `data_rate_bps` of `None` means an ideal link with
/// zero serialization delay.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub prop_delay_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_rate_bps: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkConfig>,
    /// Maps simulator ids to the network node that hosts them.
    pub client_binding: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataRate {
    Ideal,
    Bps(u64),
}

impl From<Option<u64>> for DataRate {
    fn from(v: Option<u64>) -> Self {
        match v {
            Some(bps) => DataRate::Bps(bps),
            None => DataRate::Ideal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub connected: bool,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub propagation_delay: SimTime,
    pub data_rate: DataRate,
}

/// Validated topology with adjacency lists sorted for deterministic routing.
pub struct NetworkTopology {
    pub nodes: BTreeMap<String, Node>,
    links: BTreeMap<(String, String), Link>,
    adjacency: BTreeMap<String, Vec<String>>,
    pub client_binding: BTreeMap<String, String>,
}

impl NetworkTopology {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn link_between(&self, a: &str, b: &str) -> Option<&Link> {
        let key = ordered_key(a, b);
        self.links.get(&key)
    }

    pub fn neighbors(&self, node: &str) -> &[String] {
        self.adjacency.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn node_for_sim(&self, sim_id: &str) -> Option<&str> {
        self.client_binding.get(sim_id).map(String::as_str)
    }
}

fn ordered_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Builds and validates a topology from its configuration.
pub fn build_network(config: &NetworkConfig) -> Result<NetworkTopology, NetsimError> {
    let mut nodes = BTreeMap::new();
    for n in &config.nodes {
        let prev = nodes.insert(
            n.id.clone(),
            Node {
                id: n.id.clone(),
                kind: n.kind,
                connected: true,
            },
        );
        if prev.is_some() {
            return Err(NetsimError::MalformedTopology(format!(
                "duplicate node id {}",
                n.id
            )));
        }
    }
    let mut links = BTreeMap::new();
    let mut adjacency: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for l in &config.links {
        if l.a == l.b {
            return Err(NetsimError::MalformedTopology(format!(
                "self-link on node {}",
                l.a
            )));
        }
        for end in [&l.a, &l.b] {
            if !nodes.contains_key(end) {
                return Err(NetsimError::MalformedTopology(format!(
                    "link references unknown node {end}"
                )));
            }
        }
        let key = ordered_key(&l.a, &l.b);
        if links.contains_key(&key) {
            return Err(NetsimError::MalformedTopology(format!(
                "duplicate link between {} and {}",
                l.a, l.b
            )));
        }
        links.insert(
            key,
            Link {
                a: l.a.clone(),
                b: l.b.clone(),
                propagation_delay: SimTime::from_micros(l.prop_delay_us),
                data_rate: DataRate::from(l.data_rate_bps),
            },
        );
        adjacency.entry(l.a.clone()).or_default().push(l.b.clone());
        adjacency.entry(l.b.clone()).or_default().push(l.a.clone());
    }
    for nbrs in adjacency.values_mut() {
        nbrs.sort();
    }
    for (sim, node) in &config.client_binding {
        if !nodes.contains_key(node) {
            return Err(NetsimError::MalformedTopology(format!(
                "simulator {sim} bound to unknown node {node}"
            )));
        }
    }
    Ok(NetworkTopology {
        nodes,
        links,
        adjacency,
        client_binding: config.client_binding.clone(),
    })
}

/// Hop-count shortest path over currently connected nodes.
///
/// Ties are broken towards the lexicographically smallest node-id sequence.
/// Returns `None` when `dst` is unreachable; that is a value, not an error.
pub fn route(topo: &NetworkTopology, src: &str, dst: &str) -> Option<Vec<String>> {
    let connected = |id: &str| topo.nodes.get(id).map(|n| n.connected).unwrap_or(false);
    if !connected(src) || !connected(dst) {
        return None;
    }
    if src == dst {
        return Some(vec![src.to_string()]);
    }
    // Breadth-first distances towards dst, then a greedy walk from src that
    // always takes the smallest next node id still on a shortest path.
    let mut dist: BTreeMap<&str, u32> = BTreeMap::new();
    dist.insert(dst, 0);
    let mut frontier = vec![dst];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for node in frontier {
            let d = dist[node];
            for nbr in topo.neighbors(node) {
                if connected(nbr) && !dist.contains_key(nbr.as_str()) {
                    dist.insert(nbr, d + 1);
                    next.push(nbr.as_str());
                }
            }
        }
        frontier = next;
    }
    let mut cur = src;
    let mut path = vec![src.to_string()];
    let mut remaining = *dist.get(src)?;
    while cur != dst {
        let step = topo
            .neighbors(cur)
            .iter()
            .find(|n| connected(n) && dist.get(n.as_str()) == Some(&(remaining - 1)))?;
        path.push(step.clone());
        cur = step;
        remaining -= 1;
    }
    Some(path)
}

/// Propagation plus serialization delay for `size_bytes` over `link`.
///
/// Serialization rounds up to whole microseconds, never below 1 us on a
/// rate-limited link.
pub fn transmission_delay(link: &Link, size_bytes: u64) -> SimTime {
    link.propagation_delay + serialization_delay(link.data_rate, size_bytes)
}

fn serialization_delay(rate: DataRate, size_bytes: u64) -> SimTime {
    match rate {
        DataRate::Ideal => SimTime::ZERO,
        DataRate::Bps(bps) => {
            let bits = size_bytes as u128 * 8;
            let us = (bits * 1_000_000).div_ceil(bps as u128);
            SimTime::from_micros((us as u64).max(1))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeAction {
    Disconnect,
    Reconnect,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfrastructureChange {
    pub action: ChangeAction,
    pub node: String,
    pub at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketStatus {
    InFlight,
    Delivered(SimTime),
    Lost(SimTime),
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub msg_id: String,
    pub src_sim: String,
    pub dst_sim: String,
    pub src_node: String,
    pub dst_node: String,
    /// On-wire size including framing overhead.
    pub size_bytes: u64,
    pub sent_at: SimTime,
    pub status: PacketStatus,
    path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub msg_id: String,
    pub src_sim: String,
    pub dst_sim: String,
    pub delivered_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossRecord {
    pub msg_id: String,
    pub dst_sim: String,
    pub at: SimTime,
}

/// One pause point of the network engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetYield {
    Delivered(DeliveryRecord),
    Lost(LossRecord),
    /// Reached the requested bound. `idle` means the event set is empty.
    Parked { at: SimTime, idle: bool },
}

enum NetEvent {
    Send { msg_id: String },
    HopArrival { msg_id: String, hop: usize },
    ApplyChange { action: ChangeAction, node: String },
    SyncPoint,
}

/// Event-driven network engine. `run_until` advances the clock and pauses
/// after every delivery or loss report so the caller can synchronize.
pub struct NetworkEngine {
    pub topology: NetworkTopology,
    clock: SimTime,
    queue: EventQueue<NetEvent>,
    packets: BTreeMap<String, Packet>,
    link_busy: BTreeMap<(String, String), SimTime>,
    sync_event: Option<(EventId, SimTime)>,
}

impl NetworkEngine {
    pub fn new(topology: NetworkTopology) -> Self {
        NetworkEngine {
            topology,
            clock: SimTime::ZERO,
            queue: EventQueue::new(),
            packets: BTreeMap::new(),
            link_busy: BTreeMap::new(),
            sync_event: None,
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn packet(&self, msg_id: &str) -> Option<&Packet> {
        self.packets.get(msg_id)
    }

    /// Accepts a payload for transit and schedules its send event at `at`.
    /// Routing happens when the send event fires.
    pub fn send_packet(
        &mut self,
        msg_id: &str,
        src_sim: &str,
        dst_sim: &str,
        payload_bytes: u64,
        at: SimTime,
    ) -> Result<(), NetsimError> {
        if self.packets.contains_key(msg_id) {
            return Err(NetsimError::DuplicatePacket(msg_id.to_string()));
        }
        let src_node = self
            .topology
            .node_for_sim(src_sim)
            .ok_or_else(|| NetsimError::UnboundSimulator(src_sim.to_string()))?
            .to_string();
        let dst_node = self
            .topology
            .node_for_sim(dst_sim)
            .ok_or_else(|| NetsimError::UnboundSimulator(dst_sim.to_string()))?
            .to_string();
        self.packets.insert(
            msg_id.to_string(),
            Packet {
                msg_id: msg_id.to_string(),
                src_sim: src_sim.to_string(),
                dst_sim: dst_sim.to_string(),
                src_node,
                dst_node,
                size_bytes: payload_bytes + FRAMING_OVERHEAD_BYTES,
                sent_at: at,
                status: PacketStatus::InFlight,
                path: Vec::new(),
            },
        );
        self.queue.schedule(
            self.clock,
            at,
            msg_id,
            NetEvent::Send {
                msg_id: msg_id.to_string(),
            },
        )?;
        Ok(())
    }

    /// Schedules a connect/disconnect to take effect at `change.at`.
    pub fn apply_infrastructure_change(
        &mut self,
        change: &InfrastructureChange,
    ) -> Result<(), NetsimError> {
        if !self.topology.nodes.contains_key(&change.node) {
            return Err(NetsimError::UnknownNode(change.node.clone()));
        }
        self.queue.schedule(
            self.clock,
            change.at,
            &change.node,
            NetEvent::ApplyChange {
                action: change.action,
                node: change.node.clone(),
            },
        )?;
        Ok(())
    }

    /// Runs until the next delivery or loss report, or parks exactly at
    /// `bound` once no event at or before it remains.
    ///
    /// A fresh bound supersedes the previous one; the old sync point is
    /// cancelled and a new one scheduled.
    pub fn run_until(&mut self, bound: SimTime) -> Result<NetYield, NetsimError> {
        match self.sync_event {
            Some((_, at)) if at == bound => {}
            _ => {
                if let Some((id, _)) = self.sync_event.take() {
                    self.queue.cancel(id);
                }
                let id = self.queue.schedule(self.clock, bound, "sync", NetEvent::SyncPoint)?;
                self.sync_event = Some((id, bound));
            }
        }
        loop {
            let Some(event) = self.queue.pop_next() else {
                // Defensive: the sync point alone guarantees a park.
                self.clock = self.clock.max(bound);
                return Ok(NetYield::Parked {
                    at: self.clock,
                    idle: true,
                });
            };
            self.clock = event.time;
            match event.payload {
                NetEvent::SyncPoint => {
                    self.sync_event = None;
                    return Ok(NetYield::Parked {
                        at: event.time,
                        idle: self.queue.is_empty(),
                    });
                }
                NetEvent::ApplyChange { action, node } => {
                    let n = self.topology.nodes.get_mut(&node).expect("validated node");
                    n.connected = matches!(action, ChangeAction::Reconnect);
                }
                NetEvent::Send { msg_id } => {
                    if let Some(y) = self.start_send(&msg_id)? {
                        return Ok(y);
                    }
                }
                NetEvent::HopArrival { msg_id, hop } => {
                    if let Some(y) = self.forward_hop(&msg_id, hop)? {
                        return Ok(y);
                    }
                }
            }
        }
    }

    fn start_send(&mut self, msg_id: &str) -> Result<Option<NetYield>, NetsimError> {
        let (src_node, dst_node) = {
            let p = &self.packets[msg_id];
            (p.src_node.clone(), p.dst_node.clone())
        };
        match route(&self.topology, &src_node, &dst_node) {
            None => Ok(Some(self.mark_lost(msg_id))),
            Some(path) => {
                self.packets.get_mut(msg_id).expect("packet").path = path;
                self.forward_hop(msg_id, 0)
            }
        }
    }

    fn forward_hop(&mut self, msg_id: &str, hop: usize) -> Result<Option<NetYield>, NetsimError> {
        let (remaining_disconnected, at_destination) = {
            let p = &self.packets[msg_id];
            let remaining = &p.path[hop..];
            let dead = remaining
                .iter()
                .any(|n| !self.topology.nodes[n.as_str()].connected);
            (dead, hop + 1 == p.path.len())
        };
        if remaining_disconnected {
            return Ok(Some(self.mark_lost(msg_id)));
        }
        if at_destination {
            let p = self.packets.get_mut(msg_id).expect("packet");
            p.status = PacketStatus::Delivered(self.clock);
            return Ok(Some(NetYield::Delivered(DeliveryRecord {
                msg_id: p.msg_id.clone(),
                src_sim: p.src_sim.clone(),
                dst_sim: p.dst_sim.clone(),
                delivered_at: self.clock,
            })));
        }
        // Store-and-forward: serialize onto the outgoing link, waiting for
        // packets already occupying it, then propagate.
        let (from, to, size) = {
            let p = &self.packets[msg_id];
            (p.path[hop].clone(), p.path[hop + 1].clone(), p.size_bytes)
        };
        let link = self
            .topology
            .link_between(&from, &to)
            .expect("path follows existing links");
        let serialization = serialization_delay(link.data_rate, size);
        let propagation = link.propagation_delay;
        let busy_until = self
            .link_busy
            .get(&(from.clone(), to.clone()))
            .copied()
            .unwrap_or(SimTime::ZERO);
        let start = self.clock.max(busy_until);
        let done = start + serialization;
        self.link_busy.insert((from, to), done);
        let arrival = done + propagation;
        self.queue.schedule(
            self.clock,
            arrival,
            msg_id,
            NetEvent::HopArrival {
                msg_id: msg_id.to_string(),
                hop: hop + 1,
            },
        )?;
        Ok(None)
    }

    fn mark_lost(&mut self, msg_id: &str) -> NetYield {
        let p = self.packets.get_mut(msg_id).expect("packet");
        p.status = PacketStatus::Lost(self.clock);
        NetYield::Lost(LossRecord {
            msg_id: p.msg_id.clone(),
            dst_sim: p.dst_sim.clone(),
            at: self.clock,
        })
    }
}
