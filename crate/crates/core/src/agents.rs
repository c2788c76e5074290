//! Negotiating agents: small-world overlay generation, knowledge encoding and
//! the perceive/decide/act state machine driven by waiting-period wakeups.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;
use crate::orchestrator::{
    AgentMessage, AgentStateReport, AttrValue, InputItem, Simulator, SimulatorKind, StepOutput,
    StepResult,
};

pub const OUTBOX_ATTR: &str = "outbox";
pub const INBOX_ATTR: &str = "inbox";
pub const DEVICE_POWER_ATTR: &str = "device_power";
pub const POWER_ATTR: &str = "power";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid overlay parameters: {0}")]
    InvalidParams(String),
    #[error("malformed knowledge payload: {0}")]
    MalformedPayload(String),
}

pub fn agent_id(index: usize) -> String {
    format!("client{index}")
}

/// Logical neighbor graph layered over the physical network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverlayTopology {
    pub adjacency: BTreeMap<String, Vec<String>>,
}

impl OverlayTopology {
    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, id: &str) -> &[String] {
        self.adjacency.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_connected(&self) -> bool {
        let Some(start) = self.adjacency.keys().next() else {
            return true;
        };
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut queue: VecDeque<&str> = VecDeque::new();
        seen.insert(start);
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            for nbr in self.neighbors(node) {
                if seen.insert(nbr) {
                    queue.push_back(nbr);
                }
            }
        }
        seen.len() == self.adjacency.len()
    }
}

/// Watts-Strogatz small-world graph over agents `client0..clientN-1`.
///
/// Starts from a ring lattice where every node connects to its k nearest
/// neighbors, then visits lattice edges (u, u+i) in ascending (u, i) order and
/// rewires each with probability p to a uniformly drawn non-duplicate target.
pub fn generate_overlay(
    n: usize,
    k: usize,
    p: f64,
    seed: u64,
) -> Result<OverlayTopology, AgentError> {
    if k >= n {
        return Err(AgentError::InvalidParams(format!("k={k} must be < n={n}")));
    }
    if k < 2 || k % 2 != 0 {
        return Err(AgentError::InvalidParams(format!(
            "k={k} must be even and >= 2"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(AgentError::InvalidParams(format!(
            "p={p} must lie in [0, 1]"
        )));
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let add = |adj: &mut Vec<BTreeSet<usize>>, u: usize, v: usize| {
        adj[u].insert(v);
        adj[v].insert(u);
    };
    for u in 0..n {
        for i in 1..=k / 2 {
            add(&mut adj, u, (u + i) % n);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for u in 0..n {
        for i in 1..=k / 2 {
            if !rng.gen_bool(p) {
                continue;
            }
            if adj[u].len() >= n - 1 {
                continue;
            }
            let v = (u + i) % n;
            let w = loop {
                let cand = rng.gen_range(0..n);
                if cand != u && !adj[u].contains(&cand) {
                    break cand;
                }
            };
            adj[u].remove(&v);
            adj[v].remove(&u);
            add(&mut adj, u, w);
        }
    }
    let adjacency = adj
        .into_iter()
        .enumerate()
        .map(|(u, nbrs)| {
            let mut ids: Vec<String> = nbrs.into_iter().map(agent_id).collect();
            ids.sort();
            (agent_id(u), ids)
        })
        .collect();
    Ok(OverlayTopology { adjacency })
}

/// What an agent knows: contributions learned so far plus whether it has been
/// drawn into the negotiation at all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentKnowledge {
    pub started: bool,
    pub contributions: BTreeMap<String, u64>,
}

/// Encodes knowledge as canonical JSON (sorted keys) for the wire.
pub fn encode_knowledge(k: &AgentKnowledge) -> Vec<u8> {
    serde_json::to_vec(k).expect("knowledge serializes")
}

pub fn decode_knowledge(bytes: &[u8]) -> Result<AgentKnowledge, AgentError> {
    serde_json::from_slice(bytes).map_err(|e| AgentError::MalformedPayload(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub id: String,
    pub neighbors: Vec<String>,
    pub waiting_period: SimTime,
    pub threshold: u64,
    pub initiator: bool,
}

struct BufferedMessage {
    arrived: SimTime,
    payload: Vec<u8>,
}

/// One negotiating agent. Messages arriving between wakeups are buffered and
/// only processed at the next waiting-period boundary.
pub struct AgentSimulator {
    cfg: AgentConfig,
    knowledge: AgentKnowledge,
    power_values: BTreeMap<String, u64>,
    inbox: Vec<BufferedMessage>,
    next_wakeup: Option<SimTime>,
    last_acted: Option<BTreeMap<String, u64>>,
    solution_found: bool,
    halted: bool,
}

impl AgentSimulator {
    pub fn new(cfg: AgentConfig) -> Self {
        let first_wakeup = cfg.waiting_period;
        let started = cfg.initiator;
        AgentSimulator {
            cfg,
            knowledge: AgentKnowledge {
                started,
                contributions: BTreeMap::new(),
            },
            power_values: BTreeMap::new(),
            inbox: Vec::new(),
            next_wakeup: Some(first_wakeup),
            last_acted: None,
            solution_found: false,
            halted: false,
        }
    }

    pub fn knowledge(&self) -> &AgentKnowledge {
        &self.knowledge
    }

    pub fn aggregate(&self) -> u64 {
        self.knowledge.contributions.values().sum()
    }

    fn device_power(&self) -> u64 {
        self.power_values.values().sum()
    }

    /// Perceive: fold buffered neighbor knowledge (messages that arrived
    /// strictly before this wakeup) and the device power into the own map.
    fn perceive(&mut self, now: SimTime) -> Result<(), AgentError> {
        let consumed: Vec<BufferedMessage> = {
            let (ready, later): (Vec<_>, Vec<_>) =
                self.inbox.drain(..).partition(|m| m.arrived < now);
            self.inbox = later;
            ready
        };
        if !consumed.is_empty() {
            self.knowledge.started = true;
        }
        if !self.knowledge.started {
            return Ok(());
        }
        for msg in consumed {
            let incoming = decode_knowledge(&msg.payload)?;
            for (id, watts) in incoming.contributions {
                // Union merge; a received value wins over a stored one.
                self.knowledge.contributions.insert(id, watts);
            }
        }
        let device = self.device_power();
        self.knowledge
            .contributions
            .entry(self.cfg.id.clone())
            .or_insert(device);
        Ok(())
    }

    /// Decide: aggregate everything known and compare against the threshold.
    fn decide(&mut self) -> u64 {
        let aggregate = self.aggregate();
        if aggregate >= self.cfg.threshold {
            self.solution_found = true;
        }
        aggregate
    }

    /// Act: after a solution nothing is sent; otherwise changed knowledge goes
    /// out to every overlay neighbor in full.
    fn act(&mut self) -> Vec<AgentMessage> {
        if self.solution_found {
            return Vec::new();
        }
        let changed = self.last_acted.as_ref() != Some(&self.knowledge.contributions);
        if !changed {
            return Vec::new();
        }
        let payload = encode_knowledge(&self.knowledge);
        let messages = self
            .cfg
            .neighbors
            .iter()
            .map(|nbr| AgentMessage {
                dst_sim: nbr.clone(),
                payload: payload.clone(),
            })
            .collect();
        self.last_acted = Some(self.knowledge.contributions.clone());
        messages
    }
}

impl Simulator for AgentSimulator {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::Agent
    }

    fn entities(&self) -> Vec<String> {
        vec![self.cfg.id.clone()]
    }

    fn initial_next_step(&self) -> Option<SimTime> {
        self.next_wakeup
    }

    fn step(&mut self, now: SimTime, inputs: Vec<InputItem>) -> Result<StepResult, String> {
        for input in inputs {
            match input.value {
                AttrValue::Watts(w) => {
                    self.power_values.insert(input.source, w);
                }
                AttrValue::Inbox(msgs) => {
                    for m in msgs {
                        self.inbox.push(BufferedMessage {
                            arrived: m.arrived,
                            payload: m.payload,
                        });
                    }
                }
                AttrValue::Messages(_) => {
                    return Err(format!("{}: unexpected outbox input", self.cfg.id));
                }
            }
        }
        let mut outputs = Vec::new();
        if !self.halted && self.next_wakeup == Some(now) {
            self.perceive(now).map_err(|e| e.to_string())?;
            if self.knowledge.started {
                self.decide();
                let messages = self.act();
                if !messages.is_empty() {
                    outputs.push(StepOutput {
                        entity: self.cfg.id.clone(),
                        attribute: OUTBOX_ATTR.to_string(),
                        value: AttrValue::Messages(messages),
                    });
                }
            }
            self.next_wakeup = if self.solution_found {
                None
            } else {
                Some(now + self.cfg.waiting_period)
            };
        }
        Ok(StepResult {
            outputs,
            next_step: if self.halted { None } else { self.next_wakeup },
            solution_found: self.solution_found,
        })
    }

    fn halt(&mut self) {
        self.halted = true;
    }

    fn state_report(&self) -> Option<AgentStateReport> {
        Some(AgentStateReport {
            started: self.knowledge.started,
            contributions: self.knowledge.contributions.clone(),
            aggregate: self.aggregate(),
            solution_found: self.solution_found,
        })
    }
}

/// Constant power feed-in: pv and household values per agent, emitted once at
/// t = 0 towards each agent's device_power input.
pub struct PowerSimulator {
    sources: Vec<(String, u64)>,
    next_step: Option<SimTime>,
}

impl PowerSimulator {
    /// `fixture` maps each agent id to its total feed-in; the total is split
    /// into a household part (up to 74 W) and a pv remainder.
    pub fn from_fixture(fixture: &BTreeMap<String, u64>) -> Self {
        let mut sources = Vec::new();
        for idx in 0..fixture.len() {
            let total = *fixture
                .get(&agent_id(idx))
                .expect("fixture covers every agent index");
            let household = total.min(74);
            let pv = total - household;
            sources.push((format!("pv{idx}"), pv));
            sources.push((format!("household{idx}"), household));
        }
        PowerSimulator {
            sources,
            next_step: Some(SimTime::ZERO),
        }
    }
}

impl Simulator for PowerSimulator {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::PowerSource
    }

    fn entities(&self) -> Vec<String> {
        self.sources.iter().map(|(e, _)| e.clone()).collect()
    }

    fn initial_next_step(&self) -> Option<SimTime> {
        self.next_step
    }

    fn step(&mut self, _now: SimTime, _inputs: Vec<InputItem>) -> Result<StepResult, String> {
        let outputs = self
            .sources
            .iter()
            .map(|(entity, watts)| StepOutput {
                entity: entity.clone(),
                attribute: POWER_ATTR.to_string(),
                value: AttrValue::Watts(*watts),
            })
            .collect();
        self.next_step = None;
        Ok(StepResult {
            outputs,
            next_step: None,
            solution_found: false,
        })
    }

    fn halt(&mut self) {}

    fn state_report(&self) -> Option<AgentStateReport> {
        None
    }
}
