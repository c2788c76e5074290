//! Discrete-time co-simulation orchestrator: simulator registry, attribute
//! routing, the conservative coupling loop towards the network engine and the
//! global termination decision.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::bridge::{BridgeError, BridgeSession, BridgeYield, InfoMessage, InfrastructureMessage, TracedMessage};
use crate::kernel::SimTime;
use crate::netsim::InfrastructureChange;

pub const BRIDGE_SIM_ID: &str = "netsim";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("simulator {0} is already registered")]
    DuplicateSimulator(String),
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("clock would move backwards: {from} -> {to}")]
    ClockRegression { from: SimTime, to: SimTime },
    #[error("deadlock detected: {0}")]
    DeadlockDetected(String),
    #[error("simulator failure: {0}")]
    SimulatorFailure(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    Agent,
    PowerSource,
    CommBridge,
}

/// An application-level message addressed to another simulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentMessage {
    pub dst_sim: String,
    pub payload: Vec<u8>,
}

/// A message that completed transit and is ready for the destination inbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredMessage {
    pub msg_id: String,
    pub src_sim: String,
    pub payload: Vec<u8>,
    pub arrived: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttrValue {
    Watts(u64),
    Messages(Vec<AgentMessage>),
    Inbox(Vec<DeliveredMessage>),
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub entity: String,
    pub attribute: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone)]
pub struct InputItem {
    pub source: String,
    pub entity: String,
    pub attribute: String,
    pub value: AttrValue,
}

#[derive(Debug)]
pub struct StepResult {
    pub outputs: Vec<StepOutput>,
    pub next_step: Option<SimTime>,
    pub solution_found: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AgentStateReport {
    pub started: bool,
    pub contributions: BTreeMap<String, u64>,
    pub aggregate: u64,
    pub solution_found: bool,
}

/// A simulator participating in the co-simulation. Steps are only taken at the
/// times the simulator itself requested (next_step) or when inputs are due.
pub trait Simulator {
    fn kind(&self) -> SimulatorKind;
    fn entities(&self) -> Vec<String>;
    fn initial_next_step(&self) -> Option<SimTime>;
    fn step(&mut self, now: SimTime, inputs: Vec<InputItem>) -> Result<StepResult, String>;
    fn halt(&mut self);
    fn state_report(&self) -> Option<AgentStateReport>;
}

/// Directed dataflow edge between two simulator entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connection {
    pub src_sim: String,
    pub src_entity: String,
    pub src_attr: String,
    pub dst_sim: String,
    pub dst_entity: String,
    pub dst_attr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Step,
    Send,
    Deliver,
    Lose,
    Sync,
    Infra,
    Solve,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Step => "step",
            TraceKind::Send => "send",
            TraceKind::Deliver => "deliver",
            TraceKind::Lose => "lose",
            TraceKind::Sync => "sync",
            TraceKind::Infra => "infra",
            TraceKind::Solve => "solve",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub time: SimTime,
    pub kind: TraceKind,
    pub actor: String,
    pub msg_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub msg_id: String,
    pub sender: String,
    pub receiver: String,
    pub sent_at: SimTime,
    pub delivered_at: Option<SimTime>,
    pub lost_at: Option<SimTime>,
}

impl MessageRecord {
    pub fn delay(&self) -> Option<SimTime> {
        self.delivered_at.map(|d| d.saturating_sub(self.sent_at))
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub final_clock: SimTime,
    pub termination_time: Option<SimTime>,
    pub trace: Vec<TraceEvent>,
    pub protocol_trace: Vec<TracedMessage>,
    pub messages: Vec<MessageRecord>,
    pub agent_states: BTreeMap<String, AgentStateReport>,
}

struct SimSlot {
    sim: Box<dyn Simulator>,
    kind: SimulatorKind,
    entities: Vec<String>,
    local_time: SimTime,
    next_step: Option<SimTime>,
}

struct BridgeBinding {
    session: BridgeSession,
    netsim_time: SimTime,
    netsim_idle: bool,
}

pub struct Orchestrator {
    clock: SimTime,
    sims: BTreeMap<String, SimSlot>,
    connections: Vec<Connection>,
    pending: BTreeMap<SimTime, Vec<(String, InputItem)>>,
    bridge: Option<BridgeBinding>,
    trace: Vec<TraceEvent>,
    messages: Vec<MessageRecord>,
    msg_index: BTreeMap<String, usize>,
    msg_counter: u64,
    termination_time: Option<SimTime>,
    solved: BTreeSet<String>,
}

impl Default for Orchestrator {
    fn default() -> Self {
        Self::new()
    }
}

impl Orchestrator {
    pub fn new() -> Self {
        Orchestrator {
            clock: SimTime::ZERO,
            sims: BTreeMap::new(),
            connections: Vec::new(),
            pending: BTreeMap::new(),
            bridge: None,
            trace: Vec::new(),
            messages: Vec::new(),
            msg_index: BTreeMap::new(),
            msg_counter: 0,
            termination_time: None,
            solved: BTreeSet::new(),
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn termination_time(&self) -> Option<SimTime> {
        self.termination_time
    }

    pub fn register_simulator(
        &mut self,
        sim_id: &str,
        sim: Box<dyn Simulator>,
    ) -> Result<(), OrchestratorError> {
        if self.sims.contains_key(sim_id) {
            return Err(OrchestratorError::DuplicateSimulator(sim_id.to_string()));
        }
        let slot = SimSlot {
            kind: sim.kind(),
            entities: sim.entities(),
            local_time: SimTime::ZERO,
            next_step: sim.initial_next_step(),
            sim,
        };
        self.sims.insert(sim_id.to_string(), slot);
        Ok(())
    }

    pub fn connect(&mut self, conn: Connection) -> Result<(), OrchestratorError> {
        let src = self
            .sims
            .get(&conn.src_sim)
            .ok_or_else(|| OrchestratorError::UnknownEndpoint(conn.src_sim.clone()))?;
        if !src.entities.contains(&conn.src_entity) {
            return Err(OrchestratorError::UnknownEndpoint(format!(
                "{}.{}",
                conn.src_sim, conn.src_entity
            )));
        }
        let dst = self
            .sims
            .get(&conn.dst_sim)
            .ok_or_else(|| OrchestratorError::UnknownEndpoint(conn.dst_sim.clone()))?;
        if !dst.entities.contains(&conn.dst_entity) {
            return Err(OrchestratorError::UnknownEndpoint(format!(
                "{}.{}",
                conn.dst_sim, conn.dst_entity
            )));
        }
        self.connections.push(conn);
        Ok(())
    }

    /// Binds an opened bridge session to the registered comm_bridge simulator.
    pub fn attach_bridge(&mut self, session: BridgeSession) -> Result<(), OrchestratorError> {
        let slot = self
            .sims
            .get(BRIDGE_SIM_ID)
            .ok_or_else(|| OrchestratorError::UnknownEndpoint(BRIDGE_SIM_ID.to_string()))?;
        if slot.kind != SimulatorKind::CommBridge {
            return Err(OrchestratorError::UnknownEndpoint(format!(
                "{BRIDGE_SIM_ID} is not a comm_bridge"
            )));
        }
        if self.bridge.is_some() {
            return Err(OrchestratorError::DuplicateSimulator(
                BRIDGE_SIM_ID.to_string(),
            ));
        }
        self.bridge = Some(BridgeBinding {
            session,
            netsim_time: SimTime::ZERO,
            netsim_idle: true,
        });
        Ok(())
    }

    /// Announces a scheduled topology change to the network engine.
    pub fn forward_infrastructure(
        &mut self,
        change: InfrastructureChange,
    ) -> Result<(), OrchestratorError> {
        let binding = self
            .bridge
            .as_mut()
            .ok_or_else(|| OrchestratorError::UnknownEndpoint("no bridge attached".into()))?;
        self.trace.push(TraceEvent {
            time: self.clock,
            kind: TraceKind::Infra,
            actor: change.node.clone(),
            msg_id: String::new(),
            detail: format!("{:?}@{}", change.action, change.at.as_micros()).to_lowercase(),
        });
        binding.session.forward_infrastructure(InfrastructureMessage {
            action: change.action,
            node: change.node,
            at: change.at,
        })?;
        Ok(())
    }

    fn advance_clock_to(&mut self, t: SimTime) -> Result<(), OrchestratorError> {
        if t < self.clock {
            return Err(OrchestratorError::ClockRegression {
                from: self.clock,
                to: t,
            });
        }
        self.clock = t;
        Ok(())
    }

    fn next_event_time(&self) -> Option<SimTime> {
        let from_pending = self.pending.keys().next().copied();
        let from_sims = self.sims.values().filter_map(|s| s.next_step).min();
        match (from_pending, from_sims) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Lookahead promise for the network engine: no new message can originate
    /// before the earliest foreign scheduled event.
    fn compute_max_advance(&self, end: SimTime) -> SimTime {
        let mut bound = end;
        for slot in self.sims.values() {
            if let Some(t) = slot.next_step {
                bound = bound.min(t);
            }
        }
        if let Some(t) = self.pending.keys().next() {
            bound = bound.min(*t);
        }
        bound
    }

    fn next_msg_id(&mut self) -> String {
        self.msg_counter += 1;
        format!("m{}", self.msg_counter)
    }

    fn push_pending(&mut self, due: SimTime, dst_sim: String, item: InputItem) {
        self.pending.entry(due).or_default().push((dst_sim, item));
    }

    fn trace_sync(&mut self, at: SimTime, actor: &str, detail: String) {
        self.trace.push(TraceEvent {
            time: at,
            kind: TraceKind::Sync,
            actor: actor.to_string(),
            msg_id: String::new(),
            detail,
        });
    }

    /// Receives exactly one yield from the network engine and folds it into
    /// orchestrator state.
    fn pump_one(&mut self, end: SimTime) -> Result<(), OrchestratorError> {
        let binding = self.bridge.as_mut().expect("bridge present");
        let yielded = binding.session.netsim_advance()?;
        match yielded {
            BridgeYield::MaxAdvance(at) => {
                binding.netsim_time = at;
                binding.netsim_idle = false;
                self.clock = self.clock.max(at.min(end));
                self.trace_sync(at, "netsim", "max_advance".into());
            }
            BridgeYield::Waiting(at) => {
                binding.netsim_time = binding.netsim_time.max(at);
                binding.netsim_idle = true;
                self.clock = self.clock.max(at.min(end));
                self.trace_sync(at, "netsim", "waiting".into());
            }
            BridgeYield::Delivery {
                msg_id,
                delivered_at,
                payload,
            } => {
                binding.netsim_time = delivered_at;
                binding.netsim_idle = false;
                if delivered_at < self.clock {
                    return Err(OrchestratorError::ClockRegression {
                        from: self.clock,
                        to: delivered_at,
                    });
                }
                self.clock = self.clock.max(delivered_at.min(end));
                let idx = *self
                    .msg_index
                    .get(&msg_id)
                    .ok_or_else(|| BridgeError::UnknownMsgId(msg_id.clone()))?;
                self.messages[idx].delivered_at = Some(delivered_at);
                let sender = self.messages[idx].sender.clone();
                let receiver = self.messages[idx].receiver.clone();
                self.trace.push(TraceEvent {
                    time: delivered_at,
                    kind: TraceKind::Deliver,
                    actor: receiver.clone(),
                    msg_id: msg_id.clone(),
                    detail: sender.clone(),
                });
                let item = InputItem {
                    source: sender.clone(),
                    entity: receiver.clone(),
                    attribute: "inbox".into(),
                    value: AttrValue::Inbox(vec![DeliveredMessage {
                        msg_id,
                        src_sim: sender,
                        payload,
                        arrived: delivered_at,
                    }]),
                };
                self.push_pending(delivered_at, receiver, item);
            }
            BridgeYield::TransmissionError { msg_id, at } => {
                binding.netsim_time = binding.netsim_time.max(at);
                binding.netsim_idle = false;
                self.clock = self.clock.max(at.min(end));
                let idx = *self
                    .msg_index
                    .get(&msg_id)
                    .ok_or_else(|| BridgeError::UnknownMsgId(msg_id.clone()))?;
                self.messages[idx].lost_at = Some(at);
                let receiver = self.messages[idx].receiver.clone();
                self.trace.push(TraceEvent {
                    time: at,
                    kind: TraceKind::Lose,
                    actor: receiver,
                    msg_id,
                    detail: "transmission_error".into(),
                });
            }
        }
        Ok(())
    }

    fn dispatch_messages(
        &mut self,
        sender: &str,
        t: SimTime,
        msgs: Vec<AgentMessage>,
        end: SimTime,
        round_done: bool,
    ) -> Result<(), OrchestratorError> {
        let last = msgs.len().saturating_sub(1);
        for (i, msg) in msgs.into_iter().enumerate() {
            if !self.sims.contains_key(&msg.dst_sim) {
                return Err(OrchestratorError::UnknownEndpoint(msg.dst_sim));
            }
            let msg_id = self.next_msg_id();
            self.msg_index.insert(msg_id.clone(), self.messages.len());
            self.messages.push(MessageRecord {
                msg_id: msg_id.clone(),
                sender: sender.to_string(),
                receiver: msg.dst_sim.clone(),
                sent_at: t,
                delivered_at: None,
                lost_at: None,
            });
            self.trace.push(TraceEvent {
                time: t,
                kind: TraceKind::Send,
                actor: sender.to_string(),
                msg_id: msg_id.clone(),
                detail: msg.dst_sim.clone(),
            });
            if self.bridge.is_some() {
                // The full lookahead may only be promised on the round's final
                // message; any earlier one pins the network engine to t so that
                // the remaining same-time messages are still schedulable.
                let is_final = round_done && i == last && !self.pending.contains_key(&t);
                let max_advance = if is_final {
                    self.compute_max_advance(end)
                } else {
                    t
                };
                let info = InfoMessage {
                    msg_id,
                    sender: sender.to_string(),
                    receiver: msg.dst_sim.clone(),
                    sim_time: t,
                    max_advance,
                    size_bytes: msg.payload.len() as u64,
                    payload: msg.payload,
                };
                self.bridge
                    .as_mut()
                    .expect("bridge present")
                    .session
                    .forward_info(info)?;
                self.pump_one(end)?;
            } else {
                let idx = self.messages.len() - 1;
                self.messages[idx].delivered_at = Some(t);
                self.trace.push(TraceEvent {
                    time: t,
                    kind: TraceKind::Deliver,
                    actor: msg.dst_sim.clone(),
                    msg_id: self.messages[idx].msg_id.clone(),
                    detail: sender.to_string(),
                });
                let item = InputItem {
                    source: sender.to_string(),
                    entity: msg.dst_sim.clone(),
                    attribute: "inbox".into(),
                    value: AttrValue::Inbox(vec![DeliveredMessage {
                        msg_id: self.messages[idx].msg_id.clone(),
                        src_sim: sender.to_string(),
                        payload: msg.payload,
                        arrived: t,
                    }]),
                };
                self.push_pending(t, msg.dst_sim.clone(), item);
            }
        }
        Ok(())
    }

    fn route_attr(
        &mut self,
        src_sim: &str,
        entity: &str,
        attribute: &str,
        value: AttrValue,
        t: SimTime,
    ) {
        let matches: Vec<Connection> = self
            .connections
            .iter()
            .filter(|c| c.src_sim == src_sim && c.src_entity == entity && c.src_attr == attribute)
            .cloned()
            .collect();
        for conn in matches {
            let item = InputItem {
                source: conn.src_entity.clone(),
                entity: conn.dst_entity.clone(),
                attribute: conn.dst_attr.clone(),
                value: value.clone(),
            };
            self.push_pending(t, conn.dst_sim.clone(), item);
        }
    }

    /// Runs every simulator that is due at time t, including any same-time
    /// follow-up work created by routed outputs. Ends with the global
    /// termination check.
    fn execute_round(&mut self, t: SimTime, end: SimTime) -> Result<(), OrchestratorError> {
        self.advance_clock_to(t)?;
        let mut newly_solved = false;
        loop {
            let mut due: BTreeSet<String> = self
                .sims
                .iter()
                .filter(|(_, s)| s.next_step == Some(t))
                .map(|(id, _)| id.clone())
                .collect();
            let mut grouped: BTreeMap<String, Vec<InputItem>> = BTreeMap::new();
            if let Some(items) = self.pending.remove(&t) {
                for (dst, item) in items {
                    due.insert(dst.clone());
                    grouped.entry(dst).or_default().push(item);
                }
            }
            if due.is_empty() {
                break;
            }
            let due: Vec<String> = due.into_iter().collect();
            for (pos, sim_id) in due.iter().cloned().enumerate() {
                let round_done = pos + 1 == due.len();
                let inputs = grouped.remove(&sim_id).unwrap_or_default();
                let slot = self.sims.get_mut(&sim_id).expect("due sim exists");
                if t < slot.local_time {
                    return Err(OrchestratorError::SimulatorFailure(format!(
                        "{sim_id} stepped backwards: {} after {}",
                        t, slot.local_time
                    )));
                }
                self.trace.push(TraceEvent {
                    time: t,
                    kind: TraceKind::Step,
                    actor: sim_id.clone(),
                    msg_id: String::new(),
                    detail: format!("inputs={}", inputs.len()),
                });
                let slot = self.sims.get_mut(&sim_id).expect("due sim exists");
                let result = slot
                    .sim
                    .step(t, inputs)
                    .map_err(OrchestratorError::SimulatorFailure)?;
                slot.local_time = t;
                if let Some(ns) = result.next_step {
                    if ns <= t {
                        return Err(OrchestratorError::SimulatorFailure(format!(
                            "{sim_id} requested non-advancing next step {ns} at {t}"
                        )));
                    }
                }
                slot.next_step = result.next_step;
                if result.solution_found && self.solved.insert(sim_id.clone()) {
                    newly_solved = true;
                    let aggregate = self
                        .sims
                        .get(&sim_id)
                        .and_then(|s| s.sim.state_report())
                        .map(|r| r.aggregate)
                        .unwrap_or(0);
                    self.trace.push(TraceEvent {
                        time: t,
                        kind: TraceKind::Solve,
                        actor: sim_id.clone(),
                        msg_id: String::new(),
                        detail: format!("aggregate={aggregate}"),
                    });
                }
                let mut outbox = Vec::new();
                for out in result.outputs {
                    match out.value {
                        AttrValue::Messages(msgs) => outbox.extend(msgs),
                        other => self.route_attr(&sim_id, &out.entity, &out.attribute, other, t),
                    }
                }
                if !outbox.is_empty() {
                    self.dispatch_messages(&sim_id, t, outbox, end, round_done)?;
                }
            }
        }
        if newly_solved && self.termination_time.is_none() {
            self.termination_time = Some(t);
            for slot in self.sims.values_mut() {
                slot.sim.halt();
                slot.next_step = None;
            }
        }
        Ok(())
    }

    /// Drives the co-simulation to the given horizon (inclusive). Network
    /// transit still pending at the horizon is drained so every message ends
    /// up delivered or lost.
    pub fn run_until(&mut self, end: SimTime) -> Result<RunReport, OrchestratorError> {
        loop {
            let t_next = self.next_event_time();
            if let Some(t) = t_next {
                if t <= end {
                    let safe = match &self.bridge {
                        None => true,
                        Some(b) => b.netsim_idle || t <= b.netsim_time,
                    };
                    if safe {
                        self.execute_round(t, end)?;
                        continue;
                    }
                }
            }
            let Some(binding) = self.bridge.as_ref() else {
                break;
            };
            if !binding.netsim_idle {
                let bound = if binding.netsim_time >= end {
                    SimTime::MAX
                } else {
                    match t_next {
                        Some(t) if t <= end => t,
                        _ => end,
                    }
                };
                let binding = self.bridge.as_mut().expect("bridge present");
                binding.session.grant_waiting(bound)?;
                self.trace_sync(self.clock, "orchestrator", "waiting".into());
                self.pump_one(end)?;
                continue;
            }
            if binding.session.in_flight_len() > 0 {
                return Err(OrchestratorError::DeadlockDetected(format!(
                    "network engine idle with {} unresolved transfers",
                    binding.session.in_flight_len()
                )));
            }
            break;
        }
        if self.termination_time.is_none() {
            self.clock = self.clock.max(end);
        }
        let protocol_trace = match self.bridge.take() {
            Some(binding) => binding.session.close()?,
            None => Vec::new(),
        };
        let agent_states = self
            .sims
            .iter()
            .filter_map(|(id, slot)| slot.sim.state_report().map(|r| (id.clone(), r)))
            .collect();
        Ok(RunReport {
            final_clock: self.clock,
            termination_time: self.termination_time,
            trace: std::mem::take(&mut self.trace),
            protocol_trace,
            messages: std::mem::take(&mut self.messages),
            agent_states,
        })
    }
}

/// Placeholder simulator slot for the network engine; all traffic flows over
/// the bridge session instead of step calls.
pub struct BridgeStub;

impl Simulator for BridgeStub {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::CommBridge
    }

    fn entities(&self) -> Vec<String> {
        vec!["bridge".into()]
    }

    fn initial_next_step(&self) -> Option<SimTime> {
        None
    }

    fn step(&mut self, _now: SimTime, _inputs: Vec<InputItem>) -> Result<StepResult, String> {
        Ok(StepResult {
            outputs: Vec::new(),
            next_step: None,
            solution_found: false,
        })
    }

    fn halt(&mut self) {}

    fn state_report(&self) -> Option<AgentStateReport> {
        None
    }
}
