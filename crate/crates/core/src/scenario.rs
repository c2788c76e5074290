//! Scenario layer: JSON configuration, validation with defaults, assembly of
//! a full run (agents + power + optional network engine) and result export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    agent_id, generate_overlay, AgentConfig, AgentSimulator, PowerSimulator, DEVICE_POWER_ATTR,
    INBOX_ATTR, OUTBOX_ATTR, POWER_ATTR,
};
use crate::bridge::{
    BridgeSession, BridgeTransport, InProcessTransport, InitialMessage, NetsimEndpoint,
    WireTransport, PROTOCOL_VERSION,
};
use crate::kernel::SimTime;
use crate::netsim::{
    build_network, ChangeAction, InfrastructureChange, NetworkConfig, NetworkEngine,
};
use crate::orchestrator::{
    BridgeStub, Connection, MessageRecord, Orchestrator, OrchestratorError, RunReport,
    TraceEvent, BRIDGE_SIM_ID,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config validation error at {field}: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Engine(#[from] OrchestratorError),
}

impl ScenarioError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ScenarioError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// CLI exit code bucket: 1 for configuration problems, 2 for runtime ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Engine(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Ideal,
    NetsimInproc,
    NetsimWire,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayParams {
    pub k: usize,
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfraChangeConfig {
    pub action: ChangeAction,
    pub node: String,
    pub at_us: u64,
}

fn default_waiting_period() -> u64 {
    50_000
}

fn default_threshold() -> u64 {
    700
}

fn default_initiator() -> String {
    "client0".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_agents: usize,
    pub until_us: u64,
    #[serde(default = "default_waiting_period")]
    pub waiting_period_us: u64,
    #[serde(default = "default_threshold")]
    pub threshold_w: u64,
    #[serde(default = "default_initiator")]
    pub initiator: String,
    pub mode: RunMode,
    pub overlay: OverlayParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    pub power_fixture: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub infrastructure_changes: Vec<InfraChangeConfig>,
}

pub fn validate_scenario(cfg: &ScenarioConfig) -> Result<(), ScenarioError> {
    if cfg.num_agents == 0 {
        return Err(ScenarioError::invalid("num_agents", "must be positive"));
    }
    if cfg.waiting_period_us == 0 {
        return Err(ScenarioError::invalid("waiting_period_us", "must be positive"));
    }
    if cfg.threshold_w == 0 {
        return Err(ScenarioError::invalid("threshold_w", "must be positive"));
    }
    if cfg.overlay.k >= cfg.num_agents || cfg.overlay.k < 2 || cfg.overlay.k % 2 != 0 {
        return Err(ScenarioError::invalid(
            "overlay.k",
            format!("k={} invalid for n={}", cfg.overlay.k, cfg.num_agents),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.overlay.p) {
        return Err(ScenarioError::invalid("overlay.p", "must lie in [0, 1]"));
    }
    let agent_ids: Vec<String> = (0..cfg.num_agents).map(agent_id).collect();
    if !agent_ids.contains(&cfg.initiator) {
        return Err(ScenarioError::invalid(
            "initiator",
            format!("{} is not an agent", cfg.initiator),
        ));
    }
    if cfg.power_fixture.len() != cfg.num_agents {
        return Err(ScenarioError::invalid(
            "power_fixture",
            format!(
                "{} entries for {} agents",
                cfg.power_fixture.len(),
                cfg.num_agents
            ),
        ));
    }
    for id in &agent_ids {
        if !cfg.power_fixture.contains_key(id) {
            return Err(ScenarioError::invalid(
                "power_fixture",
                format!("missing entry for {id}"),
            ));
        }
    }
    let needs_network = matches!(cfg.mode, RunMode::NetsimInproc | RunMode::NetsimWire);
    match &cfg.network {
        None if needs_network => {
            return Err(ScenarioError::invalid("network", "required for netsim modes"));
        }
        None => {
            if !cfg.infrastructure_changes.is_empty() {
                return Err(ScenarioError::invalid(
                    "infrastructure_changes",
                    "require a network section",
                ));
            }
        }
        Some(network) => {
            let topo = build_network(network)
                .map_err(|e| ScenarioError::invalid("network", e.to_string()))?;
            if network.client_binding.len() != cfg.num_agents {
                return Err(ScenarioError::invalid(
                    "network.client_binding",
                    format!(
                        "{} bindings for {} agents",
                        network.client_binding.len(),
                        cfg.num_agents
                    ),
                ));
            }
            for id in &agent_ids {
                if !network.client_binding.contains_key(id) {
                    return Err(ScenarioError::invalid(
                        "network.client_binding",
                        format!("missing binding for {id}"),
                    ));
                }
            }
            for (idx, change) in cfg.infrastructure_changes.iter().enumerate() {
                if topo.node(&change.node).is_none() {
                    return Err(ScenarioError::invalid(
                        &format!("infrastructure_changes[{idx}].node"),
                        format!("unknown node {}", change.node),
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(text)?;
    validate_scenario(&cfg)?;
    Ok(cfg)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MessageDelay {
    pub msg_id: String,
    pub sender: String,
    pub receiver: String,
    pub delay_us: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub messages_lost: u64,
    pub termination_time_us: Option<u64>,
    pub delays: Vec<MessageDelay>,
    pub records: Vec<MessageRecord>,
    pub solved_agents: BTreeMap<String, BTreeMap<String, u64>>,
}

pub fn build_stats(report: &RunReport) -> RunStats {
    let mut delivered = 0;
    let mut lost = 0;
    let mut delays = Vec::new();
    for rec in &report.messages {
        if let Some(delay) = rec.delay() {
            delivered += 1;
            delays.push(MessageDelay {
                msg_id: rec.msg_id.clone(),
                sender: rec.sender.clone(),
                receiver: rec.receiver.clone(),
                delay_us: delay.as_micros(),
            });
        } else if rec.lost_at.is_some() {
            lost += 1;
        }
    }
    let solved_agents = report
        .agent_states
        .iter()
        .filter(|(_, state)| state.solution_found)
        .map(|(id, state)| (id.clone(), state.contributions.clone()))
        .collect();
    RunStats {
        messages_sent: report.messages.len() as u64,
        messages_delivered: delivered,
        messages_lost: lost,
        termination_time_us: report.termination_time.map(|t| t.as_micros()),
        delays,
        records: report.messages.clone(),
        solved_agents,
    }
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub report: RunReport,
    pub stats: RunStats,
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Binary that provides the `netsim-serve` subcommand in wire mode;
    /// defaults to the current executable.
    pub netsim_exe: Option<PathBuf>,
}

static NET_FILE_SEQ: AtomicU64 = AtomicU64::new(0);

fn write_network_temp(network: &NetworkConfig) -> Result<PathBuf, ScenarioError> {
    let path = std::env::temp_dir().join(format!(
        "simbridge-net-{}-{}.json",
        std::process::id(),
        NET_FILE_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&path, serde_json::to_vec_pretty(network)?)?;
    Ok(path)
}

pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ScenarioRun, ScenarioError> {
    validate_scenario(cfg)?;
    let overlay = generate_overlay(cfg.num_agents, cfg.overlay.k, cfg.overlay.p, cfg.overlay.seed)
        .map_err(|e| ScenarioError::invalid("overlay", e.to_string()))?;
    let until = SimTime::from_micros(cfg.until_us);
    let waiting_period = SimTime::from_micros(cfg.waiting_period_us);

    let mut orch = Orchestrator::new();
    orch.register_simulator("power", Box::new(PowerSimulator::from_fixture(&cfg.power_fixture)))?;
    for i in 0..cfg.num_agents {
        let id = agent_id(i);
        let sim = AgentSimulator::new(AgentConfig {
            id: id.clone(),
            neighbors: overlay.neighbors(&id).to_vec(),
            waiting_period,
            threshold: cfg.threshold_w,
            initiator: id == cfg.initiator,
        });
        orch.register_simulator(&id, Box::new(sim))?;
        for entity in [format!("pv{i}"), format!("household{i}")] {
            orch.connect(Connection {
                src_sim: "power".into(),
                src_entity: entity,
                src_attr: POWER_ATTR.into(),
                dst_sim: id.clone(),
                dst_entity: id.clone(),
                dst_attr: DEVICE_POWER_ATTR.into(),
            })?;
        }
    }

    let mut temp_net_file: Option<PathBuf> = None;
    if matches!(cfg.mode, RunMode::NetsimInproc | RunMode::NetsimWire) {
        orch.register_simulator(BRIDGE_SIM_ID, Box::new(BridgeStub))?;
        for i in 0..cfg.num_agents {
            let id = agent_id(i);
            orch.connect(Connection {
                src_sim: id.clone(),
                src_entity: id.clone(),
                src_attr: OUTBOX_ATTR.into(),
                dst_sim: BRIDGE_SIM_ID.into(),
                dst_entity: "bridge".into(),
                dst_attr: INBOX_ATTR.into(),
            })?;
        }
        let network = cfg.network.as_ref().expect("validated");
        let transport: Box<dyn BridgeTransport> = match cfg.mode {
            RunMode::NetsimInproc => {
                let engine = NetworkEngine::new(
                    build_network(network)
                        .map_err(|e| ScenarioError::invalid("network", e.to_string()))?,
                );
                Box::new(InProcessTransport::new(NetsimEndpoint::new(engine)))
            }
            RunMode::NetsimWire => {
                let net_path = write_network_temp(network)?;
                let exe = match &opts.netsim_exe {
                    Some(path) => path.clone(),
                    None => std::env::current_exe()?,
                };
                let mut command = Command::new(exe);
                command.arg("netsim-serve").arg("--network").arg(&net_path);
                let transport = WireTransport::spawn(&mut command)
                    .map_err(OrchestratorError::Bridge)?;
                temp_net_file = Some(net_path);
                Box::new(transport)
            }
            RunMode::Ideal => unreachable!(),
        };
        let session = BridgeSession::open(
            transport,
            InitialMessage {
                until,
                waiting_period,
                protocol_version: PROTOCOL_VERSION,
            },
        )
        .map_err(OrchestratorError::Bridge)?;
        orch.attach_bridge(session)?;
        let mut changes = cfg.infrastructure_changes.clone();
        changes.sort_by_key(|c| c.at_us);
        for change in changes {
            orch.forward_infrastructure(InfrastructureChange {
                action: change.action,
                node: change.node,
                at: SimTime::from_micros(change.at_us),
            })?;
        }
    }

    let result = orch.run_until(until);
    if let Some(path) = temp_net_file {
        let _ = std::fs::remove_file(path);
    }
    let report = result?;
    let stats = build_stats(&report);
    Ok(ScenarioRun { report, stats })
}

pub fn render_events_csv(trace: &[TraceEvent]) -> String {
    let mut out = String::from("seq,time_us,kind,actor,msg_id,detail\n");
    for (seq, event) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            seq + 1,
            event.time.as_micros(),
            event.kind.as_str(),
            event.actor,
            event.msg_id,
            event.detail
        ));
    }
    out
}

#[derive(Serialize)]
struct StatsFile<'a> {
    messages_sent: u64,
    messages_delivered: u64,
    messages_lost: u64,
    termination_time_us: Option<u64>,
    delays: &'a [MessageDelay],
}

pub fn render_stats_json(stats: &RunStats) -> String {
    let file = StatsFile {
        messages_sent: stats.messages_sent,
        messages_delivered: stats.messages_delivered,
        messages_lost: stats.messages_lost,
        termination_time_us: stats.termination_time_us,
        delays: &stats.delays,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("stats serialize");
    text.push('\n');
    text
}

#[derive(Serialize)]
struct StatesFile {
    solved: BTreeMap<String, BTreeMap<String, u64>>,
    all: BTreeMap<String, BTreeMap<String, u64>>,
}

pub fn render_states_json(report: &RunReport) -> String {
    let solved = report
        .agent_states
        .iter()
        .filter(|(_, s)| s.solution_found)
        .map(|(id, s)| (id.clone(), s.contributions.clone()))
        .collect();
    let all = report
        .agent_states
        .iter()
        .map(|(id, s)| (id.clone(), s.contributions.clone()))
        .collect();
    let mut text =
        serde_json::to_string_pretty(&StatesFile { solved, all }).expect("states serialize");
    text.push('\n');
    text
}

/// Writes events.csv, stats.json and states.json into out_dir.
pub fn export_results(run: &ScenarioRun, out_dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("events.csv"), render_events_csv(&run.report.trace))?;
    std::fs::write(out_dir.join("stats.json"), render_stats_json(&run.stats))?;
    std::fs::write(out_dir.join("states.json"), render_states_json(&run.report))?;
    Ok(())
}
