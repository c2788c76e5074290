//! End-to-end acceptance suite. Each criterion test prints one pass line.
//!
//! Expected outcomes for the canonical scenarios live in `tests/golden/` and
//! are produced by the reference simulation in `oracle.rs`, never by the
//! engine under test. Run
//!
//! ```text
//! cargo test -p simbridge --test acceptance regenerate_goldens -- --ignored
//! ```
//!
//! to refresh them after a deliberate scenario change.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simbridge::agents::{
    agent_id, encode_knowledge, generate_overlay, AgentConfig, AgentKnowledge, AgentSimulator,
    INBOX_ATTR, OUTBOX_ATTR,
};
use simbridge::bridge::{
    BridgeSession, InProcessTransport, InitialMessage, NetsimEndpoint, ProtocolMessage, SyncKind,
    PROTOCOL_VERSION,
};
use simbridge::kernel::{EventQueue, SimTime};
use simbridge::netsim::{
    build_network, transmission_delay, ChangeAction, DataRate, Link, LinkConfig, NetYield,
    NetworkConfig, NetworkEngine, NodeConfig, NodeKind,
};
use simbridge::orchestrator::{
    AgentMessage, AttrValue, Connection, DeliveredMessage, InputItem, Orchestrator, Simulator,
    SimulatorKind, StepOutput, StepResult, BRIDGE_SIM_ID,
};
use simbridge::scenario::{
    load_scenario, render_states_json, run_scenario, InfraChangeConfig, OverlayParams, RunMode,
    RunOptions, ScenarioConfig, ScenarioRun,
};

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn scenario_file(name: &str) -> PathBuf {
    repo_path("../../scenarios").join(name)
}

fn golden_file(name: &str) -> PathBuf {
    repo_path("tests/golden").join(name)
}

fn load_canonical(name: &str) -> ScenarioConfig {
    load_scenario(&scenario_file(name)).expect("canonical scenario must load")
}

fn canonical_adjacency() -> BTreeMap<String, Vec<String>> {
    generate_overlay(50, 4, 0.1, 42).unwrap().adjacency
}

fn frozen_adjacency() -> BTreeMap<String, Vec<String>> {
    let text = fs::read_to_string(golden_file("overlay.json")).expect("frozen overlay fixture");
    serde_json::from_str(&text).unwrap()
}

fn frozen_outcome(name: &str) -> oracle::Outcome {
    let text = fs::read_to_string(golden_file(name)).expect("frozen outcome golden");
    serde_json::from_str(&text).unwrap()
}

fn outcome_of(run: &ScenarioRun) -> oracle::Outcome {
    oracle::Outcome {
        termination_time_us: run.stats.termination_time_us,
        solved: run.stats.solved_agents.clone(),
        all: run
            .report
            .agent_states
            .iter()
            .map(|(id, st)| (id.clone(), st.contributions.clone()))
            .collect(),
    }
}

fn run_canonical(name: &str) -> ScenarioRun {
    let cfg = load_canonical(name);
    run_scenario(&cfg, &RunOptions::default()).expect("canonical run must succeed")
}

fn pass(criterion: u32, what: &str) {
    println!("[PASS] criterion {criterion}: {what}");
}

/// Writes the golden files from the reference oracle. Kept ignored so the
/// frozen values only ever change on purpose.
#[test]
#[ignore]
fn regenerate_goldens() {
    let adjacency = canonical_adjacency();
    fs::create_dir_all(golden_file("")).unwrap();
    fs::write(
        golden_file("overlay.json"),
        serde_json::to_string_pretty(&adjacency).unwrap() + "\n",
    )
    .unwrap();
    for (scenario, golden) in [
        ("ideal.json", "ideal_outcome.json"),
        ("netsim.json", "netsim_outcome.json"),
        ("netsim_disconnect.json", "netsim_disconnect_outcome.json"),
    ] {
        let cfg = load_canonical(scenario);
        let outcome = oracle::simulate(&cfg, &adjacency);
        fs::write(
            golden_file(golden),
            serde_json::to_string_pretty(&outcome).unwrap() + "\n",
        )
        .unwrap();
        println!("froze {golden}: termination {:?}", outcome.termination_time_us);
    }
}

// --- criterion 1: two-client synchronization trace ---------------------------

/// Fixed-plan simulator: emits scripted messages at scripted times.
struct Scripted {
    plan: BTreeMap<SimTime, Vec<AgentMessage>>,
}

impl Simulator for Scripted {
    fn kind(&self) -> SimulatorKind {
        SimulatorKind::Agent
    }

    fn entities(&self) -> Vec<String> {
        vec!["agent".into()]
    }

    fn initial_next_step(&self) -> Option<SimTime> {
        self.plan.keys().next().copied()
    }

    fn step(&mut self, now: SimTime, _inputs: Vec<InputItem>) -> Result<StepResult, String> {
        let outputs = match self.plan.remove(&now) {
            Some(messages) => vec![StepOutput {
                entity: "agent".into(),
                attribute: OUTBOX_ATTR.into(),
                value: AttrValue::Messages(messages),
            }],
            None => Vec::new(),
        };
        Ok(StepResult {
            outputs,
            next_step: self.plan.keys().next().copied(),
            solution_found: false,
        })
    }

    fn halt(&mut self) {}

    fn state_report(&self) -> Option<simbridge::orchestrator::AgentStateReport> {
        None
    }
}

fn two_client_network(prop_delay_us: u64) -> NetworkConfig {
    NetworkConfig {
        nodes: vec![
            NodeConfig {
                id: "n0".into(),
                kind: NodeKind::Client,
            },
            NodeConfig {
                id: "n1".into(),
                kind: NodeKind::Client,
            },
        ],
        links: vec![LinkConfig {
            a: "n0".into(),
            b: "n1".into(),
            prop_delay_us,
            data_rate_bps: None,
        }],
        client_binding: BTreeMap::from([
            ("client0".into(), "n0".into()),
            ("client1".into(), "n1".into()),
        ]),
    }
}

fn register_scripted(
    orch: &mut Orchestrator,
    id: &str,
    plan: BTreeMap<SimTime, Vec<AgentMessage>>,
) {
    orch.register_simulator(id, Box::new(Scripted { plan })).unwrap();
    orch.connect(Connection {
        src_sim: id.into(),
        src_entity: "agent".into(),
        src_attr: OUTBOX_ATTR.into(),
        dst_sim: BRIDGE_SIM_ID.into(),
        dst_entity: "bridge".into(),
        dst_attr: INBOX_ATTR.into(),
    })
    .unwrap();
}

#[test]
fn criterion_01_two_client_protocol_trace() {
    let end = SimTime::from_millis(14);
    let mut orch = Orchestrator::new();
    orch.register_simulator(BRIDGE_SIM_ID, Box::new(simbridge::orchestrator::BridgeStub))
        .unwrap();
    register_scripted(
        &mut orch,
        "client0",
        BTreeMap::from([(
            SimTime::from_millis(1),
            vec![AgentMessage {
                dst_sim: "client1".into(),
                payload: b"ping".to_vec(),
            }],
        )]),
    );
    register_scripted(
        &mut orch,
        "client1",
        BTreeMap::from([(
            SimTime::from_millis(5),
            vec![AgentMessage {
                dst_sim: "client0".into(),
                payload: b"pong".to_vec(),
            }],
        )]),
    );
    let engine = NetworkEngine::new(build_network(&two_client_network(7_000)).unwrap());
    let session = BridgeSession::open(
        Box::new(InProcessTransport::new(NetsimEndpoint::new(engine))),
        InitialMessage {
            until: end,
            waiting_period: SimTime::from_millis(50),
            protocol_version: PROTOCOL_VERSION,
        },
    )
    .unwrap();
    orch.attach_bridge(session).unwrap();
    let report = orch.run_until(end).unwrap();

    let trace = &report.protocol_trace;
    assert!(
        matches!(&trace[0].msg, ProtocolMessage::Initial(_)) && !trace[0].from_netsim,
        "session must open with INITIAL"
    );
    assert!(
        matches!(&trace[1].msg, ProtocolMessage::Sync(s) if s.kind == SyncKind::Waiting)
            && trace[1].from_netsim,
        "INITIAL must be acknowledged with WAITING"
    );
    // The reference exchange is the message flow after the handshake, with the
    // orchestrator's internal waiting grants elided.
    let exchange: Vec<&ProtocolMessage> = trace[2..]
        .iter()
        .filter(|t| t.from_netsim || !matches!(t.msg, ProtocolMessage::Sync(_)))
        .map(|t| &t.msg)
        .collect();
    assert_eq!(exchange.len(), 6, "exchange: {exchange:#?}");
    let first_delivery = match &exchange[3] {
        ProtocolMessage::Delivery(d) => d.delivered_at,
        other => panic!("expected first DELIVERY, got {other:?}"),
    };
    match (&exchange[0], &exchange[1], &exchange[2]) {
        (
            ProtocolMessage::Info(first),
            ProtocolMessage::Sync(bound),
            ProtocolMessage::Info(second),
        ) => {
            assert_eq!(first.sim_time, SimTime::from_millis(1));
            assert_eq!(first.max_advance, SimTime::from_millis(5));
            assert_eq!(bound.kind, SyncKind::MaxAdvance);
            assert_eq!(bound.sim_time, SimTime::from_millis(5));
            assert_eq!(second.sim_time, SimTime::from_millis(5));
            assert_eq!(second.max_advance, SimTime::from_millis(14));
        }
        other => panic!("unexpected exchange prefix {other:?}"),
    }
    match (&exchange[4], &exchange[5]) {
        (ProtocolMessage::Delivery(second), ProtocolMessage::Sync(last)) => {
            assert_eq!(second.delivered_at, SimTime::from_millis(12));
            assert!(
                matches!(last.kind, SyncKind::MaxAdvance | SyncKind::Waiting),
                "final bound must be MAX_ADVANCE or WAITING"
            );
            assert_eq!(last.sim_time, SimTime::from_millis(14));
        }
        other => panic!("unexpected exchange suffix {other:?}"),
    }
    assert!(
        SimTime::from_millis(5) < first_delivery && first_delivery < SimTime::from_millis(12),
        "first delivery at {first_delivery} must fall strictly between 5 ms and 12 ms"
    );
    pass(1, "two-client trace is INFO, MAX_ADVANCE, INFO, DELIVERY, DELIVERY, WAITING");
}

// --- criteria 2-4: canonical scenario outcomes -------------------------------

#[test]
fn criterion_02_ideal_mode_timing() {
    assert_eq!(
        canonical_adjacency(),
        frozen_adjacency(),
        "overlay generator must reproduce the frozen fixture"
    );
    let cfg = load_canonical("ideal.json");
    let golden = frozen_outcome("ideal_outcome.json");
    assert_eq!(
        oracle::simulate(&cfg, &frozen_adjacency()),
        golden,
        "oracle drifted from its frozen output"
    );

    let run = run_canonical("ideal.json");
    assert_eq!(run.stats.termination_time_us, Some(150_000));
    assert!(!run.stats.solved_agents.is_empty());
    for (agent, state) in &run.stats.solved_agents {
        let aggregate: u64 = state.values().sum();
        assert!(
            aggregate >= 700,
            "{agent} solved with aggregate {aggregate} below threshold"
        );
    }
    assert_eq!(outcome_of(&run), golden);
    pass(2, "ideal mode terminates at exactly 150 ms with every solution above 700 W");
}

#[test]
fn criterion_03_network_changes_outcome() {
    let cfg = load_canonical("netsim.json");
    let golden = frozen_outcome("netsim_outcome.json");
    assert_eq!(oracle::simulate(&cfg, &frozen_adjacency()), golden);

    let run = run_canonical("netsim.json");
    assert_eq!(run.stats.termination_time_us, Some(150_000));
    assert_eq!(outcome_of(&run), golden);

    let ideal = frozen_outcome("ideal_outcome.json");
    let ideal_solved: BTreeSet<&String> = ideal.solved.keys().collect();
    let netsim_solved: BTreeSet<&String> = golden.solved.keys().collect();
    assert!(
        netsim_solved.is_subset(&ideal_solved),
        "agents solving over the network must also solve in ideal mode"
    );
    assert!(
        netsim_solved.len() < ideal_solved.len(),
        "network delays must strictly shrink the solved set"
    );
    let unstarted = run
        .report
        .agent_states
        .values()
        .filter(|st| !st.started)
        .count();
    assert!(
        unstarted > 0,
        "at least one agent must never have received the initial request"
    );
    pass(3, "netsim mode also solves at 150 ms with strictly fewer solved agents");
}

#[test]
fn criterion_04_disconnect_outcome() {
    let cfg = load_canonical("netsim_disconnect.json");
    let golden = frozen_outcome("netsim_disconnect_outcome.json");
    assert_eq!(oracle::simulate(&cfg, &frozen_adjacency()), golden);

    let run = run_canonical("netsim_disconnect.json");

    let to_client1: Vec<_> = run
        .report
        .messages
        .iter()
        .filter(|m| m.receiver == "client1")
        .collect();
    assert!(!to_client1.is_empty());
    let mut error_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for traced in &run.report.protocol_trace {
        if let ProtocolMessage::Sync(sync) = &traced.msg {
            if sync.kind == SyncKind::TransmissionError {
                *error_counts
                    .entry(sync.msg_id.as_deref().expect("loss must name its message"))
                    .or_default() += 1;
            }
        }
    }
    for msg in &to_client1 {
        assert!(
            msg.sent_at > SimTime::from_millis(10),
            "all traffic to client1 originates after the disconnect"
        );
        assert_eq!(
            error_counts.get(msg.msg_id.as_str()),
            Some(&1),
            "{} must yield exactly one TRANSMISSION_ERROR",
            msg.msg_id
        );
        assert_eq!(msg.delivered_at, None);
        assert_eq!(msg.lost_at, Some(msg.sent_at));
    }
    assert_eq!(error_counts.len(), to_client1.len());

    let termination = run.stats.termination_time_us.expect("run must terminate");
    assert_eq!(Some(termination), golden.termination_time_us);
    assert!(
        termination > 150_000,
        "disconnect must delay the first solution past 150 ms"
    );
    let baseline = frozen_outcome("netsim_outcome.json");
    assert_ne!(
        golden.solved.keys().collect::<Vec<_>>(),
        baseline.solved.keys().collect::<Vec<_>>(),
        "disconnect must change which agents solve"
    );
    assert_eq!(outcome_of(&run), golden);
    pass(4, "disconnecting client1 loses every message to it and delays the solution");
}

// --- criterion 5: zero-delay network equals ideal mode -----------------------

#[test]
fn criterion_05_zero_delay_network_matches_ideal() {
    let ideal = run_canonical("ideal.json");
    let mut cfg = load_canonical("netsim.json");
    for link in &mut cfg.network.as_mut().unwrap().links {
        link.prop_delay_us = 0;
        link.data_rate_bps = None;
    }
    let zero = run_scenario(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(
        zero.stats.termination_time_us,
        ideal.stats.termination_time_us
    );
    assert_eq!(
        render_states_json(&zero.report),
        render_states_json(&ideal.report),
        "zero-delay network must reproduce ideal-mode states byte for byte"
    );
    pass(5, "netsim with all-zero delays reproduces ideal-mode states exactly");
}

// --- criterion 6: conservation over randomized scenarios ---------------------

fn random_scenario(rng: &mut ChaCha8Rng, allow_ideal: bool) -> ScenarioConfig {
    let n = rng.gen_range(3..=8);
    let netsim = !(allow_ideal && rng.gen_bool(0.3));
    let mut nodes: Vec<NodeConfig> = (0..n)
        .map(|i| NodeConfig {
            id: agent_id(i),
            kind: NodeKind::Client,
        })
        .collect();
    for (id, kind) in [
        ("bs_a", NodeKind::BaseStation),
        ("bs_b", NodeKind::BaseStation),
        ("router0", NodeKind::Router),
    ] {
        nodes.push(NodeConfig {
            id: id.into(),
            kind,
        });
    }
    let rate = |rng: &mut ChaCha8Rng| match rng.gen_range(0..3) {
        0 => None,
        1 => Some(10_000_000),
        _ => Some(10_000_000_000),
    };
    let mut links: Vec<LinkConfig> = (0..n)
        .map(|i| LinkConfig {
            a: agent_id(i),
            b: if rng.gen_bool(0.5) { "bs_a" } else { "bs_b" }.into(),
            prop_delay_us: rng.gen_range(0..25_000),
            data_rate_bps: rate(rng),
        })
        .collect();
    for bs in ["bs_a", "bs_b"] {
        links.push(LinkConfig {
            a: bs.into(),
            b: "router0".into(),
            prop_delay_us: rng.gen_range(0..20_000),
            data_rate_bps: rate(rng),
        });
    }
    let changes = if netsim {
        (0..rng.gen_range(0..=3))
            .map(|_| InfraChangeConfig {
                action: if rng.gen_bool(0.7) {
                    ChangeAction::Disconnect
                } else {
                    ChangeAction::Reconnect
                },
                node: agent_id(rng.gen_range(0..n)),
                at_us: rng.gen_range(0..250_000),
            })
            .collect()
    } else {
        Vec::new()
    };
    ScenarioConfig {
        num_agents: n,
        until_us: 250_000,
        waiting_period_us: 50_000,
        threshold_w: rng.gen_range(400..1200),
        initiator: agent_id(0),
        mode: if netsim {
            RunMode::NetsimInproc
        } else {
            RunMode::Ideal
        },
        overlay: OverlayParams {
            k: 2,
            p: [0.0, 0.1, 0.5][rng.gen_range(0..3)],
            seed: rng.gen(),
        },
        network: Some(NetworkConfig {
            nodes,
            links,
            client_binding: (0..n).map(|i| (agent_id(i), agent_id(i))).collect(),
        }),
        power_fixture: (0..n).map(|i| (agent_id(i), rng.gen_range(50..400))).collect(),
        infrastructure_changes: changes,
    }
}

#[test]
fn criterion_06_message_conservation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let cfg = random_scenario(&mut rng, false);
        // run_scenario closes the bridge session, which fails the run if any
        // forwarded message is still unresolved.
        let run = run_scenario(&cfg, &RunOptions::default())
            .unwrap_or_else(|e| panic!("case {case} failed: {e}"));
        assert_eq!(
            run.stats.messages_sent,
            run.stats.messages_delivered + run.stats.messages_lost,
            "case {case} dropped messages silently"
        );
    }
    pass(6, "200 randomized runs conserve every message and drain the bridge");
}

// --- criterion 7: byte-identical reruns --------------------------------------

#[test]
fn criterion_07_deterministic_outputs() {
    for name in ["ideal.json", "netsim.json", "netsim_disconnect.json"] {
        let first = run_canonical(name);
        let second = run_canonical(name);
        let render = |run: &ScenarioRun| {
            (
                simbridge::scenario::render_events_csv(&run.report.trace),
                simbridge::scenario::render_stats_json(&run.stats),
                render_states_json(&run.report),
            )
        };
        assert_eq!(render(&first), render(&second), "{name} must replay identically");
    }
    pass(7, "repeated canonical runs produce byte-identical exports");
}

// --- criterion 8: wire transport equals in-process ---------------------------

#[test]
fn criterion_08_wire_matches_inprocess() {
    let opts = RunOptions {
        netsim_exe: Some(PathBuf::from(env!("CARGO_BIN_EXE_simbridge"))),
    };
    for name in ["netsim.json", "netsim_disconnect.json"] {
        let mut cfg = load_canonical(name);
        let inproc = run_scenario(&cfg, &RunOptions::default()).unwrap();
        cfg.mode = RunMode::NetsimWire;
        let wire = run_scenario(&cfg, &opts).unwrap();
        assert_eq!(
            inproc.report.protocol_trace, wire.report.protocol_trace,
            "{name}: wire trace must match in-process trace"
        );
    }
    pass(8, "wire mode reproduces the in-process protocol trace");
}

// --- criterion 9: delay arithmetic -------------------------------------------

#[test]
fn criterion_09_delay_vectors() {
    let link = |rate: DataRate| Link {
        a: "a".into(),
        b: "b".into(),
        propagation_delay: SimTime::ZERO,
        data_rate: rate,
    };
    assert_eq!(
        transmission_delay(&link(DataRate::Bps(10_000_000)), 160),
        SimTime::from_micros(128)
    );
    assert_eq!(
        transmission_delay(&link(DataRate::Bps(10_000_000_000)), 160),
        SimTime::from_micros(1)
    );
    assert_eq!(transmission_delay(&link(DataRate::Ideal), 160), SimTime::ZERO);
    pass(9, "transmission delay vectors hold exactly");
}

// --- criterion 10: property suites -------------------------------------------

#[derive(Debug, Clone)]
enum FesOp {
    Schedule(u64),
    Pop,
    Cancel(usize),
}

fn fes_ops() -> impl Strategy<Value = Vec<FesOp>> {
    prop::collection::vec(
        prop_oneof![
            (0u64..500).prop_map(FesOp::Schedule),
            Just(FesOp::Pop),
            (0usize..64).prop_map(FesOp::Cancel),
        ],
        1..120,
    )
}

fn drive_fes(ops: &[FesOp]) -> Vec<(u64, u64)> {
    let mut queue = EventQueue::new();
    let mut ids = Vec::new();
    let mut now = SimTime::ZERO;
    let mut popped = Vec::new();
    for op in ops {
        match op {
            FesOp::Schedule(delta) => {
                let id = queue
                    .schedule(now, now + SimTime::from_micros(*delta), "sim", ())
                    .unwrap();
                ids.push(id);
            }
            FesOp::Pop => {
                if let Some(event) = queue.pop_next() {
                    now = event.time;
                    popped.push((event.time.as_micros(), event.id));
                }
            }
            FesOp::Cancel(pick) => {
                if !ids.is_empty() {
                    queue.cancel(ids[pick % ids.len()]);
                }
            }
        }
    }
    while let Some(event) = queue.pop_next() {
        popped.push((event.time.as_micros(), event.id));
    }
    popped
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn prop_fes_pops_in_time_order(ops in fes_ops()) {
        let popped = drive_fes(&ops);
        for pair in popped.windows(2) {
            prop_assert!(
                pair[0] <= pair[1],
                "pop order regressed: {:?} before {:?}",
                pair[0],
                pair[1]
            );
        }
        prop_assert_eq!(drive_fes(&ops), popped, "identical ops must replay identically");
    }

    #[test]
    fn prop_orchestrator_clock_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_scenario(&mut rng, true);
        let run = run_scenario(&cfg, &RunOptions::default()).unwrap();
        // Trace rows past the horizon belong to the post-run drain (the
        // network engine resolving in-flight transit at its own local time),
        // so monotonicity is asserted on times clamped to the horizon.
        let until = cfg.until_us;
        let times: Vec<u64> = run
            .report
            .trace
            .iter()
            .map(|e| e.time.as_micros().min(until))
            .collect();
        for pair in times.windows(2) {
            prop_assert!(pair[0] <= pair[1], "trace time regressed");
        }
        let floor = run
            .report
            .termination_time
            .map(|t| t.as_micros())
            .unwrap_or(until);
        prop_assert!(run.report.final_clock.as_micros() >= floor);
        for record in &run.report.messages {
            if let Some(delivered) = record.delivered_at {
                prop_assert!(delivered >= record.sent_at);
            }
        }
    }

    #[test]
    fn prop_delivery_respects_propagation_bound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = random_scenario(&mut rng, false);
        let network = cfg.network.as_ref().unwrap();
        let mut engine = NetworkEngine::new(build_network(network).unwrap());
        let n = cfg.num_agents;
        let mut sends = BTreeMap::new();
        for i in 0..rng.gen_range(1..20) {
            let src = agent_id(rng.gen_range(0..n));
            let mut dst = agent_id(rng.gen_range(0..n));
            if dst == src {
                dst = agent_id((rng.gen_range(0..n - 1) + 1 + i) % n);
            }
            if dst == src {
                continue;
            }
            let at = SimTime::from_micros(rng.gen_range(0..100_000));
            let msg_id = format!("m{i}");
            engine
                .send_packet(&msg_id, &src, &dst, rng.gen_range(1..2048), at)
                .unwrap();
            sends.insert(msg_id, (src, dst, at));
        }
        loop {
            match engine.run_until(SimTime::MAX).unwrap() {
                NetYield::Delivered(delivery) => {
                    let (src, dst, at) = &sends[&delivery.msg_id];
                    let floor = prop_sum_lower_bound(network, src, dst);
                    prop_assert!(
                        delivery.delivered_at >= at.saturating_add(floor),
                        "{} delivered before the propagation floor",
                        delivery.msg_id
                    );
                }
                NetYield::Lost(_) => {}
                NetYield::Parked { idle, .. } => {
                    prop_assert!(idle);
                    break;
                }
            }
        }
    }

    #[test]
    fn prop_agent_knowledge_monotone(
        seed in any::<u64>(),
        batches in prop::collection::vec(
            prop::collection::vec((0usize..6, prop::collection::btree_set(0usize..6, 0..4)), 0..4),
            1..8,
        ),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<u64> = (0..6).map(|_| rng.gen_range(50..400)).collect();
        let wp = SimTime::from_millis(50);
        let mut agent = AgentSimulator::new(AgentConfig {
            id: agent_id(0),
            neighbors: (1..6).map(agent_id).collect(),
            waiting_period: wp,
            threshold: rng.gen_range(200..2000),
            initiator: rng.gen_bool(0.5),
        });
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut was_started = false;
        let mut last_aggregate = 0u64;
        let mut msg_seq = 0u64;
        for (round, batch) in batches.iter().enumerate() {
            let now = SimTime::from_micros((round as u64 + 1) * wp.as_micros());
            let inbox: Vec<DeliveredMessage> = batch
                .iter()
                .map(|(sender, known)| {
                    let knowledge = AgentKnowledge {
                        started: true,
                        contributions: known
                            .iter()
                            .map(|&i| (agent_id(i), values[i]))
                            .collect(),
                    };
                    msg_seq += 1;
                    DeliveredMessage {
                        msg_id: format!("m{msg_seq}"),
                        src_sim: agent_id(sender % 6),
                        payload: encode_knowledge(&knowledge),
                        arrived: now.saturating_sub(SimTime::from_micros(1)),
                    }
                })
                .collect();
            let inputs = vec![InputItem {
                source: BRIDGE_SIM_ID.into(),
                entity: agent_id(0),
                attribute: INBOX_ATTR.into(),
                value: AttrValue::Inbox(inbox),
            }];
            let result = agent.step(now, inputs).unwrap();
            let state = agent.state_report().unwrap();
            prop_assert!(
                seen.iter().all(|k| state.contributions.contains_key(k)),
                "knowledge lost entries: had {:?}, now {:?}",
                seen,
                state.contributions
            );
            seen = state.contributions.keys().cloned().collect();
            prop_assert!(state.started || !was_started, "started flag must latch");
            was_started = state.started;
            prop_assert!(
                state.aggregate >= last_aggregate,
                "aggregate shrank from {last_aggregate} to {}",
                state.aggregate
            );
            last_aggregate = state.aggregate;
            if result.solution_found {
                break;
            }
        }
    }

    #[test]
    fn prop_bridge_token_alternates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = random_scenario(&mut rng, false);
        cfg.mode = RunMode::NetsimInproc;
        let run = run_scenario(&cfg, &RunOptions::default()).unwrap();
        let trace = &run.report.protocol_trace;
        prop_assert!(trace.len() >= 2 && trace.len() % 2 == 0);
        prop_assert!(matches!(&trace[0].msg, ProtocolMessage::Initial(_)));
        prop_assert!(
            matches!(&trace[1].msg, ProtocolMessage::Sync(s) if s.kind == SyncKind::Waiting)
        );
        for (i, step) in trace.iter().enumerate() {
            prop_assert_eq!(
                step.from_netsim,
                i % 2 == 1,
                "token order break at index {}: {:?}",
                i,
                step
            );
            if step.from_netsim {
                prop_assert!(
                    !matches!(&step.msg, ProtocolMessage::Info(_) | ProtocolMessage::Infra(_)),
                    "netsim may only yield SYNC or DELIVERY"
                );
            } else {
                prop_assert!(
                    !matches!(&step.msg, ProtocolMessage::Delivery(_)),
                    "only netsim delivers messages"
                );
            }
        }
    }
}

fn prop_sum_lower_bound(network: &NetworkConfig, src_sim: &str, dst_sim: &str) -> SimTime {
    let mut adj: BTreeMap<&str, Vec<(&str, u64)>> = BTreeMap::new();
    for link in &network.links {
        adj.entry(link.a.as_str())
            .or_default()
            .push((link.b.as_str(), link.prop_delay_us));
        adj.entry(link.b.as_str())
            .or_default()
            .push((link.a.as_str(), link.prop_delay_us));
    }
    let src = network.client_binding[src_sim].as_str();
    let dst = network.client_binding[dst_sim].as_str();
    // Dijkstra by propagation sum; any real path also pays serialization and
    // queueing on top, so the cheapest propagation total is a valid floor.
    let mut dist: BTreeMap<&str, u64> = BTreeMap::from([(src, 0)]);
    let mut frontier = std::collections::BinaryHeap::from([(std::cmp::Reverse(0u64), src)]);
    while let Some((std::cmp::Reverse(d), node)) = frontier.pop() {
        if node == dst {
            return SimTime::from_micros(d);
        }
        if dist.get(node).is_some_and(|&best| d > best) {
            continue;
        }
        for (nbr, prop) in adj.get(node).cloned().unwrap_or_default() {
            let cand = d + prop;
            if dist.get(nbr).map_or(true, |&best| cand < best) {
                dist.insert(nbr, cand);
                frontier.push((std::cmp::Reverse(cand), nbr));
            }
        }
    }
    SimTime::ZERO
}

#[test]
fn criterion_10_property_suites_present() {
    // The five suites above each run 1000 randomized cases; this marker makes
    // the criterion visible in the pass/fail listing.
    pass(10, "property suites cover FES order, clocks, causality, knowledge, token");
}
