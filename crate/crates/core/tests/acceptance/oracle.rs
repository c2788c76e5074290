//! Independent reference simulation used to pin expected outcomes.
//!
//! Deliberately simple and separate from the engine: period-level dynamics,
//! per-pair delays as plain propagation sums over the (tree-shaped) physical
//! network, losses decided at send time from the disconnect schedule. Shares
//! only the scenario definitions with the main implementation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use simbridge::netsim::ChangeAction;
use simbridge::scenario::{RunMode, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub termination_time_us: Option<u64>,
    pub solved: BTreeMap<String, BTreeMap<String, u64>>,
    pub all: BTreeMap<String, BTreeMap<String, u64>>,
}

struct OracleAgent {
    id: String,
    device: u64,
    started: bool,
    contributions: BTreeMap<String, u64>,
    last_acted: Option<BTreeMap<String, u64>>,
    solved: bool,
}

struct SentMessage {
    dst: String,
    arrive_us: u64,
    payload: BTreeMap<String, u64>,
    consumed: bool,
}

/// Propagation-sum delay between two bound simulators, by breadth-first
/// search over the link list.
fn pair_delay_us(cfg: &ScenarioConfig, src: &str, dst: &str) -> u64 {
    let network = cfg.network.as_ref().expect("oracle needs a network");
    let mut adj: BTreeMap<&str, Vec<(&str, u64)>> = BTreeMap::new();
    for link in &network.links {
        adj.entry(link.a.as_str())
            .or_default()
            .push((link.b.as_str(), link.prop_delay_us));
        adj.entry(link.b.as_str())
            .or_default()
            .push((link.a.as_str(), link.prop_delay_us));
    }
    let src_node = network.client_binding.get(src).expect("bound").as_str();
    let dst_node = network.client_binding.get(dst).expect("bound").as_str();
    let mut dist: BTreeMap<&str, u64> = BTreeMap::new();
    dist.insert(src_node, 0);
    let mut queue = VecDeque::from([src_node]);
    while let Some(node) = queue.pop_front() {
        let d = dist[node];
        if node == dst_node {
            return d;
        }
        for (nbr, prop) in adj.get(node).cloned().unwrap_or_default() {
            dist.entry(nbr).or_insert_with(|| {
                queue.push_back(nbr);
                d + prop
            });
        }
    }
    panic!("no path between {src} and {dst}");
}

fn node_disconnected(cfg: &ScenarioConfig, node: &str, at_us: u64) -> bool {
    let mut changes: Vec<_> = cfg
        .infrastructure_changes
        .iter()
        .filter(|c| c.node == node && c.at_us <= at_us)
        .collect();
    changes.sort_by_key(|c| c.at_us);
    matches!(
        changes.last().map(|c| c.action),
        Some(ChangeAction::Disconnect)
    )
}

/// Lost if either endpoint's node is disconnected when the message departs.
/// (Canonical scenarios only ever disconnect leaf client nodes, so endpoint
/// checks fully determine reachability.)
fn message_lost(cfg: &ScenarioConfig, src: &str, dst: &str, sent_us: u64) -> bool {
    let network = cfg.network.as_ref().expect("oracle needs a network");
    let src_node = network.client_binding.get(src).expect("bound");
    let dst_node = network.client_binding.get(dst).expect("bound");
    node_disconnected(cfg, src_node, sent_us) || node_disconnected(cfg, dst_node, sent_us)
}

pub fn simulate(cfg: &ScenarioConfig, adjacency: &BTreeMap<String, Vec<String>>) -> Outcome {
    let zero_delay = cfg.mode == RunMode::Ideal;
    let mut agents: BTreeMap<String, OracleAgent> = (0..cfg.num_agents)
        .map(|i| {
            let id = format!("client{i}");
            let device = cfg.power_fixture[&id];
            let agent = OracleAgent {
                started: id == cfg.initiator,
                id: id.clone(),
                device,
                contributions: BTreeMap::new(),
                last_acted: None,
                solved: false,
            };
            (id, agent)
        })
        .collect();
    let mut messages: Vec<SentMessage> = Vec::new();
    let mut termination: Option<u64> = None;

    let wp = cfg.waiting_period_us;
    let mut now = wp;
    while now <= cfg.until_us && termination.is_none() {
        let mut outgoing: Vec<(String, BTreeMap<String, u64>)> = Vec::new();
        let mut any_solved = false;
        for agent in agents.values_mut() {
            if agent.solved {
                continue;
            }
            let mut consumed: Vec<BTreeMap<String, u64>> = Vec::new();
            for msg in messages.iter_mut() {
                if !msg.consumed && msg.dst == agent.id && msg.arrive_us < now {
                    msg.consumed = true;
                    consumed.push(msg.payload.clone());
                }
            }
            if !consumed.is_empty() {
                agent.started = true;
            }
            if !agent.started {
                continue;
            }
            for payload in consumed {
                for (id, watts) in payload {
                    agent.contributions.insert(id, watts);
                }
            }
            agent
                .contributions
                .entry(agent.id.clone())
                .or_insert(agent.device);
            let aggregate: u64 = agent.contributions.values().sum();
            if aggregate >= cfg.threshold_w {
                agent.solved = true;
                any_solved = true;
                continue;
            }
            if agent.last_acted.as_ref() != Some(&agent.contributions) {
                outgoing.push((agent.id.clone(), agent.contributions.clone()));
                agent.last_acted = Some(agent.contributions.clone());
            }
        }
        for (sender, payload) in outgoing {
            for nbr in &adjacency[&sender] {
                if !zero_delay && message_lost(cfg, &sender, nbr, now) {
                    continue;
                }
                let delay = if zero_delay {
                    0
                } else {
                    pair_delay_us(cfg, &sender, nbr)
                };
                messages.push(SentMessage {
                    dst: nbr.clone(),
                    arrive_us: now + delay,
                    payload: payload.clone(),
                    consumed: false,
                });
            }
        }
        if any_solved {
            termination = Some(now);
        }
        now += wp;
    }

    let all: BTreeMap<String, BTreeMap<String, u64>> = agents
        .values()
        .map(|a| (a.id.clone(), a.contributions.clone()))
        .collect();
    let solved: BTreeMap<String, BTreeMap<String, u64>> = agents
        .values()
        .filter(|a| a.solved)
        .map(|a| (a.id.clone(), a.contributions.clone()))
        .collect();
    let started_check: BTreeSet<&String> = agents
        .values()
        .filter(|a| a.started)
        .map(|a| &a.id)
        .collect();
    for (id, contributions) in &all {
        assert_eq!(
            started_check.contains(id),
            !contributions.is_empty(),
            "started flag must match non-empty knowledge for {id}"
        );
    }
    Outcome {
        termination_time_us: termination,
        solved,
        all,
    }
}
