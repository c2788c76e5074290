//! Python bindings for the co-simulation framework: scenario loading, runs in
//! all coupling modes, result rendering and a few direct helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use simbridge::agents::generate_overlay;
use simbridge::kernel::SimTime;
use simbridge::netsim::{DataRate, Link};
use simbridge::scenario::{
    export_results, load_scenario, parse_scenario, render_events_csv, render_states_json,
    render_stats_json, run_scenario, RunMode, RunOptions, ScenarioConfig, ScenarioRun,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<RunMode> {
    match mode {
        "ideal" => Ok(RunMode::Ideal),
        "netsim" | "netsim_inproc" => Ok(RunMode::NetsimInproc),
        "netsim_wire" => Ok(RunMode::NetsimWire),
        other => Err(value_err(format!("unknown mode {other:?}"))),
    }
}

fn mode_name(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Ideal => "ideal",
        RunMode::NetsimInproc => "netsim_inproc",
        RunMode::NetsimWire => "netsim_wire",
    }
}

/// A loaded, validated scenario configuration.
#[pyclass]
pub struct Scenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    /// Loads and validates a scenario JSON file.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Scenario {
            cfg: load_scenario(&path).map_err(value_err)?,
        })
    }

    /// Parses and validates a scenario from a JSON string.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Scenario {
            cfg: parse_scenario(text).map_err(value_err)?,
        })
    }

    #[getter]
    fn num_agents(&self) -> usize {
        self.cfg.num_agents
    }

    #[getter]
    fn until_us(&self) -> u64 {
        self.cfg.until_us
    }

    #[getter]
    fn threshold_w(&self) -> u64 {
        self.cfg.threshold_w
    }

    #[getter]
    fn mode(&self) -> &'static str {
        mode_name(self.cfg.mode)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.cfg).map_err(value_err)
    }

    /// Runs the scenario; mode and overlay seed can be overridden. Wire mode
    /// needs the simbridge binary on SIMBRIDGE_BIN.
    #[pyo3(signature = (mode=None, seed=None))]
    fn run(&self, mode: Option<&str>, seed: Option<u64>) -> PyResult<RunResult> {
        let mut cfg = self.cfg.clone();
        if let Some(mode) = mode {
            cfg.mode = parse_mode(mode)?;
        }
        if let Some(seed) = seed {
            cfg.overlay.seed = seed;
        }
        let mut opts = RunOptions::default();
        if cfg.mode == RunMode::NetsimWire {
            match std::env::var_os("SIMBRIDGE_BIN") {
                Some(path) => opts.netsim_exe = Some(PathBuf::from(path)),
                None => {
                    return Err(value_err(
                        "netsim_wire from python requires SIMBRIDGE_BIN to point at the simbridge binary",
                    ))
                }
            }
        }
        let run = run_scenario(&cfg, &opts).map_err(runtime_err)?;
        Ok(RunResult { run })
    }
}

/// Results of one completed run.
#[pyclass]
pub struct RunResult {
    run: ScenarioRun,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn termination_time_us(&self) -> Option<u64> {
        self.run.stats.termination_time_us
    }

    #[getter]
    fn messages_sent(&self) -> u64 {
        self.run.stats.messages_sent
    }

    #[getter]
    fn messages_delivered(&self) -> u64 {
        self.run.stats.messages_delivered
    }

    #[getter]
    fn messages_lost(&self) -> u64 {
        self.run.stats.messages_lost
    }

    /// Ids of agents whose aggregate reached the threshold.
    fn solved_agents(&self) -> Vec<String> {
        self.run.stats.solved_agents.keys().cloned().collect()
    }

    /// Final contribution maps of all agents.
    fn states(&self) -> BTreeMap<String, BTreeMap<String, u64>> {
        self.run
            .report
            .agent_states
            .iter()
            .map(|(id, s)| (id.clone(), s.contributions.clone()))
            .collect()
    }

    fn states_json(&self) -> String {
        render_states_json(&self.run.report)
    }

    fn stats_json(&self) -> String {
        render_stats_json(&self.run.stats)
    }

    fn events_csv(&self) -> String {
        render_events_csv(&self.run.report.trace)
    }

    /// Writes events.csv, stats.json and states.json into out_dir.
    fn write_outputs(&self, out_dir: PathBuf) -> PyResult<()> {
        export_results(&self.run, &out_dir).map_err(runtime_err)
    }
}

/// Generates the Watts-Strogatz overlay adjacency as {agent: [neighbors]}.
#[pyfunction]
fn overlay_adjacency(
    n: usize,
    k: usize,
    p: f64,
    seed: u64,
) -> PyResult<BTreeMap<String, Vec<String>>> {
    let overlay = generate_overlay(n, k, p, seed).map_err(value_err)?;
    Ok(overlay.adjacency)
}

/// Per-link transit time in microseconds for a payload of size_bytes;
/// data_rate_bps of None means an ideal link.
#[pyfunction]
#[pyo3(signature = (prop_delay_us, data_rate_bps, size_bytes))]
fn transmission_delay_us(prop_delay_us: u64, data_rate_bps: Option<u64>, size_bytes: u64) -> u64 {
    let link = Link {
        a: String::new(),
        b: String::new(),
        propagation_delay: SimTime::from_micros(prop_delay_us),
        data_rate: DataRate::from(data_rate_bps),
    };
    simbridge::netsim::transmission_delay(&link, size_bytes).as_micros()
}

#[pymodule]
fn simbridge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(overlay_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(transmission_delay_us, m)?)?;
    m.add("PROTOCOL_VERSION", simbridge::bridge::PROTOCOL_VERSION)?;
    Ok(())
}
