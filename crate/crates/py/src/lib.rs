//! Python module `txsim`. Everything crosses the boundary as JSON text, the
//! same formats the command-line tool reads and writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use txsim_core::engine::run;
use txsim_core::io::{block_stream, read_blocks, read_trace, write_jsonl, write_trace};
use txsim_core::ledger::WorldState;
use txsim_core::metrics::{compare_reports, compute_metrics, MetricsReport};
use txsim_core::replay;
use txsim_core::scenario::ScenarioConfig;
use txsim_core::workload::{generate_workload, write_workload_jsonl, WorkloadConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn utf8(buf: Vec<u8>) -> String {
    String::from_utf8(buf).expect("JSON output is UTF-8")
}

/// Run a scenario and return `(report_json, trace_jsonl, blocks_jsonl, final_state_json)`.
#[pyfunction]
fn run_scenario(config_json: &str) -> PyResult<(String, String, String, String)> {
    let cfg = ScenarioConfig::from_json(config_json).map_err(value_err)?;
    let out = run(&cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut report = compute_metrics(&out.trace, cfg.strategy.name()).map_err(value_err)?;
    report.workload = Some(serde_json::to_string(&cfg.workload).map_err(value_err)?);
    let mut trace = Vec::new();
    write_trace(&out.trace, &mut trace).map_err(value_err)?;
    let mut blocks = Vec::new();
    write_jsonl(block_stream(&out), &mut blocks).map_err(value_err)?;
    Ok((report.to_json(), utf8(trace), utf8(blocks), out.final_state.to_json()))
}

/// Generate a workload and return it as JSON Lines.
#[pyfunction]
fn generate(workload_json: &str) -> PyResult<String> {
    let cfg: WorkloadConfig = serde_json::from_str(workload_json).map_err(value_err)?;
    cfg.validate().map_err(value_err)?;
    let txs = generate_workload(&cfg).map_err(value_err)?;
    let mut buf = Vec::new();
    write_workload_jsonl(&txs, &mut buf).map_err(value_err)?;
    Ok(utf8(buf))
}

/// Recompute a report from an exported trace.
#[pyfunction]
#[pyo3(signature = (trace_jsonl, strategy = "unknown"))]
fn metrics(trace_jsonl: &str, strategy: &str) -> PyResult<String> {
    let trace = read_trace(trace_jsonl.as_bytes()).map_err(value_err)?;
    Ok(compute_metrics(&trace, strategy).map_err(value_err)?.to_json())
}

/// Comparison table CSV for several report JSON documents.
#[pyfunction]
fn compare(reports: Vec<String>) -> PyResult<String> {
    let parsed = reports
        .iter()
        .map(|r| serde_json::from_str::<MetricsReport>(r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let table = compare_reports(&parsed).map_err(value_err)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).map_err(value_err)?;
    Ok(utf8(buf))
}

/// Replay a block stream; returns the replayed state as JSON and raises
/// `ValueError` on the first divergence.
#[pyfunction]
#[pyo3(signature = (blocks_jsonl, final_state_json = None))]
fn replay_blocks(blocks_jsonl: &str, final_state_json: Option<&str>) -> PyResult<String> {
    let records = read_blocks(blocks_jsonl.as_bytes()).map_err(value_err)?;
    let state = match final_state_json {
        Some(s) => {
            let recorded: WorldState = serde_json::from_str(s).map_err(value_err)?;
            replay::verify(&records, &recorded)
        }
        None => replay::replay(&records),
    }
    .map_err(value_err)?;
    Ok(state.to_json())
}

#[pymodule]
fn txsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(replay_blocks, m)?)?;
    Ok(())
}
