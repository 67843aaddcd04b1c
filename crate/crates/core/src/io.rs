//! JSON Lines export and import for traces and block streams.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CommittedBlock, SimulationOutput, SimulationTrace};
use crate::ledger::{WalletAddress, WorldState};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of `blocks.jsonl`: the genesis state, then every committed block
/// in height order, then the final wallet availability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BlockStreamRecord {
    Genesis { state: WorldState },
    Block(CommittedBlock),
    Availability { wallets: BTreeMap<WalletAddress, bool> },
}

pub fn write_jsonl<T: Serialize, W: Write>(items: impl IntoIterator<Item = T>, mut out: W) -> Result<(), IoError> {
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(|source| IoError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| IoError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(trace: &SimulationTrace, out: W) -> Result<(), IoError> {
    write_jsonl(&trace.records, out)
}

pub fn read_trace<R: BufRead>(input: R) -> Result<SimulationTrace, IoError> {
    Ok(SimulationTrace {
        records: read_jsonl(input)?,
    })
}

pub fn block_stream(output: &SimulationOutput) -> Vec<BlockStreamRecord> {
    let mut records = Vec::with_capacity(output.blocks.len() + 2);
    records.push(BlockStreamRecord::Genesis {
        state: output.genesis.clone(),
    });
    records.extend(output.blocks.iter().cloned().map(BlockStreamRecord::Block));
    records.push(BlockStreamRecord::Availability {
        wallets: output
            .final_state
            .wallets
            .iter()
            .map(|(a, w)| (a.clone(), w.available))
            .collect(),
    });
    records
}

pub fn write_blocks<W: Write>(output: &SimulationOutput, out: W) -> Result<(), IoError> {
    write_jsonl(block_stream(output), out)
}

pub fn read_blocks<R: BufRead>(input: R) -> Result<Vec<BlockStreamRecord>, IoError> {
    read_jsonl(input)
}
