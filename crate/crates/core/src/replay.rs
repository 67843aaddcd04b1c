//! Sequential replay oracle: re-execute every committed transaction from
//! genesis, one at a time, and compare with what the simulator recorded.

use thiserror::Error;

use crate::endorsement::execute_speculatively;
use crate::io::BlockStreamRecord;
use crate::ledger::{TxId, WorldState};
use crate::ordering::TxOutcome;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplayError {
    #[error("block stream does not start with a genesis record")]
    MissingGenesis,
    #[error("block {height} follows height {previous}")]
    HeightGap { previous: u64, height: u64 },
    #[error("block {height}: {outcomes} outcomes for {txs} transactions")]
    OutcomeCount { height: u64, outcomes: usize, txs: usize },
    #[error("block {height}, {tx}: {detail}")]
    Divergence { height: u64, tx: TxId, detail: String },
    #[error("final state differs: {0}")]
    FinalState(String),
}

/// Replay a block stream and return the resulting state. An empty stream
/// replays to the empty state.
pub fn replay(records: &[BlockStreamRecord]) -> Result<WorldState, ReplayError> {
    let mut iter = records.iter();
    let mut state = match iter.next() {
        None => return Ok(WorldState::default()),
        Some(BlockStreamRecord::Genesis { state }) => state.clone(),
        Some(_) => return Err(ReplayError::MissingGenesis),
    };
    for rec in iter {
        match rec {
            BlockStreamRecord::Genesis { .. } => return Err(ReplayError::MissingGenesis),
            BlockStreamRecord::Availability { wallets } => {
                for (addr, available) in wallets {
                    let _ = state.set_available(addr, *available);
                }
            }
            BlockStreamRecord::Block(cb) => {
                let height = cb.block.height;
                if height != state.height + 1 {
                    return Err(ReplayError::HeightGap {
                        previous: state.height,
                        height,
                    });
                }
                if cb.outcomes.len() != cb.block.txs.len() {
                    return Err(ReplayError::OutcomeCount {
                        height,
                        outcomes: cb.outcomes.len(),
                        txs: cb.block.txs.len(),
                    });
                }
                for (addr, available) in &cb.availability {
                    let _ = state.set_available(addr, *available);
                }
                for (btx, outcome) in cb.block.txs.iter().zip(&cb.outcomes) {
                    if *outcome != TxOutcome::Committed {
                        continue;
                    }
                    let diverge = |detail: String| ReplayError::Divergence {
                        height,
                        tx: btx.tx.id,
                        detail,
                    };
                    let rw = execute_speculatively(&btx.tx, &state)
                        .map_err(|e| diverge(format!("re-execution failed: {e}")))?;
                    if rw.writes != btx.rwset.writes {
                        return Err(diverge(format!(
                            "recomputed writes {:?} differ from recorded {:?}",
                            rw.writes, btx.rwset.writes
                        )));
                    }
                    if rw.reads != btx.rwset.reads {
                        return Err(diverge(format!(
                            "recomputed reads {:?} differ from recorded {:?}",
                            rw.reads, btx.rwset.reads
                        )));
                    }
                    state.apply_write_set(&rw);
                }
                state.height = height;
            }
        }
    }
    Ok(state)
}

/// First field-level difference between two states, if any.
pub fn first_difference(expected: &WorldState, actual: &WorldState) -> Option<String> {
    if expected.height != actual.height {
        return Some(format!("height {} vs {}", expected.height, actual.height));
    }
    for (addr, w) in &expected.wallets {
        match actual.wallet(addr) {
            None => return Some(format!("{addr} missing from replay")),
            Some(r) if r != w => return Some(format!("{addr}: recorded {w:?}, replayed {r:?}")),
            _ => {}
        }
    }
    actual
        .wallets
        .keys()
        .find(|a| !expected.contains(a))
        .map(|a| format!("{a} only present in replay"))
}

/// Replay and require the result to equal `recorded` field for field.
pub fn verify(records: &[BlockStreamRecord], recorded: &WorldState) -> Result<WorldState, ReplayError> {
    let state = replay(records)?;
    match first_difference(recorded, &state) {
        Some(d) => Err(ReplayError::FinalState(d)),
        None => Ok(state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run;
    use crate::io::block_stream;
    use crate::ledger::TxType;
    use crate::ordering::OrderingStrategy;
    use crate::scenario::ScenarioConfig;
    use crate::workload::WorkloadConfig;

    fn stream(strategy: OrderingStrategy) -> (Vec<BlockStreamRecord>, WorldState) {
        let cfg = ScenarioConfig::new(
            2,
            WorkloadConfig::with_counts(7, &TxType::ALL.map(|t| (t, 15))),
            strategy,
        );
        let out = run(&cfg).unwrap();
        (block_stream(&out), out.final_state)
    }

    #[test]
    fn passing_run_replays() {
        for s in [OrderingStrategy::DefaultFifo, OrderingStrategy::ConChainParallel] {
            let (records, fin) = stream(s);
            assert_eq!(verify(&records, &fin).unwrap(), fin);
        }
    }

    #[test]
    fn edited_balance_diverges() {
        let (mut records, fin) = stream(OrderingStrategy::DefaultFifo);
        let target = records
            .iter_mut()
            .find_map(|r| match r {
                BlockStreamRecord::Block(cb) => cb
                    .block
                    .txs
                    .iter_mut()
                    .zip(&cb.outcomes)
                    .find(|(b, o)| **o == TxOutcome::Committed && !b.rwset.writes.is_empty())
                    .map(|(b, _)| b),
                _ => None,
            })
            .expect("some committed write");
        target.rwset.writes[0].balance += 1;
        assert!(matches!(verify(&records, &fin), Err(ReplayError::Divergence { .. })));
    }

    #[test]
    fn genesis_only_stream() {
        let (records, _) = stream(OrderingStrategy::DefaultFifo);
        let genesis = vec![records[0].clone()];
        let BlockStreamRecord::Genesis { state } = &records[0] else {
            panic!()
        };
        assert_eq!(replay(&genesis).unwrap(), *state);
        assert_eq!(replay(&[]).unwrap(), WorldState::default());
    }

    #[test]
    fn edited_final_state_detected() {
        let (records, mut fin) = stream(OrderingStrategy::ConChainParallel);
        let w = fin.wallets.values_mut().next().unwrap();
        w.balance += 5;
        assert!(matches!(verify(&records, &fin), Err(ReplayError::FinalState(_))));
    }
}
