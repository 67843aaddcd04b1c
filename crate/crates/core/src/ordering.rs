//! Ordering stage building blocks: strategy selection, the reorder buffer in
//! front of each orderer, block cutting, and the serialized commit step.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{
    Block, ChannelId, FailCause, LedgerError, Tick, Transaction, TxId, TxType, Validation, WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TxClass {
    Read,
    Write,
    Update,
}

impl TxClass {
    /// Read-only requests are READ, record creation is WRITE, and anything
    /// that moves balances is UPDATE.
    pub fn of(tx: &Transaction) -> TxClass {
        if !tx.writes_anything() {
            TxClass::Read
        } else if tx.tx_type == TxType::WriteBaseline {
            TxClass::Write
        } else {
            TxClass::Update
        }
    }
}

fn default_priority() -> Vec<TxClass> {
    vec![TxClass::Read, TxClass::Write, TxClass::Update]
}

/// Scenario files may name Grouping bare, as `"Grouping"`, or with a
/// custom class order, as `{"Grouping": {"priority": [...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StrategyRepr")]
pub enum OrderingStrategy {
    DefaultFifo,
    Timestamping,
    Grouping {
        #[serde(default = "default_priority")]
        priority: Vec<TxClass>,
    },
    NaiveLocking,
    ConChainParallel,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StrategyRepr {
    Bare(BareStrategy),
    Grouping(GroupingRepr),
}

#[derive(Deserialize)]
enum BareStrategy {
    DefaultFifo,
    Timestamping,
    Grouping,
    NaiveLocking,
    ConChainParallel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
enum GroupingRepr {
    Grouping {
        #[serde(default = "default_priority")]
        priority: Vec<TxClass>,
    },
}

impl From<StrategyRepr> for OrderingStrategy {
    fn from(r: StrategyRepr) -> Self {
        match r {
            StrategyRepr::Bare(BareStrategy::DefaultFifo) => OrderingStrategy::DefaultFifo,
            StrategyRepr::Bare(BareStrategy::Timestamping) => OrderingStrategy::Timestamping,
            StrategyRepr::Bare(BareStrategy::Grouping) => OrderingStrategy::grouping(),
            StrategyRepr::Bare(BareStrategy::NaiveLocking) => OrderingStrategy::NaiveLocking,
            StrategyRepr::Bare(BareStrategy::ConChainParallel) => OrderingStrategy::ConChainParallel,
            StrategyRepr::Grouping(GroupingRepr::Grouping { priority }) => OrderingStrategy::Grouping { priority },
        }
    }
}

impl OrderingStrategy {
    pub fn grouping() -> Self {
        OrderingStrategy::Grouping {
            priority: default_priority(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OrderingStrategy::DefaultFifo => "DefaultFifo",
            OrderingStrategy::Timestamping => "Timestamping",
            OrderingStrategy::Grouping { .. } => "Grouping",
            OrderingStrategy::NaiveLocking => "NaiveLocking",
            OrderingStrategy::ConChainParallel => "ConChainParallel",
        }
    }

    pub fn uses_assigner(&self) -> bool {
        matches!(
            self,
            OrderingStrategy::NaiveLocking | OrderingStrategy::ConChainParallel
        )
    }

    pub fn default_dependency_manager(&self) -> bool {
        matches!(self, OrderingStrategy::ConChainParallel)
    }
}

impl fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SequencePolicy {
    Fifo,
    Timestamp,
    Priority(Vec<TxClass>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    id: TxId,
    arrival: Tick,
    timestamp: Tick,
    class: TxClass,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pop {
    Ready(TxId),
    WaitUntil(Tick),
    Empty,
}

/// Reorder buffer feeding one orderer.
///
/// The candidates are the head plus everything that arrived less than
/// `window` ticks after it. Nothing is released before the head has waited
/// the full window, then the best candidate under the policy goes first.
/// With `window == 0` this is plain FIFO.
#[derive(Debug, Clone)]
pub struct Sequencer {
    policy: SequencePolicy,
    window: Tick,
    entries: VecDeque<Entry>,
    next_seq: u64,
}

impl Sequencer {
    pub fn new(policy: SequencePolicy, window: Tick) -> Self {
        Self {
            policy,
            window,
            entries: VecDeque::new(),
            next_seq: 0,
        }
    }

    pub fn fifo() -> Self {
        Self::new(SequencePolicy::Fifo, 0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, tx: &Transaction, arrival: Tick) {
        self.entries.push_back(Entry {
            id: tx.id,
            arrival,
            timestamp: tx.timestamp,
            class: TxClass::of(tx),
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    fn rank(&self, class: TxClass) -> usize {
        match &self.policy {
            SequencePolicy::Priority(order) => order.iter().position(|c| *c == class).unwrap_or(order.len()),
            _ => 0,
        }
    }

    pub fn pop_ready(&mut self, now: Tick) -> Pop {
        let Some(head) = self.entries.front() else {
            return Pop::Empty;
        };
        if self.policy == SequencePolicy::Fifo || self.window == 0 {
            return Pop::Ready(self.entries.pop_front().unwrap().id);
        }
        let horizon = head.arrival + self.window;
        if now < horizon {
            return Pop::WaitUntil(horizon);
        }
        let candidates = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| *i == 0 || e.arrival < horizon);
        let best = match &self.policy {
            SequencePolicy::Timestamp => candidates.min_by_key(|(_, e)| (e.timestamp, e.id)),
            _ => candidates.min_by_key(|(_, e)| (self.rank(e.class), e.seq)),
        };
        let idx = best.expect("head is always a candidate").0;
        Pop::Ready(self.entries.remove(idx).unwrap().id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutAction {
    None,
    ArmTimer { at: Tick, generation: u64 },
    Cut(Vec<TxId>),
}

/// Cuts a batch at `block_size` transactions or `batch_timeout` ticks after
/// the first transaction of the batch, whichever comes first.
#[derive(Debug, Clone)]
pub struct BlockCutter {
    block_size: usize,
    batch_timeout: Tick,
    batch: Vec<TxId>,
    generation: u64,
}

impl BlockCutter {
    pub fn new(block_size: usize, batch_timeout: Tick) -> Self {
        assert!(block_size > 0, "block size must be positive");
        Self {
            block_size,
            batch_timeout,
            batch: Vec::new(),
            generation: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.batch.len()
    }

    pub fn push(&mut self, id: TxId, now: Tick) -> CutAction {
        self.batch.push(id);
        if self.batch.len() >= self.block_size {
            self.generation += 1;
            return CutAction::Cut(std::mem::take(&mut self.batch));
        }
        if self.batch.len() == 1 {
            return CutAction::ArmTimer {
                at: now + self.batch_timeout,
                generation: self.generation,
            };
        }
        CutAction::None
    }

    /// A timer armed for an older batch is ignored.
    pub fn on_timer(&mut self, generation: u64) -> Option<Vec<TxId>> {
        if generation != self.generation || self.batch.is_empty() {
            return None;
        }
        self.generation += 1;
        Some(std::mem::take(&mut self.batch))
    }
}

/// Blocks from every channel waiting for the single committer, served in
/// `(cut_time, channel)` order.
#[derive(Debug, Clone, Default)]
pub struct CommitSerializer {
    pending: BTreeMap<(Tick, ChannelId, u64), Vec<TxId>>,
    next_seq: u64,
}

impl CommitSerializer {
    pub fn push(&mut self, cut_time: Tick, channel: ChannelId, txs: Vec<TxId>) {
        self.pending.insert((cut_time, channel, self.next_seq), txs);
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<(Tick, ChannelId, Vec<TxId>)> {
        self.pending.pop_first().map(|((cut, ch, _), txs)| (cut, ch, txs))
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxOutcome {
    Committed,
    Failed(FailCause),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitError {
    #[error("block {got} arrived while the ledger is at height {height}")]
    OutOfOrderBlock { got: u64, height: u64 },
}

/// Validate and apply one block. Transactions are checked in block order
/// against the state as updated by the earlier ones.
pub fn commit_block(block: &Block, state: &mut WorldState) -> Result<Vec<TxOutcome>, CommitError> {
    if block.height != state.height + 1 {
        return Err(CommitError::OutOfOrderBlock {
            got: block.height,
            height: state.height,
        });
    }
    let outcomes = block
        .txs
        .iter()
        .map(|btx| match state.validate_read_set(&btx.rwset) {
            Err(LedgerError::UnknownAddress(_) | LedgerError::MalformedAddress(_)) => {
                TxOutcome::Failed(FailCause::UnknownAddress)
            }
            Ok(Validation::Stale(_)) => TxOutcome::Failed(FailCause::Stale),
            Ok(Validation::Valid) => {
                let blocked = btx
                    .rwset
                    .writes
                    .iter()
                    .any(|w| state.wallet(&w.addr).is_some_and(|x| !x.available));
                if blocked {
                    TxOutcome::Failed(FailCause::Unavailable)
                } else {
                    state.apply_write_set(&btx.rwset);
                    TxOutcome::Committed
                }
            }
        })
        .collect();
    state.height = block.height;
    Ok(outcomes)
}

/// Offline view of one sequencer + cutter with instantaneous ordering:
/// `(transaction, arrival tick)` in arrival order in, blocks out.
pub fn sequence_offline(
    mut seq: Sequencer,
    block_size: usize,
    batch_timeout: Tick,
    arrivals: &[(Transaction, Tick)],
) -> Vec<Vec<TxId>> {
    let mut cutter = BlockCutter::new(block_size, batch_timeout);
    let mut blocks = Vec::new();
    let mut timer: Option<(Tick, u64)> = None;
    let mut next = 0;
    let mut now = 0;
    loop {
        while next < arrivals.len() && arrivals[next].1 <= now {
            seq.push(&arrivals[next].0, arrivals[next].1);
            next += 1;
        }
        if let Some((at, generation)) = timer {
            if at <= now {
                timer = None;
                if let Some(b) = cutter.on_timer(generation) {
                    blocks.push(b);
                }
            }
        }
        let mut wake = None;
        loop {
            match seq.pop_ready(now) {
                Pop::Ready(id) => match cutter.push(id, now) {
                    CutAction::Cut(b) => blocks.push(b),
                    CutAction::ArmTimer { at, generation } => timer = Some((at, generation)),
                    CutAction::None => {}
                },
                Pop::WaitUntil(t) => {
                    wake = Some(t);
                    break;
                }
                Pop::Empty => break,
            }
        }
        let candidates = [arrivals.get(next).map(|a| a.1), timer.map(|t| t.0), wake];
        match candidates.into_iter().flatten().min() {
            Some(t) => now = t.max(now),
            None => break,
        }
    }
    blocks
}
