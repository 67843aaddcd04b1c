//! Transaction assigner: pending queue, reader-writer lock table over
//! wallets, and least-loaded channel selection under per-channel limits.
//!
//! Locks for a transaction are taken all at once, and only when every one of
//! them is free, so a transaction never waits while holding a lock. They are
//! released when the transaction reaches a terminal status in its channel.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AccessType, ChannelId, Transaction, TxId, TxStatus, WalletAddress};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AssignError {
    #[error("{0} is {1}, expected an analyzed transaction")]
    PipelineOrder(TxId, TxStatus),
    #[error("{0} released its locks twice")]
    DoubleRelease(TxId),
    #[error("{0} holds no locks")]
    NotHolding(TxId),
    #[error("lock table invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockState {
    Unlocked,
    ReadLocked(BTreeSet<TxId>),
    WriteLocked(TxId),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LockTable {
    locks: BTreeMap<WalletAddress, LockState>,
    exclusive_reads: bool,
}

impl LockTable {
    pub fn new(exclusive_reads: bool) -> Self {
        Self {
            locks: BTreeMap::new(),
            exclusive_reads,
        }
    }

    pub fn state(&self, wallet: &WalletAddress) -> &LockState {
        self.locks.get(wallet).unwrap_or(&LockState::Unlocked)
    }

    /// READ is blocked by a writer; WRITE is blocked by anyone. With
    /// `exclusive_reads` every lock blocks every access.
    pub fn is_locked(&self, wallet: &WalletAddress, access: AccessType) -> bool {
        match (self.state(wallet), access) {
            (LockState::Unlocked, _) => false,
            (LockState::WriteLocked(_), _) => true,
            (LockState::ReadLocked(_), AccessType::Write) => true,
            (LockState::ReadLocked(_), AccessType::Read) => self.exclusive_reads,
        }
    }

    pub fn can_lock(&self, reads: &[WalletAddress], writes: &[WalletAddress]) -> bool {
        reads.iter().all(|w| !self.is_locked(w, AccessType::Read))
            && writes.iter().all(|w| !self.is_locked(w, AccessType::Write))
    }

    fn lock(&mut self, tx: TxId, reads: &[WalletAddress], writes: &[WalletAddress]) {
        debug_assert!(self.can_lock(reads, writes));
        for w in reads {
            match self.locks.entry(w.clone()).or_insert(LockState::Unlocked) {
                LockState::ReadLocked(holders) => {
                    holders.insert(tx);
                }
                slot => *slot = LockState::ReadLocked(BTreeSet::from([tx])),
            }
        }
        for w in writes {
            self.locks.insert(w.clone(), LockState::WriteLocked(tx));
        }
    }

    fn unlock(&mut self, tx: TxId, reads: &[WalletAddress], writes: &[WalletAddress]) {
        for w in reads {
            if let Some(LockState::ReadLocked(holders)) = self.locks.get_mut(w) {
                holders.remove(&tx);
                if holders.is_empty() {
                    self.locks.remove(w);
                }
            }
        }
        for w in writes {
            if matches!(self.locks.get(w), Some(LockState::WriteLocked(h)) if *h == tx) {
                self.locks.remove(w);
            }
        }
    }

    pub fn held_count(&self) -> usize {
        self.locks.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.locks).expect("lock table serializes")
    }
}

/// FIFO of transactions waiting for locks or channel capacity.
#[derive(Debug, Clone, Default)]
pub struct PendingQueue {
    items: VecDeque<Transaction>,
    members: HashSet<TxId>,
}

impl PendingQueue {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.members.contains(&id)
    }

    pub fn ids(&self) -> Vec<TxId> {
        self.items.iter().map(|t| t.id).collect()
    }

    fn push(&mut self, tx: Transaction) {
        if self.members.insert(tx.id) {
            self.items.push_back(tx);
        }
    }

    fn remove_at(&mut self, idx: usize) -> Transaction {
        let tx = self.items.remove(idx).expect("index in range");
        self.members.remove(&tx.id);
        tx
    }

    fn remove_id(&mut self, id: TxId) -> Option<Transaction> {
        let idx = self.items.iter().position(|t| t.id == id)?;
        Some(self.remove_at(idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLoad {
    pub id: ChannelId,
    pub queue_limit: usize,
    pub in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignerConfig {
    pub channels: u32,
    pub queue_limit: usize,
    pub scan_window: usize,
    pub exclusive_read_locks: bool,
    pub trace: bool,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            queue_limit: 32,
            scan_window: 64,
            exclusive_read_locks: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assignment {
    Assigned(ChannelId, Transaction),
    Requeued,
    NoChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignEventKind {
    Assigned(ChannelId),
    Requeued,
    NoChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignEvent {
    pub tx: TxId,
    pub kind: AssignEventKind,
}

#[derive(Debug, Clone)]
struct Holding {
    channel: ChannelId,
    reads: Vec<WalletAddress>,
    writes: Vec<WalletAddress>,
}

/// Result of one background pass over the pending queue.
#[derive(Debug, Default)]
pub struct DrainResult {
    pub assigned: Vec<(ChannelId, Transaction)>,
    /// Transactions the admission check turned away; they hold no locks.
    pub rejected: Vec<Transaction>,
}

#[derive(Debug, Clone)]
pub struct TxAssigner {
    config: AssignerConfig,
    locks: LockTable,
    queue: PendingQueue,
    channels: Vec<ChannelLoad>,
    holdings: HashMap<TxId, Holding>,
    released: HashSet<TxId>,
    log: Vec<AssignEvent>,
}

impl TxAssigner {
    pub fn new(config: AssignerConfig) -> Self {
        let channels = (0..config.channels)
            .map(|i| ChannelLoad {
                id: ChannelId(i),
                queue_limit: config.queue_limit,
                in_flight: 0,
            })
            .collect();
        Self {
            locks: LockTable::new(config.exclusive_read_locks),
            queue: PendingQueue::default(),
            channels,
            holdings: HashMap::new(),
            released: HashSet::new(),
            log: Vec::new(),
            config,
        }
    }

    pub fn lock_table(&self) -> &LockTable {
        &self.locks
    }

    pub fn queue(&self) -> &PendingQueue {
        &self.queue
    }

    pub fn channels(&self) -> &[ChannelLoad] {
        &self.channels
    }

    pub fn events(&self) -> &[AssignEvent] {
        &self.log
    }

    pub fn holds_locks(&self, tx: TxId) -> bool {
        self.holdings.contains_key(&tx)
    }

    pub fn in_flight(&self) -> usize {
        self.holdings.len()
    }

    fn record(&mut self, tx: TxId, kind: AssignEventKind) {
        if self.config.trace {
            self.log.push(AssignEvent { tx, kind });
        }
    }

    /// Least-loaded channel with spare capacity, lowest index on ties.
    fn available_channel(&self) -> Option<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.in_flight < c.queue_limit)
            .min_by_key(|(i, c)| (c.in_flight, *i))
            .map(|(i, _)| i)
    }

    fn grant(&mut self, slot: usize, mut tx: Transaction) -> (ChannelId, Transaction) {
        let channel = self.channels[slot].id;
        self.locks.lock(tx.id, &tx.read_wallets, &tx.write_wallets);
        self.channels[slot].in_flight += 1;
        self.holdings.insert(
            tx.id,
            Holding {
                channel,
                reads: tx.read_wallets.clone(),
                writes: tx.write_wallets.clone(),
            },
        );
        tx.channel_id = Some(channel);
        tx.status = TxStatus::Ordering;
        self.record(tx.id, AssignEventKind::Assigned(channel));
        (channel, tx)
    }

    /// Try to hand `tx` to a channel right now.
    ///
    /// A transaction that cannot go stays in (or joins) the pending queue;
    /// the lock table is only touched on `Assigned`.
    pub fn assign_transaction(&mut self, tx: Transaction) -> Result<Assignment, AssignError> {
        if !matches!(tx.status, TxStatus::Analyzed | TxStatus::Queued) {
            return Err(AssignError::PipelineOrder(tx.id, tx.status));
        }
        let id = tx.id;
        if !self.locks.can_lock(&tx.read_wallets, &tx.write_wallets) {
            self.enqueue(tx);
            self.record(id, AssignEventKind::Requeued);
            return Ok(Assignment::Requeued);
        }
        let Some(slot) = self.available_channel() else {
            self.enqueue(tx);
            self.record(id, AssignEventKind::NoChannel);
            return Ok(Assignment::NoChannel);
        };
        let tx = self.queue.remove_id(id).unwrap_or(tx);
        let (channel, tx) = self.grant(slot, tx);
        Ok(Assignment::Assigned(channel, tx))
    }

    fn enqueue(&mut self, mut tx: Transaction) {
        if !self.queue.contains(tx.id) {
            tx.status = TxStatus::Queued;
            self.queue.push(tx);
        }
    }

    /// Add an analyzed transaction to the back of the pending queue without
    /// trying to assign it.
    pub fn submit(&mut self, tx: Transaction) -> Result<(), AssignError> {
        if !matches!(tx.status, TxStatus::Analyzed | TxStatus::Queued) {
            return Err(AssignError::PipelineOrder(tx.id, tx.status));
        }
        self.enqueue(tx);
        Ok(())
    }

    pub fn release_locks(&mut self, tx: TxId) -> Result<(), AssignError> {
        let Some(holding) = self.holdings.remove(&tx) else {
            return Err(if self.released.contains(&tx) {
                AssignError::DoubleRelease(tx)
            } else {
                AssignError::NotHolding(tx)
            });
        };
        self.locks.unlock(tx, &holding.reads, &holding.writes);
        let load = self
            .channels
            .iter_mut()
            .find(|c| c.id == holding.channel)
            .expect("holding names a known channel");
        load.in_flight -= 1;
        self.released.insert(tx);
        Ok(())
    }

    pub fn drain_queue(&mut self) -> usize {
        self.drain_queue_with(|_| true).assigned.len()
    }

    /// One pass over the first `scan_window` queue entries.
    ///
    /// Blocked entries keep their position. Wallets wanted by a blocked entry
    /// are reserved for the rest of the pass, so later entries cannot
    /// overtake it on the same wallet. `admit` runs after a transaction has
    /// qualified and before its locks are taken; returning `false` drops it.
    pub fn drain_queue_with(&mut self, mut admit: impl FnMut(&Transaction) -> bool) -> DrainResult {
        let mut result = DrainResult::default();
        let mut reserved_reads: HashSet<WalletAddress> = HashSet::new();
        let mut reserved_writes: HashSet<WalletAddress> = HashSet::new();
        let mut idx = 0;
        let mut scanned = 0;
        while idx < self.queue.len() && scanned < self.config.scan_window {
            scanned += 1;
            let tx = &self.queue.items[idx];
            let overtakes = tx
                .write_wallets
                .iter()
                .any(|w| reserved_writes.contains(w) || reserved_reads.contains(w))
                || tx.read_wallets.iter().any(|w| {
                    reserved_writes.contains(w) || (self.config.exclusive_read_locks && reserved_reads.contains(w))
                });
            if overtakes || !self.locks.can_lock(&tx.read_wallets, &tx.write_wallets) {
                reserved_reads.extend(tx.read_wallets.iter().cloned());
                reserved_writes.extend(tx.write_wallets.iter().cloned());
                let id = tx.id;
                self.record(id, AssignEventKind::Requeued);
                idx += 1;
                continue;
            }
            let Some(slot) = self.available_channel() else {
                let id = tx.id;
                self.record(id, AssignEventKind::NoChannel);
                break;
            };
            let tx = self.queue.remove_at(idx);
            if admit(&tx) {
                result.assigned.push(self.grant(slot, tx));
            } else {
                result.rejected.push(tx);
            }
        }
        result
    }

    /// Full consistency check of locks, holdings and channel loads.
    pub fn verify(&self) -> Result<(), AssignError> {
        let fail = |msg: String| Err(AssignError::Invariant(msg));
        for (id, h) in &self.holdings {
            for w in &h.writes {
                if self.locks.state(w) != &LockState::WriteLocked(*id) {
                    return fail(format!("{id} should write-lock {w}"));
                }
            }
            for w in &h.reads {
                match self.locks.state(w) {
                    LockState::ReadLocked(hs) if hs.contains(id) => {}
                    other => return fail(format!("{id} should read-lock {w}, found {other:?}")),
                }
            }
            if self.queue.contains(*id) {
                return fail(format!("{id} holds locks while queued"));
            }
        }
        for (w, state) in &self.locks.locks {
            match state {
                LockState::Unlocked => {}
                LockState::WriteLocked(h) => {
                    if !self.holdings.get(h).is_some_and(|x| x.writes.contains(w)) {
                        return fail(format!("{w} write-locked by non-holder {h}"));
                    }
                }
                LockState::ReadLocked(hs) => {
                    if hs.is_empty() {
                        return fail(format!("{w} read-locked with no holders"));
                    }
                    if self.locks.exclusive_reads && hs.len() > 1 {
                        return fail(format!("{w} shared under exclusive reads"));
                    }
                    for h in hs {
                        if !self.holdings.get(h).is_some_and(|x| x.reads.contains(w)) {
                            return fail(format!("{w} read-locked by non-holder {h}"));
                        }
                    }
                }
            }
        }
        for c in &self.channels {
            let held = self.holdings.values().filter(|h| h.channel == c.id).count();
            if held != c.in_flight || c.in_flight > c.queue_limit {
                return fail(format!(
                    "{} load {} (held {held}, limit {})",
                    c.id, c.in_flight, c.queue_limit
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> WalletAddress {
        WalletAddress::new(s)
    }

    fn analyzed(id: u64, reads: &[&str], writes: &[&str]) -> Transaction {
        let mut tx = Transaction::new(TxId(id), crate::ledger::TxType::Type1, vec![], 0);
        tx.read_wallets = reads.iter().map(|s| addr(s)).collect();
        tx.write_wallets = writes.iter().map(|s| addr(s)).collect();
        tx.status = TxStatus::Analyzed;
        tx
    }

    fn assigner(channels: u32, queue_limit: usize) -> TxAssigner {
        TxAssigner::new(AssignerConfig {
            channels,
            queue_limit,
            scan_window: 64,
            exclusive_read_locks: false,
            trace: true,
        })
    }

    /// Reference rule table for the reader-writer check.
    fn rule(state: &LockState, access: AccessType) -> bool {
        match state {
            LockState::Unlocked => false,
            LockState::WriteLocked(_) => true,
            LockState::ReadLocked(_) => access == AccessType::Write,
        }
    }

    #[test]
    fn unlocked_is_free() {
        let t = LockTable::new(false);
        assert!(!t.is_locked(&addr("W-A"), AccessType::Read));
        assert!(!t.is_locked(&addr("W-A"), AccessType::Write));
    }

    #[test]
    fn rw_lock_rules() {
        let mut t = LockTable::new(false);
        t.lock(TxId(1), &[], &[addr("W-A")]);
        t.lock(TxId(2), &[addr("W-C")], &[]);
        for (w, access) in [
            ("W-A", AccessType::Read),
            ("W-A", AccessType::Write),
            ("W-C", AccessType::Read),
            ("W-C", AccessType::Write),
        ] {
            assert_eq!(
                t.is_locked(&addr(w), access),
                rule(t.state(&addr(w)), access),
                "{w} {access:?}"
            );
        }
        assert!(t.is_locked(&addr("W-A"), AccessType::Read));
        assert!(!t.is_locked(&addr("W-C"), AccessType::Read));
    }

    #[test]
    fn exclusive_reads_block_readers() {
        let mut t = LockTable::new(true);
        t.lock(TxId(1), &[addr("W-C")], &[]);
        assert!(t.is_locked(&addr("W-C"), AccessType::Read));
    }

    #[test]
    fn unobstructed_assignment_takes_locks() {
        let mut a = assigner(2, 4);
        let out = a.assign_transaction(analyzed(1, &["W-C"], &["W-A"])).unwrap();
        let Assignment::Assigned(ch, tx) = out else {
            panic!("expected assignment")
        };
        assert_eq!(ch, ChannelId(0));
        assert_eq!(tx.channel_id, Some(ChannelId(0)));
        assert_eq!(tx.status, TxStatus::Ordering);
        assert_eq!(a.lock_table().state(&addr("W-A")), &LockState::WriteLocked(TxId(1)));
        assert_eq!(
            a.lock_table().state(&addr("W-C")),
            &LockState::ReadLocked(BTreeSet::from([TxId(1)]))
        );
        a.verify().unwrap();
    }

    #[test]
    fn write_locked_wallet_requeues() {
        let mut a = assigner(2, 4);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        let before = a.lock_table().to_json();
        assert_eq!(
            a.assign_transaction(analyzed(2, &[], &["W-A"])).unwrap(),
            Assignment::Requeued
        );
        assert_eq!(a.lock_table().to_json(), before);
        assert_eq!(a.queue().ids(), vec![TxId(2)]);
        // Pushing again does not duplicate.
        let mut again = analyzed(2, &[], &["W-A"]);
        again.status = TxStatus::Queued;
        assert_eq!(a.assign_transaction(again).unwrap(), Assignment::Requeued);
        assert_eq!(a.queue().len(), 1);
    }

    #[test]
    fn saturated_channels_give_no_channel() {
        let mut a = assigner(2, 1);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.assign_transaction(analyzed(2, &[], &["W-B"])).unwrap();
        let before = a.lock_table().to_json();
        assert_eq!(
            a.assign_transaction(analyzed(3, &[], &["W-C"])).unwrap(),
            Assignment::NoChannel
        );
        assert_eq!(a.lock_table().to_json(), before);
        assert!(a.queue().contains(TxId(3)));
        a.verify().unwrap();
    }

    #[test]
    fn least_loaded_channel_lowest_index() {
        let mut a = assigner(3, 4);
        let chans: Vec<_> = (1..=4)
            .map(
                |i| match a.assign_transaction(analyzed(i, &[], &[&format!("W-{i}")])).unwrap() {
                    Assignment::Assigned(c, _) => c.0,
                    other => panic!("{other:?}"),
                },
            )
            .collect();
        assert_eq!(chans, vec![0, 1, 2, 0]);
    }

    #[test]
    fn pipeline_order_enforced() {
        let mut a = assigner(1, 1);
        let mut tx = analyzed(1, &[], &["W-A"]);
        tx.status = TxStatus::Endorsed;
        assert_eq!(
            a.assign_transaction(tx),
            Err(AssignError::PipelineOrder(TxId(1), TxStatus::Endorsed))
        );
    }

    #[test]
    fn release_unlocks_writer() {
        let mut a = assigner(1, 4);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.release_locks(TxId(1)).unwrap();
        assert_eq!(a.lock_table().state(&addr("W-A")), &LockState::Unlocked);
        assert_eq!(a.channels()[0].in_flight, 0);
    }

    #[test]
    fn shared_readers_release_independently() {
        let mut a = assigner(1, 4);
        a.assign_transaction(analyzed(1, &["W-C"], &[])).unwrap();
        a.assign_transaction(analyzed(2, &["W-C"], &[])).unwrap();
        a.release_locks(TxId(1)).unwrap();
        assert_eq!(
            a.lock_table().state(&addr("W-C")),
            &LockState::ReadLocked(BTreeSet::from([TxId(2)]))
        );
        a.verify().unwrap();
    }

    #[test]
    fn double_release_is_an_error() {
        let mut a = assigner(1, 4);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.release_locks(TxId(1)).unwrap();
        assert_eq!(a.release_locks(TxId(1)), Err(AssignError::DoubleRelease(TxId(1))));
        assert_eq!(a.release_locks(TxId(9)), Err(AssignError::NotHolding(TxId(9))));
    }

    #[test]
    fn drain_skips_blocked_entry() {
        let mut a = assigner(2, 4);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.submit(analyzed(2, &[], &["W-A"])).unwrap();
        a.submit(analyzed(3, &[], &["W-B"])).unwrap();
        assert_eq!(a.drain_queue(), 1);
        assert_eq!(a.queue().ids(), vec![TxId(2)]);
        assert!(a.holds_locks(TxId(3)));
        a.verify().unwrap();
    }

    #[test]
    fn drain_empty_queue() {
        assert_eq!(assigner(1, 1).drain_queue(), 0);
    }

    #[test]
    fn drain_assigns_disjoint_batch() {
        let k = 5;
        let mut a = assigner(k as u32, 1);
        for i in 0..k {
            a.submit(analyzed(i, &[], &[&format!("W-{i}")])).unwrap();
        }
        assert_eq!(a.drain_queue(), k as usize);
        assert!(a.queue().is_empty());
        a.verify().unwrap();
    }

    #[test]
    fn blocked_entry_is_not_overtaken() {
        let mut a = assigner(2, 4);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        // tx2 waits on A and B; tx3 only needs B but must not jump ahead.
        a.submit(analyzed(2, &[], &["W-A", "W-B"])).unwrap();
        a.submit(analyzed(3, &[], &["W-B"])).unwrap();
        assert_eq!(a.drain_queue(), 0);
        a.release_locks(TxId(1)).unwrap();
        assert_eq!(a.drain_queue(), 1);
        assert!(a.holds_locks(TxId(2)));
        assert_eq!(a.queue().ids(), vec![TxId(3)]);
    }

    #[test]
    fn scan_window_bounds_the_pass() {
        let mut a = TxAssigner::new(AssignerConfig {
            channels: 1,
            queue_limit: 8,
            scan_window: 2,
            exclusive_read_locks: false,
            trace: false,
        });
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.submit(analyzed(2, &[], &["W-A"])).unwrap();
        a.submit(analyzed(3, &[], &["W-A"])).unwrap();
        a.submit(analyzed(4, &[], &["W-B"])).unwrap();
        assert_eq!(a.drain_queue(), 0);
    }

    #[test]
    fn admission_rejects_without_locking() {
        let mut a = assigner(1, 4);
        a.submit(analyzed(1, &[], &["W-A"])).unwrap();
        let res = a.drain_queue_with(|_| false);
        assert_eq!(res.rejected.len(), 1);
        assert_eq!(a.lock_table().held_count(), 0);
        assert!(a.queue().is_empty());
    }

    #[test]
    fn trace_log_records_events() {
        let mut a = assigner(1, 1);
        a.assign_transaction(analyzed(1, &[], &["W-A"])).unwrap();
        a.assign_transaction(analyzed(2, &[], &["W-A"])).unwrap();
        a.assign_transaction(analyzed(3, &[], &["W-B"])).unwrap();
        let kinds: Vec<_> = a.events().iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                AssignEventKind::Assigned(ChannelId(0)),
                AssignEventKind::Requeued,
                AssignEventKind::NoChannel
            ]
        );
    }
}
