//! Domain types shared by every pipeline stage, and the versioned world state.
//!
//! The world state is a flat map from wallet address to `(balance, version,
//! available)`. Versions are per-wallet commit counters: a wallet starts at
//! version 1 and every committed write bumps it by exactly one. A read set
//! records the versions a transaction observed; commit-time validation
//! compares them against the current state (MVCC).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time, 1 tick = 1 ms.
pub type Tick = u64;

/// Version recorded for a read of a wallet that does not exist.
pub const ABSENT_VERSION: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelId(pub u32);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown wallet address {0}")]
    UnknownAddress(WalletAddress),
    #[error("malformed wallet address {0:?}")]
    MalformedAddress(String),
}

/// Opaque wallet identifier such as `W-A`.
///
/// Addresses arriving from clients are not trusted: [`WalletAddress::new`]
/// accepts any string so that malformed requests can be represented and
/// rejected downstream. Use [`WalletAddress::parse`] where the grammar
/// `W-[A-Za-z0-9]+` must hold.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WalletAddress(String);

impl WalletAddress {
    pub fn new(raw: impl Into<String>) -> Self {
        Self(raw.into())
    }

    pub fn parse(raw: impl Into<String>) -> Result<Self, LedgerError> {
        let addr = Self(raw.into());
        if addr.is_well_formed() {
            Ok(addr)
        } else {
            Err(LedgerError::MalformedAddress(addr.0))
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match self.0.strip_prefix("W-") {
            Some(rest) => !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_alphanumeric()),
            None => false,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WalletAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for WalletAddress {
    fn from(raw: &str) -> Self {
        Self::new(raw)
    }
}

/// Committed state of one wallet. The address is the key in [`WorldState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wallet {
    pub balance: u64,
    pub version: u64,
    pub available: bool,
}

impl Wallet {
    pub fn new(balance: u64) -> Self {
        Self {
            balance,
            version: 1,
            available: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AccessType {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxType {
    ReadBaseline,
    WriteBaseline,
    UpdateBaseline,
    Type1,
    Type2,
    Type3,
    Type4,
    Type5,
    Type6,
}

impl TxType {
    pub const ALL: [TxType; 9] = [
        TxType::ReadBaseline,
        TxType::WriteBaseline,
        TxType::UpdateBaseline,
        TxType::Type1,
        TxType::Type2,
        TxType::Type3,
        TxType::Type4,
        TxType::Type5,
        TxType::Type6,
    ];

    pub const CONTENTION: [TxType; 6] = [
        TxType::Type1,
        TxType::Type2,
        TxType::Type3,
        TxType::Type4,
        TxType::Type5,
        TxType::Type6,
    ];

    pub fn is_contention(self) -> bool {
        !matches!(
            self,
            TxType::ReadBaseline | TxType::WriteBaseline | TxType::UpdateBaseline
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TxType::ReadBaseline => "ReadBaseline",
            TxType::WriteBaseline => "WriteBaseline",
            TxType::UpdateBaseline => "UpdateBaseline",
            TxType::Type1 => "Type1",
            TxType::Type2 => "Type2",
            TxType::Type3 => "Type3",
            TxType::Type4 => "Type4",
            TxType::Type5 => "Type5",
            TxType::Type6 => "Type6",
        }
    }
}

impl fmt::Display for TxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One wallet reference inside a transaction.
///
/// `amount` is a signed delta: negative debits the wallet, positive credits
/// it, zero with `Write` access rewrites the record unchanged and zero with
/// `Read` access is a plain balance query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub addr: WalletAddress,
    pub access: AccessType,
    pub amount: i64,
}

impl Operand {
    pub fn read(addr: impl Into<WalletAddress>) -> Self {
        Self {
            addr: addr.into(),
            access: AccessType::Read,
            amount: 0,
        }
    }

    pub fn debit(addr: impl Into<WalletAddress>, amount: u64) -> Self {
        Self {
            addr: addr.into(),
            access: AccessType::Write,
            amount: -(amount as i64),
        }
    }

    pub fn credit(addr: impl Into<WalletAddress>, amount: u64) -> Self {
        Self {
            addr: addr.into(),
            access: AccessType::Write,
            amount: amount as i64,
        }
    }

    pub fn touch(addr: impl Into<WalletAddress>) -> Self {
        Self {
            addr: addr.into(),
            access: AccessType::Write,
            amount: 0,
        }
    }
}

impl From<String> for WalletAddress {
    fn from(raw: String) -> Self {
        Self::new(raw)
    }
}

impl From<&WalletAddress> for WalletAddress {
    fn from(addr: &WalletAddress) -> Self {
        addr.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    Endorsed,
    Analyzed,
    Queued,
    Ordering,
    Committed,
    Failed,
    Discarded,
}

impl TxStatus {
    fn rank(self) -> u8 {
        match self {
            TxStatus::Pending => 0,
            TxStatus::Endorsed => 1,
            TxStatus::Analyzed => 2,
            TxStatus::Queued => 3,
            TxStatus::Ordering => 4,
            TxStatus::Committed | TxStatus::Failed | TxStatus::Discarded => 5,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 5
    }

    /// Statuses only move forward along the pipeline; terminal states are final.
    pub fn can_transition_to(self, next: TxStatus) -> bool {
        !self.is_terminal() && next.rank() > self.rank()
    }
}

impl fmt::Display for TxStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Why a transaction ended in `Failed` or `Discarded`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailCause {
    Overdraft,
    Unavailable,
    Stale,
    Discarded,
    Rejected,
    UnknownAddress,
}

impl FailCause {
    pub const ALL: [FailCause; 6] = [
        FailCause::Overdraft,
        FailCause::Unavailable,
        FailCause::Stale,
        FailCause::Discarded,
        FailCause::Rejected,
        FailCause::UnknownAddress,
    ];
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{tx} cannot move from {from} to {to}")]
pub struct StatusError {
    pub tx: TxId,
    pub from: TxStatus,
    pub to: TxStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transaction {
    pub id: TxId,
    pub tx_type: TxType,
    pub operands: Vec<Operand>,
    pub submit_time: Tick,
    pub timestamp: Tick,
    /// The other half of a correlated pair (Type 2 query and its transfer).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companion: Option<TxId>,
    #[serde(default)]
    pub read_wallets: Vec<WalletAddress>,
    #[serde(default)]
    pub write_wallets: Vec<WalletAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_id: Option<ChannelId>,
    pub status: TxStatus,
}

impl Transaction {
    pub fn new(id: TxId, tx_type: TxType, operands: Vec<Operand>, submit_time: Tick) -> Self {
        Self {
            id,
            tx_type,
            operands,
            submit_time,
            timestamp: submit_time,
            companion: None,
            read_wallets: Vec::new(),
            write_wallets: Vec::new(),
            channel_id: None,
            status: TxStatus::Pending,
        }
    }

    pub fn set_status(&mut self, next: TxStatus) -> Result<(), StatusError> {
        if !self.status.can_transition_to(next) {
            return Err(StatusError {
                tx: self.id,
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    /// Distinct operand addresses in first-appearance order.
    pub fn addresses(&self) -> Vec<&WalletAddress> {
        let mut out: Vec<&WalletAddress> = Vec::with_capacity(self.operands.len());
        for op in &self.operands {
            if !out.contains(&&op.addr) {
                out.push(&op.addr);
            }
        }
        out
    }

    pub fn writes_anything(&self) -> bool {
        self.operands.iter().any(|op| op.access == AccessType::Write)
    }

    pub fn write_operand_count(&self) -> usize {
        self.operands.iter().filter(|op| op.access == AccessType::Write).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReadEntry {
    pub addr: WalletAddress,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WriteEntry {
    pub addr: WalletAddress,
    pub balance: u64,
}

/// Output of speculative execution. Every written address is also read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReadWriteSet {
    pub reads: Vec<ReadEntry>,
    pub writes: Vec<WriteEntry>,
}

impl ReadWriteSet {
    pub fn is_well_formed(&self) -> bool {
        self.writes.iter().all(|w| self.reads.iter().any(|r| r.addr == w.addr))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTx {
    pub tx: Transaction,
    pub rwset: ReadWriteSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Block {
    pub height: u64,
    pub channel_id: ChannelId,
    pub txs: Vec<BlockTx>,
    pub cut_time: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validation {
    Valid,
    Stale(Vec<WalletAddress>),
}

/// The single logical ledger every channel commits to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub height: u64,
    pub wallets: BTreeMap<WalletAddress, Wallet>,
}

impl WorldState {
    pub fn genesis<'a>(accounts: impl IntoIterator<Item = &'a WalletAddress>, balance: u64) -> Self {
        Self {
            height: 0,
            wallets: accounts
                .into_iter()
                .map(|a| (a.clone(), Wallet::new(balance)))
                .collect(),
        }
    }

    pub fn wallet(&self, addr: &WalletAddress) -> Option<&Wallet> {
        self.wallets.get(addr)
    }

    pub fn contains(&self, addr: &WalletAddress) -> bool {
        self.wallets.contains_key(addr)
    }

    pub fn insert(&mut self, addr: WalletAddress, wallet: Wallet) {
        self.wallets.insert(addr, wallet);
    }

    pub fn set_available(&mut self, addr: &WalletAddress, available: bool) -> Result<(), LedgerError> {
        let wallet = self
            .wallets
            .get_mut(addr)
            .ok_or_else(|| LedgerError::UnknownAddress(addr.clone()))?;
        wallet.available = available;
        Ok(())
    }

    pub fn total_balance(&self) -> u128 {
        self.wallets.values().map(|w| w.balance as u128).sum()
    }

    /// MVCC check: every observed version must still be current.
    pub fn validate_read_set(&self, rwset: &ReadWriteSet) -> Result<Validation, LedgerError> {
        let mut stale = Vec::new();
        for read in &rwset.reads {
            let wallet = self
                .wallets
                .get(&read.addr)
                .ok_or_else(|| LedgerError::UnknownAddress(read.addr.clone()))?;
            if wallet.version != read.version && !stale.contains(&read.addr) {
                stale.push(read.addr.clone());
            }
        }
        Ok(if stale.is_empty() {
            Validation::Valid
        } else {
            Validation::Stale(stale)
        })
    }

    /// Apply a previously validated write set. Each written wallet gets the
    /// new balance and its version bumped by one.
    pub fn apply_write_set(&mut self, rwset: &ReadWriteSet) {
        for write in &rwset.writes {
            let wallet = self.wallets.entry(write.addr.clone()).or_insert(Wallet {
                balance: 0,
                version: ABSENT_VERSION,
                available: true,
            });
            wallet.balance = write.balance;
            wallet.version += 1;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world state serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> WalletAddress {
        WalletAddress::new(s)
    }

    fn state(entries: &[(&str, u64, u64)]) -> WorldState {
        let mut s = WorldState::default();
        for &(a, balance, version) in entries {
            s.insert(
                addr(a),
                Wallet {
                    balance,
                    version,
                    available: true,
                },
            );
        }
        s
    }

    fn writes(entries: &[(&str, u64)]) -> ReadWriteSet {
        ReadWriteSet {
            reads: Vec::new(),
            writes: entries
                .iter()
                .map(|&(a, balance)| WriteEntry { addr: addr(a), balance })
                .collect(),
        }
    }

    #[test]
    fn address_grammar() {
        assert!(addr("W-A").is_well_formed());
        assert!(addr("W-p17").is_well_formed());
        assert!(!addr("W-").is_well_formed());
        assert!(!addr("BOGUS").is_well_formed());
        assert!(!addr("W-A_1").is_well_formed());
        assert!(WalletAddress::parse("").is_err());
    }

    #[test]
    fn single_write_applies() {
        let mut s = state(&[("W-A", 100, 1)]);
        s.apply_write_set(&writes(&[("W-A", 70)]));
        assert_eq!(s.wallet(&addr("W-A")).unwrap().balance, 70);
        assert_eq!(s.wallet(&addr("W-A")).unwrap().version, 2);
    }

    #[test]
    fn empty_write_set_is_identity() {
        let mut s = state(&[("W-A", 100, 1)]);
        let before = s.clone();
        s.apply_write_set(&ReadWriteSet::default());
        assert_eq!(s, before);
    }

    #[test]
    fn two_writes_match_sequential_replay() {
        let mut s = state(&[("W-A", 100, 1), ("W-B", 50, 1)]);
        s.apply_write_set(&writes(&[("W-A", 90), ("W-B", 60)]));
        // Oracle: apply each write on its own, in order.
        let mut oracle = state(&[("W-A", 100, 1), ("W-B", 50, 1)]);
        oracle.apply_write_set(&writes(&[("W-A", 90)]));
        oracle.apply_write_set(&writes(&[("W-B", 60)]));
        assert_eq!(s, oracle);
        assert_eq!(s, state(&[("W-A", 90, 2), ("W-B", 60, 2)]));
    }

    #[test]
    fn read_validation() {
        let rw = ReadWriteSet {
            reads: vec![ReadEntry {
                addr: addr("W-A"),
                version: 1,
            }],
            writes: vec![],
        };
        assert_eq!(state(&[("W-A", 5, 1)]).validate_read_set(&rw), Ok(Validation::Valid));
        assert_eq!(
            state(&[("W-A", 5, 2)]).validate_read_set(&rw),
            Ok(Validation::Stale(vec![addr("W-A")]))
        );
        assert_eq!(
            WorldState::default().validate_read_set(&rw),
            Err(LedgerError::UnknownAddress(addr("W-A")))
        );
    }

    #[test]
    fn same_version_writers_in_one_block() {
        let mut s = state(&[("W-A", 100, 1)]);
        let t1 = ReadWriteSet {
            reads: vec![ReadEntry {
                addr: addr("W-A"),
                version: 1,
            }],
            writes: vec![WriteEntry {
                addr: addr("W-A"),
                balance: 90,
            }],
        };
        let t2 = ReadWriteSet {
            writes: vec![WriteEntry {
                addr: addr("W-A"),
                balance: 80,
            }],
            ..t1.clone()
        };
        assert_eq!(s.validate_read_set(&t1), Ok(Validation::Valid));
        s.apply_write_set(&t1);
        assert_eq!(s.validate_read_set(&t2), Ok(Validation::Stale(vec![addr("W-A")])));
    }

    #[test]
    fn status_moves_forward_only() {
        let mut tx = Transaction::new(TxId(1), TxType::Type4, vec![], 0);
        tx.set_status(TxStatus::Endorsed).unwrap();
        tx.set_status(TxStatus::Queued).unwrap();
        assert!(tx.set_status(TxStatus::Endorsed).is_err());
        tx.set_status(TxStatus::Failed).unwrap();
        assert!(tx.set_status(TxStatus::Committed).is_err());
    }

    #[test]
    fn world_state_json_shape() {
        let s = state(&[("W-A", 100, 1)]);
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["height"], 0);
        assert_eq!(v["wallets"]["W-A"]["balance"], 100);
        assert_eq!(v["wallets"]["W-A"]["version"], 1);
        assert_eq!(v["wallets"]["W-A"]["available"], true);
        let back: WorldState = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
