//! Execute phase: endorsers run a transaction against a (possibly stale)
//! state snapshot and the client collects a k-of-n quorum of matching results.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{
    AccessType, ReadEntry, ReadWriteSet, Tick, Transaction, TxId, WalletAddress, WorldState, WriteEntry, ABSENT_VERSION,
};

/// Execution-level failure raised by speculative execution.
#[derive(Debug, Error, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecError {
    #[error("debit exceeds balance of {0}")]
    Overdraft(WalletAddress),
    #[error("wallet {0} is unavailable")]
    Unavailable(WalletAddress),
    #[error("wallet {0} does not exist")]
    UnknownAddress(WalletAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecErrorKind {
    Overdraft,
    Unavailable,
    UnknownAddress,
}

impl ExecError {
    pub fn kind(&self) -> ExecErrorKind {
        match self {
            ExecError::Overdraft(_) => ExecErrorKind::Overdraft,
            ExecError::Unavailable(_) => ExecErrorKind::Unavailable,
            ExecError::UnknownAddress(_) => ExecErrorKind::UnknownAddress,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("endorsement policy needs 1 <= required <= endorsers, got {required}-of-{endorsers}")]
pub struct PolicyError {
    pub endorsers: u32,
    pub required: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndorsementPolicy {
    pub endorsers: u32,
    pub required: u32,
}

impl Default for EndorsementPolicy {
    fn default() -> Self {
        Self {
            endorsers: 3,
            required: 2,
        }
    }
}

impl EndorsementPolicy {
    pub fn new(endorsers: u32, required: u32) -> Result<Self, PolicyError> {
        let policy = Self { endorsers, required };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.required == 0 || self.required > self.endorsers {
            return Err(PolicyError {
                endorsers: self.endorsers,
                required: self.required,
            });
        }
        Ok(())
    }
}

/// One endorser's answer for one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub endorser: u32,
    pub tx: TxId,
    pub snapshot_height: u64,
    pub result: Result<ReadWriteSet, ExecError>,
    pub sim_time: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Exec(ExecError),
    MismatchedRwSets,
    InsufficientEndorsements,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Exec(e) => write!(f, "{e}"),
            RejectReason::MismatchedRwSets => f.write_str("endorsers returned mismatched read/write sets"),
            RejectReason::InsufficientEndorsements => f.write_str("not enough endorsements"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndorsementOutcome {
    Endorsed(ReadWriteSet),
    Rejected(RejectReason),
}

/// Run `tx` against `snapshot` without touching it.
///
/// Operands on the same address are folded into one net delta. Missing
/// wallets read as version 0, like a chaincode `GetState` miss; only a net
/// debit of a missing wallet is an error here. Commit-time validation is
/// what rejects reads of missing wallets.
pub fn execute_speculatively(tx: &Transaction, snapshot: &WorldState) -> Result<ReadWriteSet, ExecError> {
    let mut rwset = ReadWriteSet::default();
    for addr in tx.addresses() {
        let mut delta: i128 = 0;
        let mut writes = false;
        for op in tx.operands.iter().filter(|op| &op.addr == addr) {
            delta += op.amount as i128;
            writes |= op.access == AccessType::Write;
        }
        match snapshot.wallet(addr) {
            None => {
                if delta < 0 {
                    return Err(ExecError::UnknownAddress(addr.clone()));
                }
                rwset.reads.push(ReadEntry {
                    addr: addr.clone(),
                    version: ABSENT_VERSION,
                });
                if writes {
                    rwset.writes.push(WriteEntry {
                        addr: addr.clone(),
                        balance: delta as u64,
                    });
                }
            }
            Some(wallet) => {
                rwset.reads.push(ReadEntry {
                    addr: addr.clone(),
                    version: wallet.version,
                });
                if writes {
                    if !wallet.available {
                        return Err(ExecError::Unavailable(addr.clone()));
                    }
                    let balance = wallet.balance as i128 + delta;
                    if balance < 0 {
                        return Err(ExecError::Overdraft(addr.clone()));
                    }
                    rwset.writes.push(WriteEntry {
                        addr: addr.clone(),
                        balance: balance as u64,
                    });
                }
            }
        }
    }
    Ok(rwset)
}

/// Quorum collection: endorsed iff at least `required` endorsers produced
/// identical read/write sets against the same snapshot height.
pub fn collect_endorsements(policy: &EndorsementPolicy, endorsements: &[Endorsement]) -> EndorsementOutcome {
    let k = policy.required as usize;

    // (height, rwset) -> count, first-seen order
    let mut agreeing: Vec<((u64, &ReadWriteSet), usize)> = Vec::new();
    let mut errors: Vec<(&ExecError, usize)> = Vec::new();
    for e in endorsements {
        match &e.result {
            Ok(rw) => {
                let key = (e.snapshot_height, rw);
                match agreeing.iter_mut().find(|(k2, _)| *k2 == key) {
                    Some((_, n)) => *n += 1,
                    None => agreeing.push((key, 1)),
                }
            }
            Err(err) => match errors.iter_mut().find(|(e2, _)| e2.kind() == err.kind()) {
                Some((_, n)) => *n += 1,
                None => errors.push((err, 1)),
            },
        }
    }

    if let Some(((_, rw), _)) = agreeing.iter().find(|(_, n)| *n >= k) {
        return EndorsementOutcome::Endorsed((*rw).clone());
    }
    if let Some((err, _)) = errors.iter().find(|(_, n)| *n >= k) {
        return EndorsementOutcome::Rejected(RejectReason::Exec((*err).clone()));
    }
    if agreeing.len() > 1 {
        return EndorsementOutcome::Rejected(RejectReason::MismatchedRwSets);
    }
    // Most frequent error, earliest on ties.
    let mut best: Option<(&ExecError, usize)> = None;
    for &(err, n) in &errors {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((err, n));
        }
    }
    match best {
        Some((err, _)) => EndorsementOutcome::Rejected(RejectReason::Exec(err.clone())),
        None => EndorsementOutcome::Rejected(RejectReason::InsufficientEndorsements),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Operand, TxType, Wallet};

    fn addr(s: &str) -> WalletAddress {
        WalletAddress::new(s)
    }

    fn abcd(a: u64, b: u64, c: u64, d: u64) -> WorldState {
        let mut s = WorldState::default();
        for (name, bal) in [("W-A", a), ("W-B", b), ("W-C", c), ("W-D", d)] {
            s.insert(addr(name), Wallet::new(bal));
        }
        s
    }

    fn type1(x: u64) -> Transaction {
        Transaction::new(
            TxId(1),
            TxType::Type1,
            vec![
                Operand::debit("W-A", x),
                Operand::credit("W-B", x.div_ceil(2)),
                Operand::credit("W-C", x / 2),
            ],
            0,
        )
    }

    fn endorsement(endorser: u32, height: u64, result: Result<ReadWriteSet, ExecError>) -> Endorsement {
        Endorsement {
            endorser,
            tx: TxId(1),
            snapshot_height: height,
            result,
            sim_time: 0,
        }
    }

    #[test]
    fn type1_hand_replay() {
        let rw = execute_speculatively(&type1(30), &abcd(100, 0, 0, 0)).unwrap();
        let reads: Vec<_> = rw.reads.iter().map(|r| (r.addr.as_str(), r.version)).collect();
        let writes: Vec<_> = rw.writes.iter().map(|w| (w.addr.as_str(), w.balance)).collect();
        assert_eq!(reads, vec![("W-A", 1), ("W-B", 1), ("W-C", 1)]);
        assert_eq!(writes, vec![("W-A", 70), ("W-B", 15), ("W-C", 15)]);
        assert!(rw.is_well_formed());
    }

    #[test]
    fn type1_overdraft() {
        assert_eq!(
            execute_speculatively(&type1(150), &abcd(100, 0, 0, 0)),
            Err(ExecError::Overdraft(addr("W-A")))
        );
    }

    #[test]
    fn type6_unavailable_target() {
        let mut s = abcd(100, 0, 0, 0);
        s.set_available(&addr("W-D"), false).unwrap();
        let tx = Transaction::new(
            TxId(6),
            TxType::Type6,
            vec![Operand::debit("W-A", 10), Operand::credit("W-D", 10)],
            0,
        );
        assert_eq!(execute_speculatively(&tx, &s), Err(ExecError::Unavailable(addr("W-D"))));
    }

    #[test]
    fn missing_wallets() {
        let s = abcd(100, 0, 0, 0);
        let credit = Transaction::new(
            TxId(2),
            TxType::Type1,
            vec![Operand::debit("W-A", 4), Operand::credit("W-Z9", 4)],
            0,
        );
        let rw = execute_speculatively(&credit, &s).unwrap();
        assert_eq!(rw.reads[1].version, ABSENT_VERSION);
        let debit = Transaction::new(TxId(3), TxType::Type5, vec![Operand::debit("W-Z9", 1)], 0);
        assert_eq!(
            execute_speculatively(&debit, &s),
            Err(ExecError::UnknownAddress(addr("W-Z9")))
        );
    }

    #[test]
    fn execution_has_no_side_effects() {
        let s = abcd(100, 0, 0, 0);
        let before = s.clone();
        let a = execute_speculatively(&type1(30), &s);
        let b = execute_speculatively(&type1(30), &s);
        assert_eq!(s, before);
        assert_eq!(a, b);
    }

    #[test]
    fn unanimous_quorum() {
        let rw = execute_speculatively(&type1(30), &abcd(100, 0, 0, 0)).unwrap();
        let policy = EndorsementPolicy::default();
        let es: Vec<_> = (0..3).map(|i| endorsement(i, 0, Ok(rw.clone()))).collect();
        assert_eq!(collect_endorsements(&policy, &es), EndorsementOutcome::Endorsed(rw));
    }

    #[test]
    fn quorum_of_failures() {
        let rw = execute_speculatively(&type1(30), &abcd(100, 0, 0, 0)).unwrap();
        let policy = EndorsementPolicy::default();
        let od = Err(ExecError::Overdraft(addr("W-A")));
        let es = vec![
            endorsement(0, 0, od.clone()),
            endorsement(1, 0, Ok(rw)),
            endorsement(2, 0, od),
        ];
        assert_eq!(
            collect_endorsements(&policy, &es),
            EndorsementOutcome::Rejected(RejectReason::Exec(ExecError::Overdraft(addr("W-A"))))
        );
    }

    #[test]
    fn endorsers_at_different_heights_disagree() {
        // Height h: A at v1. Height h+1: a committed write moved A to v2.
        let at_h = abcd(100, 0, 0, 0);
        let mut at_h1 = at_h.clone();
        at_h1.apply_write_set(&ReadWriteSet {
            reads: vec![],
            writes: vec![WriteEntry {
                addr: addr("W-A"),
                balance: 90,
            }],
        });
        at_h1.height = 1;
        let tx = type1(30);
        let r0 = execute_speculatively(&tx, &at_h).unwrap();
        let r1 = execute_speculatively(&tx, &at_h1).unwrap();
        assert_ne!(r0.reads, r1.reads);
        let policy = EndorsementPolicy::new(3, 2).unwrap();
        let es = vec![endorsement(0, 0, Ok(r0.clone())), endorsement(1, 1, Ok(r1))];
        assert_eq!(
            collect_endorsements(&policy, &es),
            EndorsementOutcome::Rejected(RejectReason::MismatchedRwSets)
        );
        // Same rwset but from different heights still does not count as agreement.
        let es = vec![endorsement(0, 0, Ok(r0.clone())), endorsement(1, 1, Ok(r0))];
        assert_eq!(
            collect_endorsements(&policy, &es),
            EndorsementOutcome::Rejected(RejectReason::MismatchedRwSets)
        );
    }

    #[test]
    fn policy_bounds() {
        assert!(EndorsementPolicy::new(3, 0).is_err());
        assert!(EndorsementPolicy::new(2, 3).is_err());
        assert!(EndorsementPolicy::new(1, 1).is_ok());
    }
}
