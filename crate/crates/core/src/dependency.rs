//! Dependency manager: classify every wallet a transaction references into
//! `read_wallets` / `write_wallets` and drop transactions that reference an
//! invalid wallet before they can reach an orderer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AccessType, Operand, Transaction, TxStatus, WalletAddress, WorldState};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscardReason {
    #[error("invalid wallet {0}")]
    InvalidWallet(WalletAddress),
    #[error("transaction has not been endorsed")]
    NotEndorsed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyAnnotation {
    pub read_wallets: Vec<WalletAddress>,
    pub write_wallets: Vec<WalletAddress>,
}

/// Access classification for a single operand: any balance movement
/// (debit or credit) needs WRITE; zero-amount operands keep their declared
/// access (queries and availability probes are READ, record rewrites WRITE).
pub fn classify_operand(op: &Operand) -> AccessType {
    if op.amount != 0 {
        AccessType::Write
    } else {
        op.access
    }
}

/// Grammar check plus existence in the registry. Availability is not
/// considered: an unavailable wallet is valid and fails later, at execution.
pub fn is_valid_wallet(addr: &WalletAddress, registry: &WorldState) -> bool {
    addr.is_well_formed() && registry.contains(addr)
}

/// Build the read/write wallet lists. A wallet that is both read and written
/// is listed as WRITE only, so the two lists are always disjoint.
pub fn annotate(tx: &Transaction, registry: &WorldState) -> Result<DependencyAnnotation, DiscardReason> {
    let mut ann = DependencyAnnotation::default();
    for op in &tx.operands {
        if !is_valid_wallet(&op.addr, registry) {
            return Err(DiscardReason::InvalidWallet(op.addr.clone()));
        }
        match classify_operand(op) {
            AccessType::Write => {
                ann.read_wallets.retain(|a| a != &op.addr);
                if !ann.write_wallets.contains(&op.addr) {
                    ann.write_wallets.push(op.addr.clone());
                }
            }
            AccessType::Read => {
                if !ann.write_wallets.contains(&op.addr) && !ann.read_wallets.contains(&op.addr) {
                    ann.read_wallets.push(op.addr.clone());
                }
            }
        }
    }
    Ok(ann)
}

/// Annotate an endorsed transaction with its dependencies, or discard it.
///
/// Re-analyzing an already annotated transaction yields the same annotation.
pub fn analyze_dependency(tx: &Transaction, registry: &WorldState) -> Result<Transaction, DiscardReason> {
    if !matches!(tx.status, TxStatus::Endorsed | TxStatus::Analyzed) {
        return Err(DiscardReason::NotEndorsed);
    }
    let ann = annotate(tx, registry)?;
    let mut out = tx.clone();
    out.read_wallets = ann.read_wallets;
    out.write_wallets = ann.write_wallets;
    out.status = TxStatus::Analyzed;
    Ok(out)
}
