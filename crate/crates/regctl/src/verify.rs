//! Offline audit of a pair of ledger files.

use std::fmt;
use std::path::Path;

use pdgate_core::crypto::SigningIdentity;
use pdgate_core::ledger::{cross_verify, ChainStatus, CrossStatus, Ledger};

use crate::store::{parse_ledger, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogVerdict {
    pub regulator: ChainStatus,
    pub controller: ChainStatus,
    pub cross: CrossStatus,
    pub regulator_len: usize,
    pub controller_len: usize,
}

impl LogVerdict {
    pub fn is_ok(&self) -> bool {
        self.regulator == ChainStatus::Ok && self.controller == ChainStatus::Ok && self.cross == CrossStatus::Ok
    }
}

impl fmt::Display for LogVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "regulator_entries={}", self.regulator_len)?;
        writeln!(f, "controller_entries={}", self.controller_len)?;
        writeln!(f, "regulator_chain={}", self.regulator)?;
        writeln!(f, "controller_chain={}", self.controller)?;
        write!(f, "cross={}", self.cross)
    }
}

/// Parses both files strictly, then checks each chain and the
/// cross-commitments between them. A file that does not parse is an error,
/// which callers treat as tampering.
pub fn verify_logs(
    regulator_log: &[u8],
    controller_log: &[u8],
    regulator: &SigningIdentity,
    controller: &SigningIdentity,
) -> Result<LogVerdict, StoreError> {
    let reg = Ledger::from_entries(regulator.clone(), parse_ledger(regulator_log, Path::new("regulator log"))?);
    let ctl = Ledger::from_entries(controller.clone(), parse_ledger(controller_log, Path::new("controller log"))?);
    Ok(LogVerdict {
        regulator: reg.verify_chain(),
        controller: ctl.verify_chain(),
        cross: cross_verify(&reg, &ctl),
        regulator_len: reg.len(),
        controller_len: ctl.len(),
    })
}
