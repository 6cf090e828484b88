//! Pseudonymous identity management with purpose-bound, dual-custody data
//! access.
//!
//! A subject's master identity lives only in the [`vault`]; every data
//! silo knows the subject by a per-domain virtual identifier. Access to
//! silo records needs a regulator-signed [`registry::Authorization`], a
//! signed program manifest and a gate-issued [`gate::AccessTicket`] that
//! carries the regulator's half of each record key. Every attempt lands in
//! two cross-committed [`ledger`]s and in the affected subjects' mailboxes.
//!
//! The crate is `no_std` with `alloc`; file formats, persistence and the
//! command line live in the `regctl` crate.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod canon;
pub mod crypto;
pub mod deployment;
pub mod event;
pub mod gate;
pub mod ids;
pub mod ledger;
pub mod notifier;
pub mod registry;
pub mod silo;
pub mod vault;

pub use deployment::{DeployError, Deployment, DeploymentParts};
pub use ids::{FieldClass, MasterId, Operation, Scope, Timestamp, VirtualId};
