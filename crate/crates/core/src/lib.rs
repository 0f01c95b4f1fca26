//! Core of a permissioned archival ledger.

pub mod ca;
pub mod clock;
pub mod codec;
pub mod crypto;
pub mod guard;
pub mod identity;
pub mod ledger;
pub mod node;
pub mod workflow;
