use thiserror::Error;

use crate::cmb::{AgentId, CmbKey};
use crate::encoder::EncoderError;
use crate::profile::Role;

/// Errors from memory-block construction and store operations.
#[derive(Debug, Error)]
pub enum CmbError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("unknown parent key {0}")]
    UnknownParent(CmbKey),
    #[error("unknown key {0}")]
    UnknownKey(CmbKey),
    #[error("CMB {0} lists itself as a parent")]
    SelfReference(CmbKey),
    #[error("key {0} already exists")]
    DuplicateKey(CmbKey),
    #[error("lineage cycle through {0}")]
    Cycle(CmbKey),
    #[error("store owned by {owner} cannot hold a CMB originated by {origin}")]
    CrossStoreWrite { owner: AgentId, origin: AgentId },
    #[error("agent {agent} with role {role:?} may not validate")]
    Authority { agent: AgentId, role: Role },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}
