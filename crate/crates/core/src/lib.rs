//! Field-level memory evaluation and coupling for a mesh of agents.

pub mod cmb;
pub mod encoder;
pub mod error;
pub mod field;
pub mod lifecycle;
pub mod profile;
pub mod store;
pub mod svaf;
pub mod blend;
pub mod neural;
pub mod narrative;
pub mod sim;
pub mod dataset;

pub use cmb::{AgentId, Cmb, CmbKey, FieldEntry, Lineage, Timestamp};
pub use encoder::{cosine_similarity, Embedding, EncoderConfig, EncoderMode, FieldEncoder};
pub use error::CmbError;
pub use field::{FieldId, Fields};
pub use lifecycle::{LifecycleState, Trigger};
pub use profile::{AgentProfile, ProfileCatalog, Role};
pub use store::{MemoryStore, NewCmb};
pub use svaf::{evaluate_cmb, Decision, FusionOutcome, SvafConfig, Thresholds};
pub use blend::{BlendConfig, HiddenState, PeerClass};
