//! Activity-driven lifecycle of a stored memory block.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cmb::{AgentId, Timestamp};
use crate::profile::Role;

pub const DAY_SECS: i64 = 86_400;
/// Inactivity after which a non-canonical block is archived.
pub const ARCHIVE_AFTER_SECS: i64 = 30 * DAY_SECS;
/// Distinct remixing agents required for a validated block to become canonical.
pub const CANONICAL_MIN_REMIXERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LifecycleState {
    #[default]
    Observed,
    Remixed,
    Validated,
    Canonical,
    Archived,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 5] = [
        LifecycleState::Observed,
        LifecycleState::Remixed,
        LifecycleState::Validated,
        LifecycleState::Canonical,
        LifecycleState::Archived,
    ];

    /// Influence of a block in this state when used as a fusion anchor.
    pub fn anchor_weight(self) -> f64 {
        match self {
            LifecycleState::Observed => 1.0,
            LifecycleState::Remixed => 1.5,
            LifecycleState::Validated => 2.0,
            LifecycleState::Canonical => 3.0,
            LifecycleState::Archived => 0.5,
        }
    }

    /// Position in the activity ladder; archived sits outside it.
    pub fn rank(self) -> Option<u8> {
        match self {
            LifecycleState::Observed => Some(0),
            LifecycleState::Remixed => Some(1),
            LifecycleState::Validated => Some(2),
            LifecycleState::Canonical => Some(3),
            LifecycleState::Archived => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LifecycleState::Observed => "observed",
            LifecycleState::Remixed => "remixed",
            LifecycleState::Validated => "validated",
            LifecycleState::Canonical => "canonical",
            LifecycleState::Archived => "archived",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "trigger", rename_all = "snake_case")]
pub enum Trigger {
    PeerRemix { agent: AgentId, t: Timestamp },
    HumanValidation { agent: AgentId, role: Role, t: Timestamp },
    Clock { t: Timestamp },
}

impl Trigger {
    pub fn time(&self) -> Timestamp {
        match self {
            Trigger::PeerRemix { t, .. }
            | Trigger::HumanValidation { t, .. }
            | Trigger::Clock { t } => *t,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Trigger::PeerRemix { .. } => "peer_remix",
            Trigger::HumanValidation { .. } => "human_validation",
            Trigger::Clock { .. } => "clock",
        }
    }
}

/// Lifecycle bookkeeping held alongside each stored block.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LifecycleRecord {
    pub state: LifecycleState,
    pub last_remix: Option<Timestamp>,
    pub remixers: BTreeSet<AgentId>,
}

#[derive(Debug, PartialEq, Eq)]
pub struct Unauthorized;

impl LifecycleRecord {
    /// Applies one trigger. `created` is the block's origin timestamp, used as
    /// the activity reference before the first remix.
    pub fn apply(&mut self, trigger: &Trigger, created: Timestamp) -> Result<LifecycleState, Unauthorized> {
        use LifecycleState::*;
        match trigger {
            Trigger::PeerRemix { agent, t } => {
                self.remixers.insert(agent.clone());
                self.last_remix = Some(self.last_remix.map_or(*t, |prev| prev.max(*t)));
                self.state = match self.state {
                    Observed | Archived => Remixed,
                    Validated if self.remixers.len() >= CANONICAL_MIN_REMIXERS => Canonical,
                    s => s,
                };
            }
            Trigger::HumanValidation { role, .. } => {
                if !role.may_validate() {
                    return Err(Unauthorized);
                }
                self.state = match self.state {
                    Canonical => Canonical,
                    _ if self.remixers.len() >= CANONICAL_MIN_REMIXERS => Canonical,
                    _ => Validated,
                };
            }
            Trigger::Clock { t } => {
                let last_activity = self.last_remix.unwrap_or(created);
                if self.state != Canonical && t - last_activity >= ARCHIVE_AFTER_SECS {
                    self.state = Archived;
                }
            }
        }
        Ok(self.state)
    }
}
