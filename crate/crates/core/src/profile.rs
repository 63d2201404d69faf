//! Per-agent evaluation parameters: field weights, freshness window, role.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmb::AgentId;
use crate::field::Fields;

pub const DEFAULT_ANCHOR_K: usize = 5;

/// Sender confidence for fields extracted by an LLM.
pub const LLM_TIER_CONFIDENCE: f64 = 0.95;
/// Sender confidence for the keyword/position fallback extractor.
pub const HEURISTIC_TIER_CONFIDENCE: f64 = 0.80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Observer,
    Validator,
    Anchor,
}

impl Role {
    pub fn may_validate(self) -> bool {
        matches!(self, Role::Validator | Role::Anchor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub agent_type: String,
    pub alpha: Fields<f64>,
    /// Freshness window in seconds.
    pub tau_freshness: f64,
    pub default_confidence: f64,
    #[serde(default)]
    pub role: Role,
    #[serde(default = "default_anchor_k")]
    pub anchor_k: usize,
}

fn default_anchor_k() -> usize {
    DEFAULT_ANCHOR_K
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile {0}: all field weights are zero")]
    NoPositiveWeight(String),
    #[error("profile {0}: field weights must be finite and non-negative")]
    NegativeWeight(String),
    #[error("profile {0}: freshness window must be positive")]
    NonPositiveTau(String),
    #[error("profile {0}: default confidence outside [0, 1]")]
    Confidence(String),
    #[error("unknown agent type `{0}`")]
    UnknownType(String),
    #[error("profile file: {0}")]
    Format(String),
}

impl AgentProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let id = self.agent_id.to_string();
        if self.alpha.values().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(ProfileError::NegativeWeight(id));
        }
        if !self.alpha.values().any(|a| *a > 0.0) {
            return Err(ProfileError::NoPositiveWeight(id));
        }
        if !(self.tau_freshness > 0.0 && self.tau_freshness.is_finite()) {
            return Err(ProfileError::NonPositiveTau(id));
        }
        if !(0.0..=1.0).contains(&self.default_confidence) {
            return Err(ProfileError::Confidence(id));
        }
        Ok(())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.agent_id = AgentId::new(id);
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.values().sum()
    }
}

#[derive(Deserialize)]
struct ProfileTemplate {
    alpha: Fields<f64>,
    tau_freshness: f64,
    default_confidence: f64,
}

/// Named agent-type templates; agents are instantiated from them by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileCatalog {
    templates: BTreeMap<String, AgentProfile>,
}

const BUILTIN_PROFILES: &str = include_str!("../fixtures/profiles.json");

impl ProfileCatalog {
    /// Field weights and freshness windows for the bundled agent types.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_PROFILES).expect("bundled profiles parse")
    }

    /// Parses `{ "<type>": { "alpha": {...}, "tau_freshness": s, "default_confidence": c } }`.
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let raw: BTreeMap<String, ProfileTemplate> =
            serde_json::from_str(text).map_err(|e| ProfileError::Format(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for (ty, t) in raw {
            let p = AgentProfile {
                agent_id: AgentId::new(format!("{ty}-agent")),
                agent_type: ty.clone(),
                alpha: t.alpha,
                tau_freshness: t.tau_freshness,
                default_confidence: t.default_confidence,
                role: Role::Observer,
                anchor_k: DEFAULT_ANCHOR_K,
            };
            p.validate()?;
            templates.insert(ty, p);
        }
        Ok(ProfileCatalog { templates })
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn get(&self, agent_type: &str) -> Result<&AgentProfile, ProfileError> {
        self.templates
            .get(agent_type)
            .ok_or_else(|| ProfileError::UnknownType(agent_type.to_string()))
    }

    /// Instantiates a profile for an agent id; the type is the id minus any `-agent` suffix.
    pub fn for_agent(&self, agent_id: &str) -> Result<AgentProfile, ProfileError> {
        let ty = agent_type_of(agent_id);
        Ok(self.get(ty)?.clone().with_id(agent_id))
    }
}

/// `"coding-agent"` → `"coding"`; ids without the suffix are their own type.
pub fn agent_type_of(agent_id: &str) -> &str {
    agent_id.strip_suffix("-agent").unwrap_or(agent_id)
}
