//! Peer-level coupling between agents' hidden states, blended per neuron.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmb::{AgentId, Timestamp};
use crate::encoder::{cosine, Embedding};
use crate::field::FieldId;
use crate::profile::AgentProfile;

pub const DEFAULT_K: f64 = 5.0;
pub const ALIGNED_ALPHA: f64 = 0.40;
pub const GUARDED_ALPHA: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum BlendError {
    #[error("state dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("time constants must be positive and finite")]
    InvalidTau,
    #[error("state values must be finite")]
    NonFinite,
    #[error("blending constant K must be positive")]
    InvalidK,
}

/// An agent's cognitive state with one time constant per neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub tau: Vec<f64>,
    pub last_update: Timestamp,
}

impl HiddenState {
    pub fn new(h: Vec<f64>, tau: Vec<f64>, last_update: Timestamp) -> Result<Self, BlendError> {
        if h.len() != tau.len() {
            return Err(BlendError::Dimension(h.len(), tau.len()));
        }
        if tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(BlendError::InvalidTau);
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(BlendError::NonFinite);
        }
        Ok(HiddenState { h, tau, last_update })
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerClass {
    Aligned,
    Guarded,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerCouplingDecision {
    pub class: PeerClass,
    pub alpha_eff: f64,
    pub drift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub k: f64,
    pub aligned: f64,
    pub guarded: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            k: DEFAULT_K,
            aligned: 0.25,
            guarded: 0.50,
        }
    }
}

/// Cosine drift between two hidden states, in [0, 2].
pub fn peer_drift(a: &[f64], b: &[f64]) -> Result<f64, BlendError> {
    if a.len() != b.len() {
        return Err(BlendError::Dimension(a.len(), b.len()));
    }
    Ok(1.0 - cosine(a, b))
}

pub fn classify_peer(h_local: &[f64], h_peer: &[f64]) -> Result<PeerCouplingDecision, BlendError> {
    classify_peer_with(h_local, h_peer, &BlendConfig::default())
}

pub fn classify_peer_with(
    h_local: &[f64],
    h_peer: &[f64],
    config: &BlendConfig,
) -> Result<PeerCouplingDecision, BlendError> {
    let drift = peer_drift(h_local, h_peer)?;
    let (class, alpha_eff) = if drift <= config.aligned {
        (PeerClass::Aligned, ALIGNED_ALPHA)
    } else if drift <= config.guarded {
        (PeerClass::Guarded, GUARDED_ALPHA)
    } else {
        (PeerClass::Rejected, 0.0)
    };
    Ok(PeerCouplingDecision { class, alpha_eff, drift })
}

/// Per-neuron similarity; two zeros are identical.
pub fn neuron_similarity(local: f64, peer: f64) -> f64 {
    let scale = local.abs().max(peer.abs());
    if scale == 0.0 {
        return 1.0;
    }
    (1.0 - (local - peer).abs() / scale).max(0.0)
}

/// Blend coefficient for one neuron.
pub fn neuron_beta(alpha_eff: f64, sim: f64, tau: f64, k: f64) -> f64 {
    (alpha_eff * k * sim / tau).min(1.0)
}

pub fn blend_states(
    local: &HiddenState,
    peer_h: &[f64],
    alpha_eff: f64,
    config: &BlendConfig,
) -> Result<HiddenState, BlendError> {
    if peer_h.len() != local.dim() {
        return Err(BlendError::Dimension(local.dim(), peer_h.len()));
    }
    if !(config.k > 0.0) {
        return Err(BlendError::InvalidK);
    }
    let h = local
        .h
        .iter()
        .zip(peer_h)
        .zip(&local.tau)
        .map(|((&hl, &hp), &tau)| {
            let beta = neuron_beta(alpha_eff, neuron_similarity(hl, hp), tau, config.k);
            (1.0 - beta) * hl + beta * hp
        })
        .collect();
    Ok(HiddenState {
        h,
        tau: local.tau.clone(),
        last_update: local.last_update,
    })
}

/// Pulls the state toward the α-weighted pool of accepted field vectors. Each
/// neuron moves by `min(Δt/τ_i, 1)` of the gap, Δt being the time since the
/// last update.
pub fn ingest_state(
    local: &HiddenState,
    accepted: &[(FieldId, &Embedding)],
    profile: &AgentProfile,
    t_now: Timestamp,
) -> Result<HiddenState, BlendError> {
    if accepted.is_empty() {
        return Ok(local.clone());
    }
    let mut pooled = vec![0.0; local.dim()];
    for (field, v) in accepted {
        if v.dim() != local.dim() {
            return Err(BlendError::Dimension(local.dim(), v.dim()));
        }
        let a = profile.alpha[*field];
        for (p, x) in pooled.iter_mut().zip(v.as_slice()) {
            *p += a * x;
        }
    }
    let pooled = Embedding::normalized(pooled);
    if pooled.is_zero() {
        return Ok(local.clone());
    }
    let dt = (t_now - local.last_update).max(0) as f64;
    let h = local
        .h
        .iter()
        .zip(pooled.as_slice())
        .zip(&local.tau)
        .map(|((&h, &p), &tau)| {
            let gamma = (dt / tau).min(1.0);
            (1.0 - gamma) * h + gamma * p
        })
        .collect();
    Ok(HiddenState {
        h,
        tau: local.tau.clone(),
        last_update: t_now,
    })
}

/// State snapshot exchanged between agents at each sync round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSync {
    pub agent: AgentId,
    pub ts: Timestamp,
    pub h: Vec<f64>,
    pub tau: Vec<f64>,
}

impl StateSync {
    pub fn of(agent: &AgentId, ts: Timestamp, state: &HiddenState) -> Self {
        StateSync {
            agent: agent.clone(),
            ts,
            h: state.h.clone(),
            tau: state.tau.clone(),
        }
    }
}
