//! Heuristic per-field evaluation of an incoming memory block against local anchors.
//!
//! Each field is fused with the receiver's anchors by a weighted average, the
//! drift of the fused vector from the incoming one is measured per field, and
//! a band-pass over those drifts decides whether the block is redundant,
//! aligned, guarded or rejected.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cmb::{AgentId, Cmb, CmbKey, FieldEntry, Lineage, Timestamp, METHOD_SVAF};
use crate::encoder::{cosine, Embedding, EncoderError, NEUTRAL_TEXT};
use crate::error::CmbError;
use crate::field::{FieldId, Fields};
use crate::profile::AgentProfile;
use crate::store::MemoryStore;

/// Weight of the staleness penalty `(1 − τ_fresh)` in the aggregate drift.
pub const STALE_WEIGHT: f64 = 0.25;
/// Factor applied to every anchor weight when a block is guarded.
pub const GUARDED_ATTENUATION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SvafError {
    #[error("clock skew: evaluation time {t_now} precedes origin time {t_origin}")]
    ClockSkew { t_now: Timestamp, t_origin: Timestamp },
    #[error("freshness window must be positive, got {0}")]
    InvalidTau(f64),
    #[error("thresholds must satisfy 0 < redundant < aligned < guarded < 1")]
    InvalidThresholds,
    #[error("sender confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cmb(#[from] CmbError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub redundant: f64,
    pub aligned: f64,
    pub guarded: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            redundant: 0.10,
            aligned: 0.25,
            guarded: 0.50,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), SvafError> {
        let ok = 0.0 < self.redundant
            && self.redundant < self.aligned
            && self.aligned < self.guarded
            && self.guarded < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SvafError::InvalidThresholds)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Redundant,
    Aligned,
    Guarded,
    Rejected,
}

impl Decision {
    pub const ALL: [Decision; 4] = [
        Decision::Redundant,
        Decision::Aligned,
        Decision::Guarded,
        Decision::Rejected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Decision::Redundant => "redundant",
            Decision::Aligned => "aligned",
            Decision::Guarded => "guarded",
            Decision::Rejected => "rejected",
        }
    }

    /// Aligned and guarded blocks produce a remix.
    pub fn is_accepted(self) -> bool {
        matches!(self, Decision::Aligned | Decision::Guarded)
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Why a decision was reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// The band-pass over field drifts.
    BandPass,
    /// The receiver had no anchors at all.
    ColdStore,
    /// This block was already evaluated (or is stored) here.
    AlreadySeen,
    /// Every drift was below the redundancy threshold but some field is
    /// unlike every anchor, so the band-pass ran on the aggregate alone.
    Novelty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvafConfig {
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_attenuation")]
    pub guarded_attenuation: f64,
}

fn default_attenuation() -> f64 {
    GUARDED_ATTENUATION
}

impl Default for SvafConfig {
    fn default() -> Self {
        SvafConfig {
            thresholds: Thresholds::default(),
            guarded_attenuation: GUARDED_ATTENUATION,
        }
    }
}

/// `exp(−(t_now − t_origin)/τ)`.
pub fn temporal_freshness(t_now: Timestamp, t_origin: Timestamp, tau: f64) -> Result<f64, SvafError> {
    if !(tau > 0.0) {
        return Err(SvafError::InvalidTau(tau));
    }
    if t_now < t_origin {
        return Err(SvafError::ClockSkew { t_now, t_origin });
    }
    Ok((-((t_now - t_origin) as f64) / tau).exp())
}

/// One anchor's view of a single field.
#[derive(Clone, Copy, Debug)]
pub struct AnchorField<'a> {
    pub entry: &'a FieldEntry,
    pub t_origin: Timestamp,
    pub confidence: f64,
    pub lifecycle_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldAudit {
    pub w_new: f64,
    pub anchor_weights: Vec<f64>,
    /// `1 − max_j cos(v_new, v_j)`, clamped to [0, 1]; 0 without anchors.
    pub novelty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<&'static str>,
}

impl FieldAudit {
    /// Fraction of total weight carried by anchors.
    pub fn anchor_share(&self) -> f64 {
        let anchors: f64 = self.anchor_weights.iter().sum();
        let total = self.w_new + anchors;
        if total > 0.0 {
            anchors / total
        } else {
            0.0
        }
    }

    /// Index of the heaviest anchor (first on ties), if any carries weight.
    pub fn dominant_anchor(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &w) in self.anchor_weights.iter().enumerate() {
            if w > 0.0 && best.map_or(true, |(_, b)| w > b) {
                best = Some((i, w));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldFusion {
    pub fused: Embedding,
    pub drift: f64,
    pub audit: FieldAudit,
}

pub fn fuse_field(
    field: FieldId,
    incoming: &FieldEntry,
    anchors: &[AnchorField<'_>],
    profile: &AgentProfile,
    sender_confidence: f64,
    t_now: Timestamp,
) -> Result<FieldFusion, SvafError> {
    fuse_field_scaled(field, incoming, anchors, profile, sender_confidence, t_now, 1.0)
}

/// [`fuse_field`] with every anchor weight multiplied by `anchor_scale`.
pub fn fuse_field_scaled(
    field: FieldId,
    incoming: &FieldEntry,
    anchors: &[AnchorField<'_>],
    profile: &AgentProfile,
    sender_confidence: f64,
    t_now: Timestamp,
    anchor_scale: f64,
) -> Result<FieldFusion, SvafError> {
    if !(0.0..=1.0).contains(&sender_confidence) {
        return Err(SvafError::InvalidConfidence(sender_confidence));
    }
    let v_new = incoming.vector.as_slice();
    let dim = v_new.len();
    if anchors.is_empty() {
        return Ok(FieldFusion {
            fused: incoming.vector.clone(),
            drift: 0.0,
            audit: FieldAudit {
                w_new: sender_confidence,
                anchor_weights: Vec::new(),
                novelty: 0.0,
                note: Some("no anchors"),
            },
        });
    }

    let alpha = profile.alpha[field];
    let mut weights = Vec::with_capacity(anchors.len());
    let mut max_cos = f64::NEG_INFINITY;
    let mut acc: Vec<f64> = v_new.iter().map(|x| sender_confidence * x).collect();
    for a in anchors {
        let v_j = a.entry.vector.as_slice();
        if v_j.len() != dim {
            return Err(EncoderError::DimensionMismatch {
                left: dim,
                right: v_j.len(),
            }
            .into());
        }
        let sim = cosine(v_new, v_j);
        max_cos = max_cos.max(sim);
        let fresh = temporal_freshness(t_now, a.t_origin, profile.tau_freshness)?;
        let w = anchor_scale * alpha * sim.max(0.0) * fresh * a.confidence * a.lifecycle_weight;
        for (s, x) in acc.iter_mut().zip(v_j) {
            *s += w * x;
        }
        weights.push(w);
    }
    // Normalizing the sum equals normalizing the weighted average.
    let fused = Embedding::normalized(acc);
    let drift = (1.0 - cosine(fused.as_slice(), v_new)).clamp(0.0, 1.0);
    Ok(FieldFusion {
        fused,
        drift,
        audit: FieldAudit {
            w_new: sender_confidence,
            anchor_weights: weights,
            novelty: (1.0 - max_cos).clamp(0.0, 1.0),
            note: None,
        },
    })
}

/// α-weighted mean drift plus the staleness penalty, clamped to [0, 1].
pub fn aggregate_drift(drifts: &Fields<f64>, alpha: &Fields<f64>, freshness: f64) -> f64 {
    let weight: f64 = alpha.values().sum();
    let mean = if weight > 0.0 {
        FieldId::ALL.iter().map(|&f| alpha[f] * drifts[f]).sum::<f64>() / weight
    } else {
        0.0
    };
    (mean + (1.0 - freshness) * STALE_WEIGHT).clamp(0.0, 1.0)
}

/// Aligned, guarded or rejected by aggregate drift alone.
pub fn band(total_drift: f64, thresholds: &Thresholds) -> Decision {
    if total_drift <= thresholds.aligned {
        Decision::Aligned
    } else if total_drift <= thresholds.guarded {
        Decision::Guarded
    } else {
        Decision::Rejected
    }
}

/// The band-pass. Redundant only if every field drift is below the redundancy threshold.
pub fn classify(
    drifts: &Fields<f64>,
    alpha: &Fields<f64>,
    freshness: f64,
    thresholds: &Thresholds,
) -> (Decision, f64) {
    let total = aggregate_drift(drifts, alpha, freshness);
    let max_drift = drifts.values().copied().fold(0.0, f64::max);
    if max_drift < thresholds.redundant {
        (Decision::Redundant, total)
    } else {
        (band(total, thresholds), total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutcome {
    pub receiver: AgentId,
    pub incoming: CmbKey,
    pub t_now: Timestamp,
    pub decision: Decision,
    pub basis: Basis,
    pub per_field_drift: Fields<f64>,
    pub total_drift: f64,
    pub freshness: f64,
    pub fused: Fields<Embedding>,
    pub audit: Fields<FieldAudit>,
    pub anchors: Vec<CmbKey>,
    pub mood_delivered: bool,
    pub remix: Option<Cmb>,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl FusionOutcome {
    pub fn max_drift(&self) -> f64 {
        self.per_field_drift.values().copied().fold(0.0, f64::max)
    }

    /// One-line JSON record of this evaluation.
    pub fn audit_json(&self) -> Value {
        let drift: serde_json::Map<String, Value> = self
            .per_field_drift
            .iter()
            .map(|(f, d)| (f.name().to_string(), json!(round3(*d))))
            .collect();
        let weights: serde_json::Map<String, Value> = self
            .audit
            .iter()
            .map(|(f, a)| {
                let anchors: Vec<f64> = a.anchor_weights.iter().map(|w| round3(*w)).collect();
                (f.name().to_string(), json!({ "w_new": round3(a.w_new), "anchors": anchors }))
            })
            .collect();
        json!({
            "agent": self.receiver,
            "incoming": self.incoming,
            "t": self.t_now,
            "decision": self.decision,
            "basis": self.basis,
            "drift": drift,
            "total_drift": round3(self.total_drift),
            "freshness": round3(self.freshness),
            "weights": weights,
            "mood_delivered": self.mood_delivered,
            "remix": self.remix.as_ref().map(|r| r.key().clone()),
        })
    }

    pub fn audit_line(&self) -> String {
        self.audit_json().to_string()
    }
}

/// Evaluates `incoming` against the receiver's store. Pure: the store is not
/// modified; see [`commit`] for applying the result.
pub fn evaluate_cmb(
    store: &MemoryStore,
    profile: &AgentProfile,
    incoming: &Cmb,
    t_now: Timestamp,
    config: &SvafConfig,
) -> Result<FusionOutcome, SvafError> {
    config.thresholds.validate()?;
    let freshness = temporal_freshness(t_now, incoming.ts(), profile.tau_freshness)?;
    if let Some(existing) = store.iter().next() {
        if existing.cmb.dim() != incoming.dim() {
            return Err(EncoderError::DimensionMismatch {
                left: existing.cmb.dim(),
                right: incoming.dim(),
            }
            .into());
        }
    }
    let anchor_records = store.top_anchors(t_now, profile.tau_freshness, profile.anchor_k);
    let anchor_keys: Vec<CmbKey> = anchor_records.iter().map(|r| r.cmb.key().clone()).collect();

    let fuse_all = |scale: f64| -> Result<Fields<FieldFusion>, SvafError> {
        let mut out = Vec::with_capacity(FieldId::COUNT);
        for field in FieldId::ALL {
            let anchors: Vec<AnchorField<'_>> = anchor_records
                .iter()
                .map(|r| AnchorField {
                    entry: r.cmb.field(field),
                    t_origin: r.cmb.ts(),
                    confidence: r.cmb.confidence(),
                    lifecycle_weight: r.state().anchor_weight(),
                })
                .collect();
            out.push(fuse_field_scaled(
                field,
                incoming.field(field),
                &anchors,
                profile,
                incoming.confidence(),
                t_now,
                scale,
            )?);
        }
        Ok(Fields(out.try_into().unwrap_or_else(|_| unreachable!())))
    };

    let mut fusions = fuse_all(1.0)?;
    let drifts = fusions.map(|_, f| f.drift);
    let (mut decision, mut total) = classify(&drifts, &profile.alpha, freshness, &config.thresholds);
    let mut basis = Basis::BandPass;
    if anchor_records.is_empty() {
        decision = Decision::Aligned;
        total = 0.0;
        basis = Basis::ColdStore;
    } else if store.has_seen(incoming.key()) || store.contains(incoming.key()) {
        decision = Decision::Redundant;
        basis = Basis::AlreadySeen;
    } else if decision == Decision::Redundant {
        let max_novelty = fusions.values().map(|f| f.audit.novelty).fold(0.0, f64::max);
        if max_novelty >= config.thresholds.redundant {
            decision = band(total, &config.thresholds);
            basis = Basis::Novelty;
        }
    }

    if decision == Decision::Guarded {
        fusions = fuse_all(config.guarded_attenuation)?;
    }

    let remix = if decision.is_accepted() {
        Some(build_remix(store, profile, incoming, t_now, &fusions, &anchor_records)?)
    } else {
        None
    };

    Ok(FusionOutcome {
        receiver: profile.agent_id.clone(),
        incoming: incoming.key().clone(),
        t_now,
        decision,
        basis,
        per_field_drift: fusions.map(|_, f| f.drift),
        total_drift: total,
        freshness,
        fused: fusions.map(|_, f| f.fused.clone()),
        audit: fusions.map(|_, f| f.audit.clone()),
        anchors: anchor_keys,
        mood_delivered: decision == Decision::Rejected && incoming.has_non_neutral_mood(),
        remix,
    })
}

fn build_remix(
    store: &MemoryStore,
    profile: &AgentProfile,
    incoming: &Cmb,
    t_now: Timestamp,
    fusions: &Fields<FieldFusion>,
    anchors: &[&crate::store::StoredCmb],
) -> Result<Cmb, SvafError> {
    let fields = Fields::from_fn(|field| {
        let fusion = &fusions[field];
        let src = incoming.field(field);
        let dominant = fusion.audit.dominant_anchor().map(|i| anchors[i].cmb.as_ref());
        let text = match dominant {
            Some(anchor) if fusion.audit.anchor_share() > 0.5 => anchor.field(field).text.clone(),
            _ if src.is_neutral_text() => NEUTRAL_TEXT.to_string(),
            _ if src.text.trim().is_empty() => String::new(),
            _ => format!("{} remix of {}", profile.agent_id, src.text),
        };
        let vector = if fusion.fused.is_zero() && !text.trim().is_empty() {
            // Nothing to fuse; keep the incoming vector so the entry stays unit-norm.
            src.vector.clone()
        } else {
            fusion.fused.clone()
        };
        let text = if vector.is_zero() { String::new() } else { text };
        let mut entry = FieldEntry::new(text, vector);
        if field == FieldId::Mood {
            let (v, a) = remix_mood(incoming, dominant.map(|c| (c.confidence(), c.field(FieldId::Mood))));
            entry.valence = Some(v);
            entry.arousal = Some(a);
        }
        entry
    });
    Ok(Cmb::from_parts(
        store.next_key(t_now),
        profile.agent_id.clone(),
        t_now,
        profile.default_confidence,
        fields,
        Lineage {
            parents: vec![incoming.key().clone()],
            method: METHOD_SVAF.to_string(),
        },
    )?)
}

/// Confidence-weighted average of incoming and dominant-anchor mood coordinates.
fn remix_mood(incoming: &Cmb, anchor: Option<(f64, &FieldEntry)>) -> (f64, f64) {
    let mood = incoming.field(FieldId::Mood);
    let (v0, a0) = (mood.valence.unwrap_or(0.0), mood.arousal.unwrap_or(0.0));
    let c0 = incoming.confidence();
    let Some((c1, other)) = anchor else {
        return (v0, a0);
    };
    let (v1, a1) = (other.valence.unwrap_or(0.0), other.arousal.unwrap_or(0.0));
    let total = c0 + c1;
    if total == 0.0 {
        return (v0, a0);
    }
    (
        ((c0 * v0 + c1 * v1) / total).clamp(-1.0, 1.0),
        ((c0 * a0 + c1 * a1) / total).clamp(-1.0, 1.0),
    )
}

/// Applies an evaluation to the receiver's store: remembers the incoming key
/// and stores the remix, if any.
pub fn commit(store: &mut MemoryStore, incoming: &Cmb, outcome: &FusionOutcome) -> Result<Option<Arc<Cmb>>, CmbError> {
    store.note_seen(incoming.key(), incoming.origin(), outcome.t_now);
    match &outcome.remix {
        Some(remix) => store.append(remix.clone()).map(Some),
        None => Ok(None),
    }
}
