//! Labelled sender/receiver samples generated from narratives.
//!
//! Every signal is paired with every agent type other than its sender's. A
//! usefulness draw (modulated by freshness at receipt) and a rejection draw
//! decide the class; both draws are kept in the sample so labels can be
//! re-derived exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmb::{encode_fields, Timestamp};
use crate::encoder::{cosine, fnv1a64, Embedding, FieldEncoder};
use crate::field::{FieldId, Fields};
use crate::narrative::{extract, Narrative, NarrativeError, Signal, Tier};
use crate::profile::AgentProfile;
use crate::svaf::{temporal_freshness, SvafError};

pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
/// Class shares reported alongside generated stats for comparison.
pub const REFERENCE_DISTRIBUTION: [f64; 3] = [0.25, 0.67, 0.08];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown agent type `{0}`")]
    UnknownAgentType(String),
    #[error("agent type `{0}` listed twice")]
    DuplicateAgentType(String),
    #[error("no domain phrases for agent type `{0}`")]
    NoPrototype(String),
    #[error("invalid label rules: {0}")]
    Rules(String),
    #[error(transparent)]
    Narrative(#[from] NarrativeError),
    #[error(transparent)]
    Svaf(#[from] SvafError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("duplicate narrative name `{0}`")]
    DuplicateNarrative(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Aligned = 0,
    Guarded = 1,
    Rejected = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Aligned, Label::Guarded, Label::Rejected];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Topic tags a signal can carry, found by keyword.
pub const CONTENT_TAGS: &[(&str, &[&str])] = &[
    ("energy", &["energy", "tired", "exhaust", "fatigue", "sleep", "drowsy", "nap"]),
    ("stress", &["stress", "frustrat", "anxious", "overwhelm", "error", "pressure", "panic", "tense"]),
    ("sedentary", &["sedentary", "sitting", "no movement", "without moving", "desk for"]),
    ("mood", &["music", "playlist", "track", "song", "mood", "ambient"]),
    ("knowledge", &["paper", "research", "article", "arxiv", "reading", "study"]),
    ("schedule", &["meeting", "calendar", "deadline", "due", "appointment", "schedule"]),
    ("money", &["invoice", "budget", "payment", "spend", "bill", "cost"]),
    ("health", &["headache", "heart", "sick", "pain", "symptom", "doctor", "medication"]),
];

/// Tags present in a signal's text and mood/energy labels.
pub fn content_tags(signal: &Signal) -> BTreeSet<String> {
    let text = format!(
        "{} {} {}",
        signal.text,
        signal.mood.as_deref().unwrap_or(""),
        signal.energy.as_deref().unwrap_or("")
    )
    .to_lowercase();
    CONTENT_TAGS
        .iter()
        .filter(|(_, words)| words.iter().any(|w| text.contains(w)))
        .map(|(tag, _)| tag.to_string())
        .collect()
}

/// One row of the usefulness table. `*` matches any agent type; a missing tag
/// matches any content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsefulnessRule {
    pub sender: String,
    pub receiver: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub p: f64,
}

impl UsefulnessRule {
    fn new(sender: &str, receiver: &str, tag: Option<&str>, p: f64) -> Self {
        UsefulnessRule {
            sender: sender.into(),
            receiver: receiver.into(),
            tag: tag.map(Into::into),
            p,
        }
    }

    fn matches(&self, sender: &str, receiver: &str, tags: &BTreeSet<String>) -> bool {
        (self.sender == "*" || self.sender == sender)
            && (self.receiver == "*" || self.receiver == receiver)
            && self.tag.as_ref().map_or(true, |t| tags.contains(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRules {
    /// First matching rule wins.
    pub rules: Vec<UsefulnessRule>,
    pub default_p: f64,
    /// Useful signals at or above this freshness are aligned.
    pub fresh_threshold: f64,
    /// Share of usefulness lost by a fully stale signal.
    pub freshness_modulation: f64,
    /// Probability that a non-useful signal is rejected rather than guarded.
    pub reject_probability: f64,
}

impl Default for LabelRules {
    fn default() -> Self {
        let r = UsefulnessRule::new;
        LabelRules {
            rules: vec![
                r("coding", "fitness", Some("energy"), 0.7),
                r("coding", "fitness", Some("stress"), 0.7),
                r("coding", "fitness", Some("sedentary"), 0.7),
                r("coding", "knowledge", None, 0.2),
                r("*", "music", Some("stress"), 0.7),
                r("*", "music", Some("energy"), 0.7),
                r("*", "music", Some("mood"), 0.7),
                r("*", "fitness", Some("sedentary"), 0.7),
                r("*", "fitness", Some("energy"), 0.6),
                r("*", "health", Some("health"), 0.8),
                r("*", "health", Some("energy"), 0.6),
                r("*", "health", Some("stress"), 0.6),
                r("*", "knowledge", Some("knowledge"), 0.6),
                r("*", "coding", Some("knowledge"), 0.5),
                r("*", "coding", Some("schedule"), 0.5),
                r("*", "messaging", Some("schedule"), 0.6),
                r("*", "finance", Some("money"), 0.8),
                r("*", "legal", Some("schedule"), 0.3),
            ],
            default_p: 0.3,
            fresh_threshold: 0.5,
            freshness_modulation: 0.5,
            reject_probability: 0.7,
        }
    }
}

impl LabelRules {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if let Some(r) = self.rules.iter().find(|r| !unit(r.p)) {
            return Err(DatasetError::Rules(format!(
                "p = {} for {} → {} outside [0, 1]",
                r.p, r.sender, r.receiver
            )));
        }
        for (name, x) in [
            ("default_p", self.default_p),
            ("fresh_threshold", self.fresh_threshold),
            ("freshness_modulation", self.freshness_modulation),
            ("reject_probability", self.reject_probability),
        ] {
            if !unit(x) {
                return Err(DatasetError::Rules(format!("{name} = {x} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Base usefulness probability before freshness modulation.
    pub fn base_probability(&self, sender: &str, receiver: &str, tags: &BTreeSet<String>) -> f64 {
        self.rules
            .iter()
            .find(|r| r.matches(sender, receiver, tags))
            .map_or(self.default_p, |r| r.p)
    }

    pub fn effective_probability(&self, p: f64, freshness: f64) -> f64 {
        p * (1.0 - self.freshness_modulation * (1.0 - freshness))
    }

    /// The class implied by a usefulness outcome, freshness and the rejection draw.
    pub fn decide(&self, useful: bool, freshness: f64, u_reject: f64) -> Label {
        match (useful, freshness >= self.fresh_threshold) {
            (true, true) => Label::Aligned,
            (true, false) => Label::Guarded,
            (false, _) if u_reject < self.reject_probability => Label::Rejected,
            (false, _) => Label::Guarded,
        }
    }
}

/// Per-receiver-type reference vectors for drift labels.
#[derive(Clone, Debug)]
pub struct DomainPrototypes {
    prototypes: BTreeMap<String, Embedding>,
}

const BUILTIN_PHRASES: &str = include_str!("../fixtures/domain_phrases.json");

impl DomainPrototypes {
    /// `phrases` maps agent type → field → canonical phrases. A type's
    /// prototype is the α-weighted sum of its encoded phrases, normalized.
    pub fn from_phrases(
        phrases: &BTreeMap<String, BTreeMap<FieldId, Vec<String>>>,
        profiles: &[AgentProfile],
        encoder: &FieldEncoder,
    ) -> Self {
        let mut prototypes = BTreeMap::new();
        for p in profiles {
            let Some(by_field) = phrases.get(&p.agent_type) else {
                continue;
            };
            let mut sum = vec![0.0; encoder.dim()];
            for (field, list) in by_field {
                for phrase in list {
                    for (s, x) in sum.iter_mut().zip(encoder.encode(phrase).as_slice()) {
                        *s += p.alpha[*field] * x;
                    }
                }
            }
            prototypes.insert(p.agent_type.clone(), Embedding::normalized(sum));
        }
        DomainPrototypes { prototypes }
    }

    pub fn builtin(profiles: &[AgentProfile], encoder: &FieldEncoder) -> Self {
        let phrases = serde_json::from_str(BUILTIN_PHRASES).expect("bundled domain phrases parse");
        Self::from_phrases(&phrases, profiles, encoder)
    }

    pub fn get(&self, agent_type: &str) -> Option<&Embedding> {
        self.prototypes.get(agent_type)
    }
}

/// Cosine distance to the prototype, clamped to [0, 1].
pub fn drift_label(vector: &Embedding, prototype: &Embedding) -> f64 {
    (1.0 - cosine(vector.as_slice(), prototype.as_slice())).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleField {
    pub text: String,
    pub vector: Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub narrative: String,
    pub signal_index: usize,
    pub sender_type: String,
    pub receiver_type: String,
    pub t_signal: Timestamp,
    pub t_receipt: Timestamp,
    pub freshness: f64,
    pub tier: Tier,
    pub confidence: f64,
    pub fields: Fields<SampleField>,
    pub mood_va: (f64, f64),
    pub receiver_alpha: Fields<f64>,
    pub receiver_tau: f64,
    pub tags: BTreeSet<String>,
    pub p_useful: f64,
    pub p_effective: f64,
    pub u_useful: f64,
    pub u_reject: f64,
    pub useful: bool,
    pub decision: Label,
    /// `decision` as 0 aligned, 1 guarded, 2 rejected.
    pub class_index: usize,
    pub drift: Fields<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: BTreeMap<Label, usize>,
    pub fractions: BTreeMap<Label, f64>,
}

impl ClassStats {
    fn of<'a>(samples: impl Iterator<Item = &'a Sample>) -> Self {
        let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|l| (*l, 0)).collect();
        for s in samples {
            *counts.entry(s.decision).or_default() += 1;
        }
        let total: usize = counts.values().sum();
        let fractions = counts
            .iter()
            .map(|(l, n)| (*l, if total == 0 { 0.0 } else { *n as f64 / total as f64 }))
            .collect();
        ClassStats { counts, fractions }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub seed: u64,
    pub narratives: usize,
    pub samples: usize,
    pub train_narratives: usize,
    pub val_narratives: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub classes: ClassStats,
    pub by_receiver: BTreeMap<String, ClassStats>,
    pub reference_fractions: BTreeMap<Label, f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train_narratives: BTreeSet<String>,
    pub val_narratives: BTreeSet<String>,
    pub stats: Stats,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(|s| self.train_narratives.contains(&s.narrative))
    }

    pub fn val(&self) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(|s| self.val_narratives.contains(&s.narrative))
    }

    /// Writes `train.jsonl`, `val.jsonl` and `stats.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, rows) in [
            ("train.jsonl", self.train().collect::<Vec<_>>()),
            ("val.jsonl", self.val().collect()),
        ] {
            let path = dir.join(name);
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io(&path))?);
            for s in rows {
                serde_json::to_writer(&mut f, s).expect("sample serializes");
                f.write_all(b"\n").map_err(io(&path))?;
            }
            f.flush().map_err(io(&path))?;
        }
        let path = dir.join("stats.json");
        let text = serde_json::to_string_pretty(&self.stats).expect("stats serialize");
        fs::write(&path, text + "\n").map_err(io(&path))
    }
}

/// When the receiver looks at a signal: its own next signal in the story,
/// or the story's last signal if it has none later.
pub fn receipt_time(narrative: &Narrative, index: usize, receiver_type: &str) -> Timestamp {
    let signals = &narrative.signals;
    signals[index + 1..]
        .iter()
        .find(|s| s.agent == receiver_type)
        .or(signals.last())
        .map_or(signals[index].t, |s| s.t)
}

/// Narrative names held out for validation: a seeded shuffle, then the
/// first `round(n·fraction)` names (at least one when there are two or more).
pub fn split_names(names: &BTreeSet<String>, fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut order: Vec<&String> = names.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (names.len() as f64 * fraction).round() as usize;
    if names.len() >= 2 {
        n_val = n_val.clamp(1, names.len() - 1);
    }
    let val = order[..n_val].iter().map(|s| (*s).clone()).collect();
    let train = order[n_val..].iter().map(|s| (*s).clone()).collect();
    (train, val)
}

pub fn generate(
    narratives: &[Narrative],
    rules: &LabelRules,
    profiles: &[AgentProfile],
    encoder: &FieldEncoder,
    prototypes: &DomainPrototypes,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    generate_with_split(narratives, rules, profiles, encoder, prototypes, seed, DEFAULT_VAL_FRACTION)
}

pub fn generate_with_split(
    narratives: &[Narrative],
    rules: &LabelRules,
    profiles: &[AgentProfile],
    encoder: &FieldEncoder,
    prototypes: &DomainPrototypes,
    seed: u64,
    val_fraction: f64,
) -> Result<Dataset, DatasetError> {
    rules.validate()?;
    let mut by_type: BTreeMap<&str, &AgentProfile> = BTreeMap::new();
    for p in profiles {
        if by_type.insert(&p.agent_type, p).is_some() {
            return Err(DatasetError::DuplicateAgentType(p.agent_type.clone()));
        }
        if prototypes.get(&p.agent_type).is_none() {
            return Err(DatasetError::NoPrototype(p.agent_type.clone()));
        }
    }
    let mut sorted: Vec<&Narrative> = narratives.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(w) = sorted.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(DatasetError::DuplicateNarrative(w[0].name.clone()));
    }
    let mut samples = Vec::new();
    for n in &sorted {
        n.validate()?;
        if let Some(s) = n.signals.iter().find(|s| !by_type.contains_key(s.agent.as_str())) {
            return Err(DatasetError::UnknownAgentType(s.agent.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&n.name));
        for (i, signal) in n.signals.iter().enumerate() {
            let e = extract(signal);
            let fields = encode_fields(encoder, &e.texts, Some(e.mood_va));
            let tags = content_tags(signal);
            for (ty, receiver) in &by_type {
                if *ty == signal.agent {
                    continue;
                }
                let u_useful: f64 = rng.gen();
                let u_reject: f64 = rng.gen();
                let t_receipt = receipt_time(n, i, ty);
                let freshness = temporal_freshness(t_receipt, signal.t, receiver.tau_freshness)?;
                let p_useful = rules.base_probability(&signal.agent, ty, &tags);
                let p_effective = rules.effective_probability(p_useful, freshness);
                let useful = u_useful < p_effective;
                let proto = prototypes.get(ty).expect("checked above");
                let decision = rules.decide(useful, freshness, u_reject);
                samples.push(Sample {
                    narrative: n.name.clone(),
                    signal_index: i,
                    sender_type: signal.agent.clone(),
                    receiver_type: ty.to_string(),
                    t_signal: signal.t,
                    t_receipt,
                    freshness,
                    tier: e.tier,
                    confidence: e.confidence(),
                    fields: fields.map(|_, f| SampleField {
                        text: f.text.clone(),
                        vector: f.vector.clone(),
                    }),
                    mood_va: e.mood_va,
                    receiver_alpha: receiver.alpha.clone(),
                    receiver_tau: receiver.tau_freshness,
                    tags: tags.clone(),
                    p_useful,
                    p_effective,
                    u_useful,
                    u_reject,
                    useful,
                    decision,
                    class_index: decision.index(),
                    drift: fields.map(|_, f| drift_label(&f.vector, proto)),
                });
            }
        }
    }
    let names: BTreeSet<String> = sorted.iter().map(|n| n.name.clone()).collect();
    let (train, val) = split_names(&names, val_fraction, seed);
    let mut receivers: BTreeSet<&str> = BTreeSet::new();
    receivers.extend(samples.iter().map(|s| s.receiver_type.as_str()));
    let stats = Stats {
        seed,
        narratives: names.len(),
        samples: samples.len(),
        train_narratives: train.len(),
        val_narratives: val.len(),
        train_samples: samples.iter().filter(|s| train.contains(&s.narrative)).count(),
        val_samples: samples.iter().filter(|s| val.contains(&s.narrative)).count(),
        classes: ClassStats::of(samples.iter()),
        by_receiver: receivers
            .iter()
            .map(|r| (r.to_string(), ClassStats::of(samples.iter().filter(|s| s.receiver_type == *r))))
            .collect(),
        reference_fractions: Label::ALL.iter().map(|l| (*l, REFERENCE_DISTRIBUTION[l.index()])).collect(),
    };
    Ok(Dataset {
        samples,
        train_narratives: train,
        val_narratives: val,
        stats,
    })
}
