//! Timed multi-agent stories, used both as simulator scenarios and as
//! dataset-generation input, plus field extraction from raw signal text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmb::Timestamp;
use crate::field::FieldId;
use crate::profile::{Role, HEURISTIC_TIER_CONFIDENCE, LLM_TIER_CONFIDENCE};

pub const MIN_SIGNALS: usize = 4;
pub const MAX_SIGNALS: usize = 10;

#[derive(Debug, Error)]
pub enum NarrativeError {
    #[error("narrative `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    /// Seconds from the start of the story.
    pub t: Timestamp,
    /// Agent type, e.g. `coding`.
    pub agent: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mood: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<String>,
    /// Pre-extracted field texts; when present they replace heuristic extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<BTreeMap<FieldId, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
}

/// A human (or validator agent) acting on the block produced by a signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationAction {
    pub t: Timestamp,
    pub agent: String,
    /// Index into `signals`.
    pub signal: usize,
}

/// The block produced by a signal is sent again, unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rebroadcast {
    pub t: Timestamp,
    pub signal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Narrative {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub signals: Vec<Signal>,
    #[serde(default)]
    pub outcome: String,
    /// Agent types present without emitting signals.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub roles: BTreeMap<String, Role>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validations: Vec<ValidationAction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rebroadcasts: Vec<Rebroadcast>,
}

impl Narrative {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, NarrativeError> {
        let text = fs::read_to_string(path).map_err(|source| NarrativeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| NarrativeError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads every `*.json` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, NarrativeError> {
        let io = |source| NarrativeError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }

    /// Dataset narratives: 4–10 signals with strictly increasing times.
    pub fn validate(&self) -> Result<(), NarrativeError> {
        let invalid = |message: String| NarrativeError::Invalid {
            name: self.name.clone(),
            message,
        };
        if !(MIN_SIGNALS..=MAX_SIGNALS).contains(&self.signals.len()) {
            return Err(invalid(format!(
                "{} signals; a narrative needs {MIN_SIGNALS} to {MAX_SIGNALS}",
                self.signals.len()
            )));
        }
        self.validate_timing()
    }

    /// Scenario narratives only need ordered, well-referenced signals.
    pub fn validate_timing(&self) -> Result<(), NarrativeError> {
        let invalid = |message: String| NarrativeError::Invalid {
            name: self.name.clone(),
            message,
        };
        if self.signals.is_empty() {
            return Err(invalid("no signals".into()));
        }
        if self.signals.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(invalid("signal times must strictly increase".into()));
        }
        if self.signals[0].t < 0 {
            return Err(invalid("signal times must be non-negative".into()));
        }
        for v in &self.validations {
            let s = self
                .signals
                .get(v.signal)
                .ok_or_else(|| invalid(format!("validation refers to missing signal {}", v.signal)))?;
            if v.t <= s.t {
                return Err(invalid(format!("validation of signal {} must come after it", v.signal)));
            }
        }
        for r in &self.rebroadcasts {
            let s = self
                .signals
                .get(r.signal)
                .ok_or_else(|| invalid(format!("rebroadcast refers to missing signal {}", r.signal)))?;
            if r.t <= s.t {
                return Err(invalid(format!("rebroadcast of signal {} must come after it", r.signal)));
            }
        }
        Ok(())
    }

    /// Every agent type taking part, sorted.
    pub fn agent_types(&self) -> Vec<String> {
        let mut types: Vec<String> = self
            .signals
            .iter()
            .map(|s| s.agent.clone())
            .chain(self.agents.iter().cloned())
            .chain(self.validations.iter().map(|v| v.agent.clone()))
            .collect();
        types.sort();
        types.dedup();
        types
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Llm,
    Heuristic,
}

impl Tier {
    pub fn confidence(self) -> f64 {
        match self {
            Tier::Llm => LLM_TIER_CONFIDENCE,
            Tier::Heuristic => HEURISTIC_TIER_CONFIDENCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Extraction {
    pub texts: BTreeMap<FieldId, String>,
    pub mood_va: (f64, f64),
    pub tier: Tier,
}

impl Extraction {
    pub fn confidence(&self) -> f64 {
        self.tier.confidence()
    }
}

pub trait FieldExtractor {
    fn tier(&self) -> Tier;
    /// `None` when this tier cannot handle the signal.
    fn extract(&self, signal: &Signal) -> Option<Extraction>;
}

/// Stand-in for model-based extraction. Signals that carry pre-extracted
/// fields are passed through at this tier; anything else is declined.
#[derive(Clone, Copy, Debug, Default)]
pub struct LlmStub;

impl FieldExtractor for LlmStub {
    fn tier(&self) -> Tier {
        Tier::Llm
    }

    fn extract(&self, signal: &Signal) -> Option<Extraction> {
        let fields = signal.fields.as_ref()?;
        Some(Extraction {
            texts: fields.clone(),
            mood_va: mood_coordinates(signal),
            tier: Tier::Llm,
        })
    }
}

/// Keyword and position rules over the raw signal text.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeuristicExtractor;

const ISSUE_WORDS: &[&str] = &[
    "error", "bug", "fail", "broke", "blocked", "stuck", "problem", "issue", "pain", "sore", "tired",
    "exhaust", "stress", "overdue", "late", "skip", "crash", "can't", "cannot", "missed", "risk", "drop",
    "conflict", "complain", "sedentary", "fatigue", "burnout", "anxious", "slow", "regress",
];
const INTENT_WORDS: &[&str] = &[
    "want", "need", "plan", "going to", "will ", "try", "switch", "submit", "schedule", "let's", "should",
    "start", "book", "review", "prepare", "ask", "suggest", "recommend", "queue", "draft",
];
const MOTIVATION_WORDS: &[&str] = &["because", "so that", "in order to", "to stay", "to keep", "to avoid", "to get", "since"];
const COMMITMENT_WORDS: &[&str] = &[
    "deadline", "today", "tonight", "tomorrow", "due", "promised", "committed", "meeting", "by friday",
    "by monday", "appointment", "signed", "this week", "o'clock", "am ", "pm ", "before",
];

fn clauses(text: &str) -> Vec<String> {
    text.split([',', ';', '.', '—', '\n'])
        .flat_map(|c| c.split(" - "))
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect()
}

fn find_clause(clauses: &[String], words: &[&str]) -> Option<String> {
    clauses.iter().find_map(|c| {
        let lower = format!(" {} ", c.to_lowercase());
        words.iter().any(|w| lower.contains(&format!(" {w}"))).then(|| c.clone())
    })
}

/// Time-of-day phrase for an offset from midnight.
fn time_of_day(t: Timestamp) -> &'static str {
    match (t.rem_euclid(86_400)) / 3600 {
        5..=11 => "morning",
        12..=16 => "afternoon",
        17..=21 => "evening",
        _ => "late night",
    }
}

impl FieldExtractor for HeuristicExtractor {
    fn tier(&self) -> Tier {
        Tier::Heuristic
    }

    fn extract(&self, signal: &Signal) -> Option<Extraction> {
        let parts = clauses(&signal.text);
        let mut texts = BTreeMap::new();
        if let Some(first) = parts.first() {
            texts.insert(FieldId::Focus, first.clone());
        }
        let rest = if parts.len() > 1 { &parts[1..] } else { &parts[..] };
        if let Some(c) = find_clause(&parts, ISSUE_WORDS) {
            texts.insert(FieldId::Issue, c);
        }
        if let Some(c) = find_clause(rest, INTENT_WORDS) {
            texts.insert(FieldId::Intent, c);
        }
        if let Some(c) = find_clause(&parts, MOTIVATION_WORDS) {
            texts.insert(FieldId::Motivation, c);
        }
        if let Some(c) = find_clause(&parts, COMMITMENT_WORDS) {
            texts.insert(FieldId::Commitment, c);
        }
        texts.insert(
            FieldId::Perspective,
            format!("{} agent, {}", signal.agent, time_of_day(signal.t)),
        );
        let mood = match (&signal.mood, &signal.energy) {
            (Some(m), Some(e)) => Some(format!("{m}, {e} energy")),
            (Some(m), None) => Some(m.clone()),
            (None, Some(e)) => Some(format!("{e} energy")),
            (None, None) => None,
        };
        if let Some(m) = mood {
            texts.insert(FieldId::Mood, m);
        }
        Some(Extraction {
            texts,
            mood_va: mood_coordinates(signal),
            tier: Tier::Heuristic,
        })
    }
}

/// Tries the model tier first and falls back to the heuristic rules.
pub fn extract(signal: &Signal) -> Extraction {
    LlmStub
        .extract(signal)
        .or_else(|| HeuristicExtractor.extract(signal))
        .expect("heuristic extraction always succeeds")
}

const MOOD_LEXICON: &[(&str, f64, f64)] = &[
    ("angry", -0.7, 0.8),
    ("anxious", -0.5, 0.6),
    ("bored", -0.3, -0.5),
    ("calm", 0.4, -0.5),
    ("content", 0.6, -0.2),
    ("curious", 0.4, 0.4),
    ("energized", 0.6, 0.7),
    ("excited", 0.7, 0.8),
    ("focused", 0.3, 0.3),
    ("frustrated", -0.6, 0.5),
    ("happy", 0.8, 0.5),
    ("motivated", 0.6, 0.5),
    ("neutral", 0.0, 0.0),
    ("overwhelmed", -0.6, 0.6),
    ("relaxed", 0.5, -0.4),
    ("relieved", 0.5, -0.3),
    ("sad", -0.7, -0.4),
    ("stressed", -0.6, 0.7),
    ("tired", -0.3, -0.6),
    ("worried", -0.5, 0.4),
];

/// Valence and arousal for a signal: explicit values win, otherwise the mood
/// word is looked up and the energy label shifts arousal.
pub fn mood_coordinates(signal: &Signal) -> (f64, f64) {
    let (mut v, mut a) = signal
        .mood
        .as_deref()
        .map(|m| {
            let m = m.to_lowercase();
            MOOD_LEXICON
                .iter()
                .find(|(w, _, _)| m.contains(w))
                .map_or((0.0, 0.0), |(_, v, a)| (*v, *a))
        })
        .unwrap_or((0.0, 0.0));
    match signal.energy.as_deref().map(str::to_lowercase).as_deref() {
        Some("low") => a -= 0.3,
        Some("high") => a += 0.3,
        _ => {}
    }
    if let Some(x) = signal.valence {
        v = x;
    }
    if let Some(x) = signal.arousal {
        a = x;
    }
    (v.clamp(-1.0, 1.0), a.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(text: &str) -> Signal {
        Signal {
            t: 9 * 3600,
            agent: "coding".into(),
            text: text.into(),
            mood: Some("frustrated".into()),
            energy: Some("low".into()),
            fields: None,
            valence: None,
            arousal: None,
        }
    }

    #[test]
    fn heuristic_extraction() {
        let e = extract(&signal(
            "debugging auth module for 3 hours, tests keep failing, need to ship fix before the 5 pm demo",
        ));
        assert_eq!(e.tier, Tier::Heuristic);
        assert_eq!(e.confidence(), 0.80);
        assert_eq!(e.texts[&FieldId::Focus], "debugging auth module for 3 hours");
        assert_eq!(e.texts[&FieldId::Issue], "tests keep failing");
        assert_eq!(e.texts[&FieldId::Intent], "need to ship fix before the 5 pm demo");
        assert_eq!(e.texts[&FieldId::Commitment], "need to ship fix before the 5 pm demo");
        assert_eq!(e.texts[&FieldId::Perspective], "coding agent, morning");
        assert_eq!(e.texts[&FieldId::Mood], "frustrated, low energy");
        assert!(!e.texts.contains_key(&FieldId::Motivation));
        assert_eq!(e.mood_va, (-0.6, 0.2));
    }

    #[test]
    fn provided_fields_use_model_tier() {
        let mut s = signal("x");
        let mut f = BTreeMap::new();
        f.insert(FieldId::Focus, "given".to_string());
        s.fields = Some(f);
        let e = extract(&s);
        assert_eq!(e.tier, Tier::Llm);
        assert_eq!(e.confidence(), 0.95);
        assert_eq!(e.texts.len(), 1);
    }

    #[test]
    fn signal_count_and_order() {
        let n = Narrative {
            name: "n".into(),
            description: String::new(),
            signals: (0..3).map(|i| Signal { t: i, ..signal("a") }).collect(),
            outcome: String::new(),
            agents: vec![],
            roles: BTreeMap::new(),
            validations: vec![],
            rebroadcasts: vec![],
        };
        assert!(n.validate().is_err());
        assert!(n.validate_timing().is_ok());
        let mut m = n.clone();
        m.signals.push(Signal { t: 1, ..signal("b") });
        assert!(m.validate().is_err());
        m.signals[3].t = 10;
        assert!(m.validate().is_ok());
    }
}
