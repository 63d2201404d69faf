//! Cognitive memory blocks: immutable seven-field observations with lineage.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{fnv1a64, Embedding, FieldEncoder, NEUTRAL_TEXT};
use crate::error::CmbError;
use crate::field::{FieldId, Fields};

/// Seconds since the epoch (simulated or wall clock).
pub type Timestamp = i64;

pub const METHOD_SVAF: &str = "SVAF-v1";
pub const METHOD_VALIDATION: &str = "validation";
pub const METHOD_OBSERVATION: &str = "observation";

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

/// 128-bit time-ordered identifier, rendered as 32 lowercase hex digits.
///
/// Layout: 48 bits of milliseconds, 40 bits of origin hash, 40 bits of sequence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CmbKey(String);

impl CmbKey {
    pub fn generate(ts: Timestamp, origin: &AgentId, seq: u64) -> Self {
        const MASK40: u128 = (1 << 40) - 1;
        let millis = (ts as u64).wrapping_mul(1000) as u128 & ((1 << 48) - 1);
        let origin_bits = fnv1a64(origin.as_str()) as u128 & MASK40;
        let raw = (millis << 80) | (origin_bits << 40) | (seq as u128 & MASK40);
        CmbKey(format!("{raw:032x}"))
    }

    /// Accepts any non-empty token; generated keys are hex but imported ones are opaque.
    pub fn parse(s: &str) -> Result<Self, CmbError> {
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(CmbError::Schema(format!("invalid key `{s}`")));
        }
        Ok(CmbKey(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CmbKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldEntry {
    pub text: String,
    pub vector: Embedding,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arousal: Option<f64>,
}

impl FieldEntry {
    pub fn new(text: impl Into<String>, vector: Embedding) -> Self {
        FieldEntry {
            text: text.into(),
            vector,
            valence: None,
            arousal: None,
        }
    }

    pub fn mood(text: impl Into<String>, vector: Embedding, valence: f64, arousal: f64) -> Self {
        FieldEntry {
            text: text.into(),
            vector,
            valence: Some(valence),
            arousal: Some(arousal),
        }
    }

    pub fn is_neutral_text(&self) -> bool {
        self.text.trim().eq_ignore_ascii_case(NEUTRAL_TEXT)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parents: Vec<CmbKey>,
    pub method: String,
}

impl Lineage {
    pub fn root(method: impl Into<String>) -> Self {
        Lineage {
            parents: Vec::new(),
            method: method.into(),
        }
    }
}

/// An immutable memory block. Fields are private; construct through
/// [`Cmb::from_parts`] (validated) or the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Cmb {
    key: CmbKey,
    origin: AgentId,
    ts: Timestamp,
    confidence: f64,
    fields: Fields<FieldEntry>,
    lineage: Lineage,
}

impl Cmb {
    pub fn from_parts(
        key: CmbKey,
        origin: AgentId,
        ts: Timestamp,
        confidence: f64,
        fields: Fields<FieldEntry>,
        lineage: Lineage,
    ) -> Result<Self, CmbError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CmbError::InvalidConfidence(confidence));
        }
        if lineage.parents.iter().any(|p| *p == key) {
            return Err(CmbError::SelfReference(key));
        }
        let dim = fields[FieldId::Focus].vector.dim();
        for (id, entry) in fields.iter() {
            validate_entry(id, entry, dim)?;
        }
        Ok(Cmb {
            key,
            origin,
            ts,
            confidence,
            fields,
            lineage,
        })
    }

    pub fn key(&self) -> &CmbKey {
        &self.key
    }

    pub fn origin(&self) -> &AgentId {
        &self.origin
    }

    pub fn ts(&self) -> Timestamp {
        self.ts
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn fields(&self) -> &Fields<FieldEntry> {
        &self.fields
    }

    pub fn field(&self, id: FieldId) -> &FieldEntry {
        &self.fields[id]
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn dim(&self) -> usize {
        self.fields[FieldId::Focus].vector.dim()
    }

    /// Mood carries content when its text is not the neutral label or it has
    /// non-zero valence/arousal.
    pub fn has_non_neutral_mood(&self) -> bool {
        let mood = &self.fields[FieldId::Mood];
        let va = mood.valence.unwrap_or(0.0).abs() + mood.arousal.unwrap_or(0.0).abs();
        !mood.is_neutral_text() || va > 0.0
    }

    /// Canonical JSON: fixed key order, floats at 9 significant digits.
    pub fn to_canonical_json(&self) -> String {
        let mut out = String::with_capacity(256 + self.dim() * 7 * 16);
        out.push_str("{\"key\":");
        push_json_str(&mut out, self.key.as_str());
        out.push_str(",\"origin\":");
        push_json_str(&mut out, self.origin.as_str());
        let _ = write!(out, ",\"ts\":{}", self.ts);
        out.push_str(",\"confidence\":");
        out.push_str(&format_sig9(self.confidence));
        out.push_str(",\"fields\":{");
        for (i, (id, entry)) in self.fields.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_json_str(&mut out, id.name());
            out.push_str(":{\"text\":");
            push_json_str(&mut out, &entry.text);
            out.push_str(",\"vector\":[");
            for (j, x) in entry.vector.as_slice().iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format_sig9(*x));
            }
            out.push(']');
            if let Some(v) = entry.valence {
                out.push_str(",\"valence\":");
                out.push_str(&format_sig9(v));
            }
            if let Some(a) = entry.arousal {
                out.push_str(",\"arousal\":");
                out.push_str(&format_sig9(a));
            }
            out.push('}');
        }
        out.push_str("},\"lineage\":{\"parents\":[");
        for (i, p) in self.lineage.parents.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            push_json_str(&mut out, p.as_str());
        }
        out.push_str("],\"method\":");
        push_json_str(&mut out, &self.lineage.method);
        out.push_str("}}");
        out
    }

    /// Parses canonical JSON. Field entries may omit `vector`, in which case
    /// `encoder` fills it from the text (an error if no encoder is given).
    pub fn from_json(text: &str, encoder: Option<&FieldEncoder>) -> Result<Self, CmbError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CmbError::Schema(e.to_string()))?;
        Self::from_json_value(&value, encoder)
    }

    pub fn from_json_value(value: &Value, encoder: Option<&FieldEncoder>) -> Result<Self, CmbError> {
        let obj = value
            .as_object()
            .ok_or_else(|| schema("CMB must be a JSON object"))?;
        let key = CmbKey::parse(str_member(obj, "key")?)?;
        let origin = AgentId::new(str_member(obj, "origin")?);
        let ts = obj
            .get("ts")
            .and_then(Value::as_i64)
            .ok_or_else(|| schema("`ts` must be an integer"))?;
        let confidence = num_member(obj, "confidence")?;
        let fields_obj = obj
            .get("fields")
            .and_then(Value::as_object)
            .ok_or_else(|| schema("`fields` must be an object"))?;
        if let Some(extra) = fields_obj.keys().find(|k| k.parse::<FieldId>().is_err()) {
            return Err(schema(&format!("unknown field `{extra}`")));
        }
        let mut entries = Vec::with_capacity(FieldId::COUNT);
        for id in FieldId::ALL {
            let f = fields_obj
                .get(id.name())
                .and_then(Value::as_object)
                .ok_or_else(|| schema(&format!("field `{id}` is missing")))?;
            let text = str_member(f, "text")?.to_string();
            let vector = match f.get("vector") {
                Some(Value::Array(xs)) => Embedding::new(
                    xs.iter()
                        .map(|x| x.as_f64().ok_or_else(|| schema("vector entries must be numbers")))
                        .collect::<Result<_, _>>()?,
                ),
                Some(_) => return Err(schema("`vector` must be an array")),
                None => match encoder {
                    Some(enc) => enc.encode(&text),
                    None => return Err(schema(&format!("field `{id}` has no vector"))),
                },
            };
            let opt_num = |name: &str| -> Result<Option<f64>, CmbError> {
                match f.get(name) {
                    None | Some(Value::Null) => Ok(None),
                    Some(v) => v
                        .as_f64()
                        .map(Some)
                        .ok_or_else(|| schema(&format!("`{name}` must be a number"))),
                }
            };
            let (mut valence, mut arousal) = (opt_num("valence")?, opt_num("arousal")?);
            if id == FieldId::Mood && encoder.is_some() {
                // Hand-written inputs may leave a neutral mood without coordinates.
                valence.get_or_insert(0.0);
                arousal.get_or_insert(0.0);
            }
            entries.push(FieldEntry {
                text,
                vector,
                valence,
                arousal,
            });
        }
        let fields = Fields(
            entries
                .try_into()
                .map_err(|_| schema("expected seven fields"))?,
        );
        let lineage_obj = obj
            .get("lineage")
            .and_then(Value::as_object)
            .ok_or_else(|| schema("`lineage` must be an object"))?;
        let parents = lineage_obj
            .get("parents")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("`lineage.parents` must be an array"))?
            .iter()
            .map(|p| {
                p.as_str()
                    .ok_or_else(|| schema("parent keys must be strings"))
                    .and_then(CmbKey::parse)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let method = str_member(lineage_obj, "method")?.to_string();
        Cmb::from_parts(key, origin, ts, confidence, fields, Lineage { parents, method })
    }
}

fn validate_entry(id: FieldId, entry: &FieldEntry, dim: usize) -> Result<(), CmbError> {
    if entry.vector.dim() != dim {
        return Err(CmbError::Schema(format!(
            "field `{id}` has dimension {}, expected {dim}",
            entry.vector.dim()
        )));
    }
    if entry.vector.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(CmbError::Schema(format!("field `{id}` has non-finite values")));
    }
    let n = entry.vector.norm();
    let empty_text = entry.text.trim().is_empty();
    if !((n - 1.0).abs() <= UNIT_NORM_TOL || (n == 0.0 && empty_text)) {
        return Err(CmbError::Schema(format!(
            "field `{id}` vector norm {n} is not unit"
        )));
    }
    let is_mood = id == FieldId::Mood;
    let has_va = entry.valence.is_some() || entry.arousal.is_some();
    if is_mood != has_va || (is_mood && (entry.valence.is_none() || entry.arousal.is_none())) {
        return Err(CmbError::Schema(format!(
            "valence/arousal must be present exactly on mood (field `{id}`)"
        )));
    }
    for v in [entry.valence, entry.arousal].into_iter().flatten() {
        if !(-1.0..=1.0).contains(&v) {
            return Err(CmbError::Schema(format!("mood coordinate {v} outside [-1, 1]")));
        }
    }
    Ok(())
}

fn schema(msg: &str) -> CmbError {
    CmbError::Schema(msg.to_string())
}

fn str_member<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a str, CmbError> {
    obj.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| schema(&format!("`{name}` must be a string")))
}

fn num_member(obj: &serde_json::Map<String, Value>, name: &str) -> Result<f64, CmbError> {
    obj.get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| schema(&format!("`{name}` must be a number")))
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization"));
}

/// Renders `x` with nine significant digits as a valid JSON number.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        // Non-finite values never pass validation; 0 also covers -0.
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        trim_fraction(&fixed)
    } else {
        format!("{}e{exp}", trim_fraction(mantissa))
    }
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Builds a complete field set from partial texts; absent fields become `neutral`.
pub fn encode_fields(
    encoder: &FieldEncoder,
    texts: &std::collections::BTreeMap<FieldId, String>,
    mood_va: Option<(f64, f64)>,
) -> Fields<FieldEntry> {
    Fields::from_fn(|id| {
        let entry = match texts.get(&id) {
            Some(text) => FieldEntry::new(text.clone(), encoder.encode(text)),
            None => FieldEntry::new(NEUTRAL_TEXT, encoder.neutral().clone()),
        };
        if id == FieldId::Mood {
            let (v, a) = mood_va.unwrap_or((0.0, 0.0));
            FieldEntry {
                valence: Some(v.clamp(-1.0, 1.0)),
                arousal: Some(a.clamp(-1.0, 1.0)),
                ..entry
            }
        } else {
            entry
        }
    })
}
