//! Deterministic text encoding for field labels.
//!
//! The default mode hashes character trigrams and word bigrams into a
//! fixed-width signed bag (FNV-1a, bucket = hash mod dim, sign = bit 63) and
//! L2-normalizes the result. Table mode looks texts up in a precomputed
//! embedding table and falls back to hashing for anything it does not know,
//! which is how externally produced semantic embeddings are brought in.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 64;
pub const MIN_DIM: usize = 8;

/// Text every absent field is filled with.
pub const NEUTRAL_TEXT: &str = "neutral";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("encoder dimension {0} is below the minimum of {MIN_DIM}")]
    DimTooSmall(usize),
    #[error("table mode requires a table path")]
    MissingTablePath,
    #[error("cannot read embedding table {path}: {source}")]
    TableIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("embedding table {path}, line {line}: {message}")]
    TableFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// A real vector; unit norm unless produced from empty text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    /// Scales to unit length; the zero vector stays zero.
    pub fn normalized(values: Vec<f64>) -> Self {
        let mut e = Embedding(values);
        e.normalize();
        e
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|x| *x /= n);
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine of two equal-length slices; 0 if either is all-zero.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EncoderError> {
    if a.dim() != b.dim() {
        return Err(EncoderError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(cosine(a.as_slice(), b.as_slice()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    #[default]
    Ngram,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    #[serde(default)]
    pub mode: EncoderMode,
    #[serde(default)]
    pub table_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: DEFAULT_DIM,
            mode: EncoderMode::Ngram,
            table_path: None,
        }
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercase, trim, and collapse whitespace runs to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_edge_punctuation(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Hashed features of already-normalized text: character trigrams, then word bigrams.
///
/// Texts shorter than three characters contribute themselves as a single feature.
pub fn ngram_features(normalized: &str) -> Vec<String> {
    let chars: Vec<char> = normalized.chars().collect();
    let mut features = Vec::new();
    if chars.len() >= 3 {
        features.extend(chars.windows(3).map(|w| w.iter().collect::<String>()));
    } else if !chars.is_empty() {
        features.push(normalized.to_string());
    }
    let tokens: Vec<&str> = normalized
        .split_whitespace()
        .map(strip_edge_punctuation)
        .filter(|t| !t.is_empty())
        .collect();
    features.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    features
}

pub fn encode_ngram(text: &str, dim: usize) -> Embedding {
    let mut v = vec![0.0; dim];
    for feature in ngram_features(&normalize_text(text)) {
        let h = fnv1a64(&feature);
        let bucket = (h % dim as u64) as usize;
        v[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    Embedding::normalized(v)
}

#[derive(Deserialize)]
struct TableLine {
    text: String,
    vector: Vec<f64>,
}

/// Shared text encoder for all seven fields.
#[derive(Clone, Debug)]
pub struct FieldEncoder {
    dim: usize,
    table: Option<HashMap<String, Embedding>>,
    neutral: Embedding,
}

impl FieldEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self, EncoderError> {
        if config.dim < MIN_DIM {
            return Err(EncoderError::DimTooSmall(config.dim));
        }
        let table = match config.mode {
            EncoderMode::Ngram => None,
            EncoderMode::Table => {
                let path = config
                    .table_path
                    .as_deref()
                    .ok_or(EncoderError::MissingTablePath)?;
                Some(load_table(path, config.dim)?)
            }
        };
        let mut enc = FieldEncoder {
            dim: config.dim,
            table,
            neutral: Embedding::zeros(config.dim),
        };
        enc.neutral = enc.encode(NEUTRAL_TEXT);
        Ok(enc)
    }

    /// N-gram encoder of the given width.
    pub fn ngram(dim: usize) -> Self {
        Self::new(&EncoderConfig {
            dim,
            ..EncoderConfig::default()
        })
        .expect("ngram encoder with valid dim")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, text: &str) -> Embedding {
        if let Some(table) = &self.table {
            if let Some(v) = table.get(&normalize_text(text)) {
                return v.clone();
            }
        }
        encode_ngram(text, self.dim)
    }

    /// Baseline vector for fields that carry no content.
    pub fn neutral(&self) -> &Embedding {
        &self.neutral
    }
}

impl Default for FieldEncoder {
    fn default() -> Self {
        FieldEncoder::ngram(DEFAULT_DIM)
    }
}

fn load_table(path: &Path, dim: usize) -> Result<HashMap<String, Embedding>, EncoderError> {
    let body = fs::read_to_string(path).map_err(|source| EncoderError::TableIo {
        path: path.to_path_buf(),
        source,
    })?;
    let mut table = HashMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| EncoderError::TableFormat {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: TableLine = serde_json::from_str(line).map_err(|e| format_err(e.to_string()))?;
        if entry.vector.len() != dim {
            return Err(format_err(format!(
                "vector has {} entries, encoder dim is {dim}",
                entry.vector.len()
            )));
        }
        if entry.vector.iter().any(|x| !x.is_finite()) {
            return Err(format_err("non-finite value".into()));
        }
        table.insert(normalize_text(&entry.text), Embedding::normalized(entry.vector));
    }
    Ok(table)
}
