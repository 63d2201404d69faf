//! Neural evaluation path.
//!
//! Sentence embeddings of the seven field texts go through a shared backbone
//! and per-field projection heads, attend to each other, then attend over the
//! receiver's anchors. A gate decides per field how much of the incoming
//! vector survives against a learned transform of incoming and anchor
//! context; drift and decision heads read the result.
//!
//! Weights live in a flat buffer addressed by a layout derived from the
//! config. On disk they are a JSON manifest plus a little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{dot, norm};
use crate::field::FieldId;

const NF: usize = FieldId::COUNT;
const MOOD: usize = 6;
const LN_EPS: f64 = 1e-5;
/// Gates and drifts are kept this far inside (0, 1).
pub const OPEN_EPS: f64 = 1e-7;
const MANIFEST_FORMAT: &str = "meshfuse-weights";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("input: {0}")]
    Input(String),
    #[error("weight container {path}: {message}")]
    Container { path: PathBuf, message: String },
    #[error("weight container {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub d: usize,
    pub sent_dim: usize,
    pub backbone_hidden: usize,
    pub backbone_out: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub gate_hidden: [usize; 2],
    pub transform_hidden: usize,
    pub drift_hidden: usize,
    pub aggregate_hidden: usize,
    pub decision_hidden: usize,
    pub margin: f64,
    pub lambda_drift: f64,
    pub lambda_gate: f64,
    pub lambda_coupling: f64,
    /// Aligned, guarded, rejected.
    pub class_weights: [f64; 3],
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d: 64,
            sent_dim: 384,
            backbone_hidden: 256,
            backbone_out: 128,
            heads: 4,
            ffn_hidden: 256,
            gate_hidden: [256, 128],
            transform_hidden: 64,
            drift_hidden: 8,
            aggregate_hidden: 16,
            decision_hidden: 16,
            margin: 0.1,
            lambda_drift: 1.0,
            lambda_gate: 0.5,
            lambda_coupling: 0.5,
            class_weights: [1.33, 0.50, 4.23],
        }
    }
}

impl NeuralConfig {
    /// About 2K parameters; for oracles and finite-difference checks.
    pub fn tiny() -> Self {
        NeuralConfig {
            d: 4,
            sent_dim: 8,
            backbone_hidden: 6,
            backbone_out: 6,
            heads: 1,
            ffn_hidden: 8,
            gate_hidden: [12, 8],
            transform_hidden: 4,
            drift_hidden: 2,
            aggregate_hidden: 4,
            decision_hidden: 4,
            ..NeuralConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let dims = [
            self.d,
            self.sent_dim,
            self.backbone_hidden,
            self.backbone_out,
            self.heads,
            self.ffn_hidden,
            self.gate_hidden[0],
            self.gate_hidden[1],
            self.transform_hidden,
            self.drift_hidden,
            self.aggregate_hidden,
            self.decision_hidden,
        ];
        if dims.contains(&0) {
            return Err(NeuralError::Config("all dimensions must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(NeuralError::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Width of the gate's first layer: incoming and anchor context for every field, freshness, confidence.
    pub fn gate_input(&self) -> usize {
        2 * NF * self.d + 2
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat buffer.
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lin {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
    n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Mha {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    backbone: [Lin; 2],
    heads: Vec<Lin>,
    cross: Mha,
    ln1: Norm,
    ffn: [Lin; 2],
    ln2: Norm,
    anchor: Mha,
    gate: [Lin; 3],
    transform: Vec<[Lin; 2]>,
    drift: Vec<[Lin; 2]>,
    aggregate: [Lin; 2],
    decision: [Lin; 2],
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    next: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.specs.push(TensorSpec { name, shape, offset });
        offset
    }

    fn lin(&mut self, name: &str, out: usize, inp: usize) -> Lin {
        let w = self.tensor(format!("{name}.weight"), vec![out, inp]);
        let b = self.tensor(format!("{name}.bias"), vec![out]);
        Lin { w, b, out, inp }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        let gamma = self.tensor(format!("{name}.gamma"), vec![n]);
        let beta = self.tensor(format!("{name}.beta"), vec![n]);
        Norm { gamma, beta, n }
    }

    fn mha(&mut self, name: &str, d: usize) -> Mha {
        Mha {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    fn new(c: &NeuralConfig) -> Self {
        let mut b = LayoutBuilder::default();
        let d = c.d;
        let backbone = [
            b.lin("backbone.0", c.backbone_hidden, c.sent_dim),
            b.lin("backbone.1", c.backbone_out, c.backbone_hidden),
        ];
        let heads = FieldId::ALL
            .iter()
            .map(|f| b.lin(&format!("head.{f}"), d, c.backbone_out))
            .collect();
        let cross = b.mha("cross.attn", d);
        let ln1 = b.norm("cross.ln1", d);
        let ffn = [
            b.lin("cross.ffn.0", c.ffn_hidden, d),
            b.lin("cross.ffn.1", d, c.ffn_hidden),
        ];
        let ln2 = b.norm("cross.ln2", d);
        let anchor = b.mha("anchor.attn", d);
        let gate = [
            b.lin("gate.0", c.gate_hidden[0], c.gate_input()),
            b.lin("gate.1", c.gate_hidden[1], c.gate_hidden[0]),
            b.lin("gate.2", NF, c.gate_hidden[1]),
        ];
        let transform = FieldId::ALL
            .iter()
            .map(|f| {
                [
                    b.lin(&format!("transform.{f}.0"), c.transform_hidden, 2 * d),
                    b.lin(&format!("transform.{f}.1"), d, c.transform_hidden),
                ]
            })
            .collect();
        let drift = FieldId::ALL
            .iter()
            .map(|f| {
                [
                    b.lin(&format!("drift.{f}.0"), c.drift_hidden, 3 * d),
                    b.lin(&format!("drift.{f}.1"), 1, c.drift_hidden),
                ]
            })
            .collect();
        let aggregate = [
            b.lin("aggregate.0", c.aggregate_hidden, NF + 2),
            b.lin("aggregate.1", 1, c.aggregate_hidden),
        ];
        let decision = [
            b.lin("decision.0", c.decision_hidden, NF + 2),
            b.lin("decision.1", 3, c.decision_hidden),
        ];
        Layout {
            total: b.next,
            specs: b.specs,
            backbone,
            heads,
            cross,
            ln1,
            ffn,
            ln2,
            anchor,
            gate,
            transform,
            drift,
            aggregate,
            decision,
        }
    }
}

/// Named tensors for every component, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: NeuralConfig,
    layout: Layout,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    config: NeuralConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

impl ModelWeights {
    /// Uniform ±1/√fan_in for weights and biases; LayerNorm starts at identity.
    /// Values are drawn in f32 so a save/load round trip is exact.
    pub fn init(config: &NeuralConfig, seed: u64) -> Result<Self, NeuralError> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total];
        let mut fan_in = 1;
        for spec in &layout.specs {
            let slot = &mut data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".gamma") {
                slot.fill(1.0);
            } else if spec.name.ends_with(".beta") {
                slot.fill(0.0);
            } else {
                if spec.name.ends_with(".weight") {
                    fan_in = spec.shape[1];
                }
                let bound = 1.0 / (fan_in as f32).sqrt();
                for x in slot {
                    *x = f64::from(rng.gen_range(-bound..bound));
                }
            }
        }
        Ok(ModelWeights {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Parameters that feed the context stage come first in the buffer.
    pub fn context_param_count(&self) -> usize {
        self.layout.gate[0].w
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let s = self.layout.specs.iter().find(|s| s.name == name)?;
        Some((&s.shape, &self.data[s.offset..s.offset + s.len()]))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.specs.iter().find(|s| s.name == name)?;
        Some(&mut self.data[s.offset..s.offset + s.len()])
    }

    pub fn check_finite(&self) -> Result<(), NeuralError> {
        for s in &self.layout.specs {
            if self.data[s.offset..s.offset + s.len()].iter().any(|x| !x.is_finite()) {
                return Err(NeuralError::NonFinite(s.name.clone()));
            }
        }
        Ok(())
    }

    /// Writes the manifest to `manifest_path` and the blob next to it with a `.bin` extension.
    pub fn save(&self, manifest_path: &Path) -> Result<(), NeuralError> {
        let blob_path = manifest_path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| NeuralError::Container {
                path: manifest_path.to_path_buf(),
                message: "manifest path has no file name".into(),
            })?
            .to_string();
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            blob.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            blob: blob_name,
            config: self.config.clone(),
            tensors: self
                .layout
                .specs
                .iter()
                .map(|s| ManifestEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    offset: s.offset * 4,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(manifest_path, json).map_err(|source| NeuralError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        fs::write(&blob_path, blob).map_err(|source| NeuralError::Io { path: blob_path, source })
    }

    pub fn load(manifest_path: &Path) -> Result<Self, NeuralError> {
        let container_err = |message: String| NeuralError::Container {
            path: manifest_path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(manifest_path).map_err(|source| NeuralError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| container_err(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(container_err(format!("unknown format `{}`", manifest.format)));
        }
        manifest.config.validate()?;
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|source| NeuralError::Io {
            path: blob_path.clone(),
            source,
        })?;
        let layout = Layout::new(&manifest.config);
        for entry in &manifest.tensors {
            if !layout.specs.iter().any(|s| s.name == entry.name) {
                // Report the expected name that went missing before the stray one.
                if let Some(missing) = layout
                    .specs
                    .iter()
                    .find(|s| !manifest.tensors.iter().any(|e| e.name == s.name))
                {
                    return Err(NeuralError::MissingTensor(missing.name.clone()));
                }
                return Err(NeuralError::UnexpectedTensor(entry.name.clone()));
            }
        }
        let mut data = vec![0.0; layout.total];
        for spec in &layout.specs {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == spec.name)
                .ok_or_else(|| NeuralError::MissingTensor(spec.name.clone()))?;
            if entry.shape != spec.shape {
                return Err(NeuralError::Shape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            let end = entry.offset + spec.len() * 4;
            let bytes = blob
                .get(entry.offset..end)
                .ok_or_else(|| container_err(format!("tensor `{}` runs past the blob", spec.name)))?;
            for (dst, chunk) in data[spec.offset..spec.offset + spec.len()]
                .iter_mut()
                .zip(bytes.chunks_exact(4))
            {
                *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
        }
        let weights = ModelWeights {
            config: manifest.config,
            layout,
            data,
        };
        weights.check_finite()?;
        Ok(weights)
    }
}

/// One evaluation: sentence embeddings of the seven field texts, and the
/// anchors' field vectors (k × 7 × d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralInput {
    pub sent: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<Vec<f64>>>,
    pub freshness: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralOutput {
    pub gates: [f64; NF],
    pub fused: Vec<Vec<f64>>,
    pub field_drift: [f64; NF],
    pub total_drift: f64,
    /// Aligned, guarded, rejected.
    pub probs: [f64; 3],
    /// Field vectors after cross-field attention.
    pub incoming: Vec<Vec<f64>>,
    pub anchor_context: Vec<Vec<f64>>,
}

impl NeuralOutput {
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn open_sigmoid(x: f64) -> f64 {
    sigmoid(x).clamp(OPEN_EPS, 1.0 - OPEN_EPS)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn linear(p: &[f64], l: &Lin, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), l.inp);
    let w = &p[l.w..l.w + l.out * l.inp];
    let b = &p[l.b..l.b + l.out];
    w.chunks_exact(l.inp).zip(b).map(|(row, bias)| bias + dot(row, x)).collect()
}

fn linear_gelu(p: &[f64], l: &Lin, x: &[f64]) -> Vec<f64> {
    let mut y = linear(p, l, x);
    y.iter_mut().for_each(|v| *v = gelu(*v));
    y
}

fn layer_norm(p: &[f64], n: &Norm, x: &[f64]) -> Vec<f64> {
    let len = x.len() as f64;
    let mean = x.iter().sum::<f64>() / len;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let g = &p[n.gamma..n.gamma + n.n];
    let b = &p[n.beta..n.beta + n.n];
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn normalize_or(v: Vec<f64>, fallback: &[f64]) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 && n.is_finite() {
        v.into_iter().map(|x| x / n).collect()
    } else {
        fallback.to_vec()
    }
}

/// Scaled dot-product multi-head attention of `queries` over `keys` (keys double as values).
fn attention(p: &[f64], m: &Mha, heads: usize, queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = queries.iter().map(|x| linear(p, &m.q, x)).collect();
    let k: Vec<Vec<f64>> = keys.iter().map(|x| linear(p, &m.k, x)).collect();
    let v: Vec<Vec<f64>> = keys.iter().map(|x| linear(p, &m.v, x)).collect();
    let d = m.q.out;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; keys.len()];
    q.iter()
        .map(|qi| {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                for (s, kj) in scores.iter_mut().zip(&k) {
                    *s = dot(&qi[r.clone()], &kj[r.clone()]) * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for (pj, vj) in scores.iter().map(|s| s / z).zip(&v) {
                    for (c, x) in concat[r.clone()].iter_mut().zip(&vj[r.clone()]) {
                        *c += pj * x;
                    }
                }
            }
            linear(p, &m.o, &concat)
        })
        .collect()
}

fn check_input(c: &NeuralConfig, input: &NeuralInput) -> Result<(), NeuralError> {
    let bad = |m: String| Err(NeuralError::Input(m));
    if input.sent.len() != NF {
        return bad(format!("expected {NF} sentence vectors, got {}", input.sent.len()));
    }
    if let Some(s) = input.sent.iter().find(|s| s.len() != c.sent_dim) {
        return bad(format!("sentence vector of length {}, expected {}", s.len(), c.sent_dim));
    }
    if input.anchors.is_empty() {
        return bad("at least one anchor is required".into());
    }
    for a in &input.anchors {
        if a.len() != NF || a.iter().any(|v| v.len() != c.d) {
            return bad(format!("each anchor must be {NF} × {} values", c.d));
        }
    }
    if !(0.0..=1.0).contains(&input.freshness) || !(0.0..=1.0).contains(&input.confidence) {
        return bad("freshness and confidence must lie in [0, 1]".into());
    }
    let finite = input
        .sent
        .iter()
        .chain(input.anchors.iter().flatten())
        .all(|v| v.iter().all(|x| x.is_finite()));
    if !finite {
        return bad("non-finite input value".into());
    }
    Ok(())
}

/// Field vectors after encoding and cross-field attention, with their anchor context.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldContext {
    pub incoming: Vec<Vec<f64>>,
    pub anchor_context: Vec<Vec<f64>>,
}

pub fn forward(weights: &ModelWeights, input: &NeuralInput) -> Result<NeuralOutput, NeuralError> {
    let ctx = context(weights, input)?;
    fuse(weights, &ctx, input)
}

/// Encoder, cross-field attention and anchor attention. Depends only on the
/// first [`ModelWeights::context_param_count`] parameters.
pub fn context(weights: &ModelWeights, input: &NeuralInput) -> Result<FieldContext, NeuralError> {
    let c = &weights.config;
    check_input(c, input)?;
    let p = &weights.data;
    let l = &weights.layout;

    // Field encoder.
    let encoded: Vec<Vec<f64>> = input
        .sent
        .iter()
        .zip(&l.heads)
        .map(|(s, head)| {
            let h = linear_gelu(p, &l.backbone[0], s);
            let h = linear_gelu(p, &l.backbone[1], &h);
            let v = linear(p, head, &h);
            let zero = vec![0.0; v.len()];
            normalize_or(v, &zero)
        })
        .collect();

    // Cross-field attention block.
    let attn = attention(p, &l.cross, c.heads, &encoded, &encoded);
    let incoming: Vec<Vec<f64>> = encoded
        .iter()
        .zip(&attn)
        .map(|(x, a)| {
            let r: Vec<f64> = x.iter().zip(a).map(|(x, a)| x + a).collect();
            let x1 = layer_norm(p, &l.ln1, &r);
            let f = linear(p, &l.ffn[1], &linear_gelu(p, &l.ffn[0], &x1));
            let r2: Vec<f64> = x1.iter().zip(&f).map(|(x, f)| x + f).collect();
            let x2 = layer_norm(p, &l.ln2, &r2);
            normalize_or(x2, x)
        })
        .collect();

    // Anchor attention, one query per field.
    let anchor_context: Vec<Vec<f64>> = (0..NF)
        .map(|f| {
            let keys: Vec<Vec<f64>> = input.anchors.iter().map(|a| a[f].clone()).collect();
            attention(p, &l.anchor, c.heads, std::slice::from_ref(&incoming[f]), &keys)
                .pop()
                .expect("one query")
        })
        .collect();
    Ok(FieldContext {
        incoming,
        anchor_context,
    })
}

/// Gate, transforms, gated fusion and the drift and decision heads.
pub fn fuse(weights: &ModelWeights, ctx: &FieldContext, input: &NeuralInput) -> Result<NeuralOutput, NeuralError> {
    let c = &weights.config;
    let p = &weights.data;
    let l = &weights.layout;
    let FieldContext {
        incoming,
        anchor_context,
    } = ctx;
    if incoming.len() != NF || anchor_context.len() != NF {
        return Err(NeuralError::Input("context must hold seven fields".into()));
    }

    // Gate.
    let mut gate_in = Vec::with_capacity(c.gate_input());
    incoming.iter().for_each(|v| gate_in.extend_from_slice(v));
    anchor_context.iter().for_each(|v| gate_in.extend_from_slice(v));
    gate_in.push(input.freshness);
    gate_in.push(input.confidence);
    let g = linear_gelu(p, &l.gate[0], &gate_in);
    let g = linear_gelu(p, &l.gate[1], &g);
    let g = linear(p, &l.gate[2], &g);
    let gates: [f64; NF] = std::array::from_fn(|f| open_sigmoid(g[f]));

    // Transform, gated fusion, per-field drift.
    let mut fused = Vec::with_capacity(NF);
    let mut field_drift = [0.0; NF];
    for f in 0..NF {
        let v = &incoming[f];
        let a = &anchor_context[f];
        let va: Vec<f64> = v.iter().chain(a).copied().collect();
        let z = linear(p, &l.transform[f][1], &linear_gelu(p, &l.transform[f][0], &va));
        let mix: Vec<f64> = v.iter().zip(&z).map(|(v, z)| gates[f] * v + (1.0 - gates[f]) * z).collect();
        let vf = normalize_or(mix, v);
        let dri: Vec<f64> = v.iter().chain(&vf).chain(a).copied().collect();
        let out = linear(p, &l.drift[f][1], &linear_gelu(p, &l.drift[f][0], &dri));
        field_drift[f] = open_sigmoid(out[0]);
        fused.push(vf);
    }

    let mut summary: Vec<f64> = field_drift.to_vec();
    summary.push(input.freshness);
    summary.push(input.confidence);
    let agg = linear(p, &l.aggregate[1], &linear_gelu(p, &l.aggregate[0], &summary));
    let total_drift = open_sigmoid(agg[0]);
    let logits = linear(p, &l.decision[1], &linear_gelu(p, &l.decision[0], &summary));
    let sm = softmax(&logits);
    let probs = [sm[0], sm[1], sm[2]];

    let finite = gates.iter().chain(&field_drift).chain(&probs).all(|x| x.is_finite())
        && total_drift.is_finite()
        && fused.iter().flatten().all(|x| x.is_finite());
    if !finite {
        return Err(NeuralError::NonFinite("forward output".into()));
    }
    Ok(NeuralOutput {
        gates,
        fused,
        field_drift,
        total_drift,
        probs,
        incoming: incoming.clone(),
        anchor_context: anchor_context.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub decision_ce: f64,
    pub drift_mse: f64,
    pub gate_dir: f64,
    pub coupling: f64,
}

/// `ReLU(mean of the non-mood gates − mood gate + margin)`.
pub fn coupling_term(gates: &[f64; NF], margin: f64) -> f64 {
    let others = gates
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != MOOD)
        .map(|(_, g)| g)
        .sum::<f64>()
        / (NF - 1) as f64;
    (others - gates[MOOD] + margin).max(0.0)
}

/// Loss for one sample. Class indices: 0 aligned, 1 guarded, 2 rejected.
pub fn compute_loss(
    output: &NeuralOutput,
    target_class: usize,
    target_drifts: &[f64; NF],
    config: &NeuralConfig,
) -> Result<LossBreakdown, NeuralError> {
    if target_class > 2 {
        return Err(NeuralError::Input(format!("target class {target_class} outside 0..=2")));
    }
    if target_drifts.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(NeuralError::Input("target drifts must lie in [0, 1]".into()));
    }
    let p = output.probs[target_class].max(f64::MIN_POSITIVE);
    let decision_ce = -config.class_weights[target_class] * p.ln();

    let target_total = target_drifts.iter().sum::<f64>() / NF as f64;
    let sq: f64 = output
        .field_drift
        .iter()
        .zip(target_drifts)
        .map(|(d, t)| (d - t) * (d - t))
        .sum::<f64>()
        + (output.total_drift - target_total).powi(2);
    let drift_mse = sq / (NF + 1) as f64;

    let rejected = target_class == 2;
    let gate_dir = if rejected {
        output.gates.iter().sum::<f64>() / NF as f64
    } else {
        0.0
    };
    let coupling = if rejected {
        0.0
    } else {
        coupling_term(&output.gates, config.margin)
    };
    let total = decision_ce
        + config.lambda_drift * drift_mse
        + config.lambda_gate * gate_dir
        + config.lambda_coupling * coupling;
    Ok(LossBreakdown {
        total,
        decision_ce,
        drift_mse,
        gate_dir,
        coupling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(c: &NeuralConfig, seed: u64, k: usize) -> NeuralInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |n: usize| {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = norm(&v);
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        NeuralInput {
            sent: (0..NF).map(|_| unit(c.sent_dim)).collect(),
            anchors: (0..k).map(|_| (0..NF).map(|_| unit(c.d)).collect()).collect(),
            freshness: 0.7,
            confidence: 0.8,
        }
    }

    #[test]
    fn default_param_count_near_reference() {
        let n = NeuralConfig::default().param_count();
        assert_eq!(n, 617_986);
        assert!((n as f64 - 604_428.0).abs() / 604_428.0 < 0.05);
        assert_eq!(NeuralConfig::default().gate_input(), 898);
    }

    #[test]
    fn tiny_is_small() {
        let n = NeuralConfig::tiny().param_count();
        assert!((1500..3000).contains(&n), "{n}");
    }

    #[test]
    fn init_is_deterministic() {
        let c = NeuralConfig::tiny();
        assert_eq!(ModelWeights::init(&c, 42).unwrap(), ModelWeights::init(&c, 42).unwrap());
        assert_ne!(ModelWeights::init(&c, 42).unwrap(), ModelWeights::init(&c, 43).unwrap());
    }

    #[test]
    fn forward_invariants_tiny() {
        let c = NeuralConfig::tiny();
        let w = ModelWeights::init(&c, 1).unwrap();
        let out = forward(&w, &input(&c, 2, 2)).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for v in &out.fused {
            assert!((norm(v) - 1.0).abs() < 1e-9);
        }
        assert!(out.gates.iter().all(|g| *g > 0.0 && *g < 1.0));
    }

    #[test]
    fn bad_shapes_rejected() {
        let c = NeuralConfig::tiny();
        let w = ModelWeights::init(&c, 1).unwrap();
        let mut x = input(&c, 2, 2);
        x.anchors.clear();
        assert!(matches!(forward(&w, &x), Err(NeuralError::Input(_))));
        let mut x = input(&c, 2, 2);
        x.sent[3].push(0.0);
        assert!(matches!(forward(&w, &x), Err(NeuralError::Input(_))));
    }

    #[test]
    fn coupling_examples() {
        let mut g = [0.3; NF];
        g[MOOD] = 0.5;
        assert_eq!(coupling_term(&g, 0.1), 0.0);
        g[MOOD] = 0.2;
        assert!((coupling_term(&g, 0.1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn numerics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_eq!(open_sigmoid(800.0), 1.0 - OPEN_EPS);
        let s = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }
}
