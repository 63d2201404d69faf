//! Matrix-form forward pass used as an independent check of the model.

use meshfuse::neural::{ModelWeights, NeuralConfig, NeuralInput};
use nalgebra::{DMatrix, DVector};

fn mat(w: &ModelWeights, name: &str) -> DMatrix<f64> {
    let (shape, data) = w.tensor(name).unwrap_or_else(|| panic!("{name}"));
    DMatrix::from_row_slice(shape[0], shape[1], data)
}

fn vector(w: &ModelWeights, name: &str) -> DVector<f64> {
    DVector::from_column_slice(w.tensor(name).unwrap_or_else(|| panic!("{name}")).1)
}

fn dense(w: &ModelWeights, name: &str, x: &DVector<f64>) -> DVector<f64> {
    mat(w, &format!("{name}.weight")) * x + vector(w, &format!("{name}.bias"))
}

fn gelu_v(x: DVector<f64>) -> DVector<f64> {
    x.map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn stack(rows: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(rows.iter().map(|r| r.len()).sum(), rows.iter().flat_map(|r| r.iter().copied()))
}

fn layer_norm(w: &ModelWeights, name: &str, x: &DVector<f64>) -> DVector<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let centered = x.map(|v| v - mean);
    let var = centered.dot(&centered) / n;
    let g = vector(w, &format!("{name}.gamma"));
    let b = vector(w, &format!("{name}.beta"));
    (centered / (var + 1e-5).sqrt()).component_mul(&g) + b
}

/// Single-head attention written out with whole matrices.
fn attend(w: &ModelWeights, name: &str, queries: &DMatrix<f64>, keys: &DMatrix<f64>) -> DMatrix<f64> {
    let proj = |x: &DMatrix<f64>, p: &str| {
        let wm = mat(w, &format!("{name}.{p}.weight"));
        let b = vector(w, &format!("{name}.{p}.bias"));
        let mut y = x * wm.transpose();
        for mut row in y.row_iter_mut() {
            row += b.transpose();
        }
        y
    };
    let q = proj(queries, "q");
    let k = proj(keys, "k");
    let v = proj(keys, "v");
    let d = q.ncols() as f64;
    let mut s = &q * k.transpose() / d.sqrt();
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.apply(|x| *x = (*x - m).exp());
        let z = row.sum();
        row /= z;
    }
    proj(&(s * v), "o")
}

pub struct Oracle {
    pub fused: Vec<DVector<f64>>,
    pub gates: Vec<f64>,
    pub drift: Vec<f64>,
    pub total: f64,
    pub probs: Vec<f64>,
}

pub fn oracle(w: &ModelWeights, input: &NeuralInput) -> Oracle {
    let names = ["focus", "issue", "intent", "motivation", "commitment", "perspective", "mood"];
    let d = w.config().d;
    let encoded: Vec<DVector<f64>> = input
        .sent
        .iter()
        .zip(names)
        .map(|(s, f)| {
            let h = gelu_v(dense(w, "backbone.0", &DVector::from_column_slice(s)));
            let h = gelu_v(dense(w, "backbone.1", &h));
            dense(w, &format!("head.{f}"), &h).normalize()
        })
        .collect();
    let x = DMatrix::from_fn(7, d, |i, j| encoded[i][j]);
    let a = attend(w, "cross.attn", &x, &x);
    let incoming: Vec<DVector<f64>> = (0..7)
        .map(|i| {
            let x1 = layer_norm(w, "cross.ln1", &(x.row(i).transpose() + a.row(i).transpose()));
            let f = dense(w, "cross.ffn.1", &gelu_v(dense(w, "cross.ffn.0", &x1)));
            layer_norm(w, "cross.ln2", &(&x1 + f)).normalize()
        })
        .collect();
    let context: Vec<DVector<f64>> = (0..7)
        .map(|f| {
            let q = DMatrix::from_row_slice(1, d, incoming[f].as_slice());
            let keys = DMatrix::from_fn(input.anchors.len(), d, |j, c| input.anchors[j][f][c]);
            attend(w, "anchor.attn", &q, &keys).row(0).transpose()
        })
        .collect();
    let mut gate_in: Vec<f64> = stack(&incoming).iter().chain(stack(&context).iter()).copied().collect();
    gate_in.push(input.freshness);
    gate_in.push(input.confidence);
    let g = gelu_v(dense(w, "gate.0", &DVector::from_vec(gate_in)));
    let g = gelu_v(dense(w, "gate.1", &g));
    let gates: Vec<f64> = dense(w, "gate.2", &g).iter().map(|v| sigmoid(*v)).collect();
    let mut fused = Vec::new();
    let mut drift = Vec::new();
    for (f, name) in names.iter().enumerate() {
        let va = stack(&[incoming[f].clone(), context[f].clone()]);
        let z = dense(w, &format!("transform.{name}.1"), &gelu_v(dense(w, &format!("transform.{name}.0"), &va)));
        let vf = (&incoming[f] * gates[f] + z * (1.0 - gates[f])).normalize();
        let dri = stack(&[incoming[f].clone(), vf.clone(), context[f].clone()]);
        let out = dense(w, &format!("drift.{name}.1"), &gelu_v(dense(w, &format!("drift.{name}.0"), &dri)));
        drift.push(sigmoid(out[0]));
        fused.push(vf);
    }
    let mut summary = drift.clone();
    summary.push(input.freshness);
    summary.push(input.confidence);
    let summary = DVector::from_vec(summary);
    let total = sigmoid(dense(w, "aggregate.1", &gelu_v(dense(w, "aggregate.0", &summary)))[0]);
    let logits = dense(w, "decision.1", &gelu_v(dense(w, "decision.0", &summary)));
    let e = logits.map(|z| z.exp());
    let probs = (e.clone() / e.sum()).iter().copied().collect();
    Oracle {
        fused,
        gates,
        drift,
        total,
        probs,
    }
}

/// Deterministic non-random weights so the oracle does not share the initializer.
pub fn hand_set(config: &NeuralConfig) -> ModelWeights {
    let mut w = ModelWeights::init(config, 0).unwrap();
    for (i, p) in w.params_mut().iter_mut().enumerate() {
        *p = 0.6 * (1.3 * i as f64 + 0.7).sin();
    }
    for spec in w.specs().to_vec() {
        if spec.name.ends_with(".gamma") {
            let t = w.tensor_mut(&spec.name).unwrap();
            for (i, g) in t.iter_mut().enumerate() {
                *g = 1.0 + 0.2 * (i as f64).cos();
            }
        }
    }
    w
}
