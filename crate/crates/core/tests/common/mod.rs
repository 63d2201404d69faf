#![allow(dead_code)]

pub mod oracle;

use meshfuse::neural::{compute_loss, context, forward, fuse, FieldContext, ModelWeights, NeuralConfig, NeuralInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if s > 1e-9 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

pub fn neural_input(rng: &mut ChaCha8Rng, c: &NeuralConfig, k: usize) -> NeuralInput {
    NeuralInput {
        sent: (0..7).map(|_| unit(rng, c.sent_dim)).collect(),
        anchors: (0..k).map(|_| (0..7).map(|_| unit(rng, c.d)).collect()).collect(),
        freshness: rng.gen_range(0.0..=1.0),
        confidence: rng.gen_range(0.0..=1.0),
    }
}

pub struct Sample {
    pub input: NeuralInput,
    pub class: usize,
    pub drifts: [f64; 7],
}

pub fn toy_batch(c: &NeuralConfig, seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Sample {
            input: neural_input(&mut rng, c, 2),
            class: rng.gen_range(0..3),
            drifts: std::array::from_fn(|_| rng.gen_range(0.0..=1.0)),
        })
        .collect()
}

pub fn batch_loss(w: &ModelWeights, batch: &[Sample]) -> f64 {
    let sum: f64 = batch
        .iter()
        .map(|s| {
            let out = forward(w, &s.input).expect("forward");
            compute_loss(&out, s.class, &s.drifts, w.config()).expect("loss").total
        })
        .sum();
    sum / batch.len() as f64
}

fn fused_loss(w: &ModelWeights, batch: &[Sample], contexts: &[FieldContext]) -> f64 {
    let sum: f64 = batch
        .iter()
        .zip(contexts)
        .map(|(s, ctx)| {
            let out = fuse(w, ctx, &s.input).expect("fuse");
            compute_loss(&out, s.class, &s.drifts, w.config()).expect("loss").total
        })
        .sum();
    sum / batch.len() as f64
}

/// Plain gradient descent with forward-difference gradients over every parameter.
/// Stops early once the loss is at or below `target`. Returns the loss
/// before each step and after the last one.
///
/// Parameters past the context stage leave the per-sample context unchanged,
/// so their perturbed losses reuse it.
pub fn fd_descent(w: &mut ModelWeights, batch: &[Sample], max_steps: usize, lr: f64, h: f64, target: f64) -> Vec<f64> {
    let mut history = Vec::with_capacity(max_steps + 1);
    let mut grad = vec![0.0; w.param_count()];
    let split = w.context_param_count();
    for _ in 0..max_steps {
        let contexts: Vec<FieldContext> = batch.iter().map(|s| context(w, &s.input).expect("context")).collect();
        let base = fused_loss(w, batch, &contexts);
        history.push(base);
        if base <= target {
            return history;
        }
        for i in 0..grad.len() {
            let keep = w.params()[i];
            w.params_mut()[i] = keep + h;
            let perturbed = if i < split {
                batch_loss(w, batch)
            } else {
                fused_loss(w, batch, &contexts)
            };
            grad[i] = (perturbed - base) / h;
            w.params_mut()[i] = keep;
        }
        for (p, g) in w.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    history.push(batch_loss(w, batch));
    history
}
