#![allow(dead_code)]

use std::collections::HashMap;

use esc_core::fusion::FusionVariant;
use esc_core::model::{Batch, Model};
use esc_core::tensor::Graph;
use esc_core::transformer::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::sized(vocab, 8, 2, 16, 2);
    cfg.gate_layers = 1;
    cfg
}

pub fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> Vec<usize> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(4..vocab)).collect()
}

/// Two sentences of different lengths so padding masks are exercised.
pub fn random_batch(seed: u64, vocab: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        src: vec![random_seq(&mut rng, vocab, 4, 4), random_seq(&mut rng, vocab, 2, 2)],
        cmp: Some(vec![random_seq(&mut rng, vocab, 2, 2), random_seq(&mut rng, vocab, 1, 1)]),
        tgt: vec![random_seq(&mut rng, vocab, 3, 3), random_seq(&mut rng, vocab, 2, 2)],
    }
}

fn batch_loss(model: &Model, batch: &Batch) -> f64 {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch, 0.0).unwrap();
    g.value(loss).item()
}

pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub params: usize,
}

/// Compares every parameter scalar's analytic gradient with a central finite
/// difference, step 1e-5.
pub fn full_grad_check(model: &Model, batch: &Batch) -> GradReport {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch, 0.0).unwrap();
    g.backward(loss).unwrap();
    let analytic: HashMap<usize, Vec<f64>> = g
        .param_grads()
        .into_iter()
        .map(|(id, t)| (id, t.data().to_vec()))
        .collect();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut report = GradReport {
        max_rel: 0.0,
        checked: 0,
        params: 0,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        report.params += 1;
        let n = model.params().get(id).len();
        let zeros = vec![0.0; n];
        let a = analytic.get(&id.0).unwrap_or(&zeros);
        for i in 0..n {
            let orig = model.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = batch_loss(&probe, batch);
            probe.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = batch_loss(&probe, batch);
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (a[i] - num).abs() / a[i].abs().max(num.abs()).max(1e-5);
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    report
}

/// Copies every tensor of `from` whose name exists in `to`.
pub fn copy_shared(from: &Model, to: &mut Model) {
    for id in from.params().ids() {
        if let Some(dst) = to.params().find(from.params().name(id)) {
            *to.params_mut().get_mut(dst) = from.params().get(id).clone();
        }
    }
}

pub fn variant_model(variant: FusionVariant, seed: u64) -> Model {
    Model::new(tiny_config(12), variant, seed).unwrap()
}

/// Deterministic stand-in for a trained model: next-token scores and
/// attention rows are pseudo-random functions of the prefix.
pub struct ToyModel {
    pub seed: u64,
    pub vocab: usize,
    pub src_len: usize,
    pub layers: usize,
}

impl ToyModel {
    fn rng_for(&self, prefix: &[usize]) -> ChaCha8Rng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            h = (h ^ t as u64).wrapping_mul(0x1000_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn output(&self, prefix: &[usize]) -> esc_core::model::StepOutput {
        let mut rng = self.rng_for(prefix);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let attention = (0..self.layers)
            .map(|_| {
                let raw: Vec<f64> = (0..self.src_len + 1).map(|_| rng.gen_range(0.0..2.0f64).exp()).collect();
                let z: f64 = raw.iter().sum();
                raw[..self.src_len].iter().map(|x| x / z).collect()
            })
            .collect();
        esc_core::model::StepOutput {
            log_probs: logits.iter().map(|x| x - lse).collect(),
            attention,
        }
    }
}

impl esc_core::compression::StepModel for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn src_len(&self) -> usize {
        self.src_len
    }

    fn step(&self, prefixes: &[&[usize]]) -> esc_core::Result<Vec<esc_core::model::StepOutput>> {
        Ok(prefixes.iter().map(|p| self.output(p)).collect())
    }
}

/// Exhaustive search over every admissible output: `k` content tokens then
/// `</s>` for `1 <= k < cap`, or exactly `cap` content tokens. Scored directly
/// from the printed formula.
pub fn brute_force_best(toy: &ToyModel, cap: usize, alpha: f64, beta: f64) -> (Vec<usize>, f64) {
    use esc_core::tokenizer::{BOS, EOS};
    let content: Vec<usize> = (4..toy.vocab).collect();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut stack: Vec<Vec<usize>> = content.iter().map(|&t| vec![t]).collect();
    while let Some(seq) = stack.pop() {
        let mut logp = 0.0;
        let mut mass = vec![0.0; toy.src_len];
        let mut prefix = vec![BOS];
        for &t in &seq {
            let out = toy.output(&prefix);
            logp += out.log_probs[t];
            for layer in &out.attention {
                for (m, a) in mass.iter_mut().zip(layer) {
                    *m += a / out.attention.len() as f64;
                }
            }
            prefix.push(t);
        }
        if seq.len() < cap {
            logp += toy.output(&prefix).log_probs[EOS];
            for &t in &content {
                let mut next = seq.clone();
                next.push(t);
                stack.push(next);
            }
        }
        let ln = ((5.0 + seq.len() as f64) / 6.0).powf(alpha);
        let cp: f64 = mass.iter().map(|&m| m.max(1e-9).min(1.0).ln()).sum::<f64>() * beta;
        let s = logp / ln + cp;
        if s > best.1 {
            best = (seq, s);
        }
    }
    best
}
