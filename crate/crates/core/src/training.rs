//! Training loops for the ESC regimes and the NMT variants.
//!
//! All regimes share one loop: sentence-count batches drawn from a seeded
//! per-epoch shuffle, teacher-forced cross-entropy, and Adam under an
//! inverse-square-root warmup schedule.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::compression::{noisy_input, NoiseConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::model::{dropout_rng, Batch, Model};
use crate::tensor::{Graph, RngState, Tensor};
use crate::transformer::{ModelConfig, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    SupervisedEsc,
    UnsupervisedEsc,
    SemiEsc,
    Nmt,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SupervisedEsc => "supervised",
            Regime::UnsupervisedEsc => "unsupervised",
            Regime::SemiEsc => "semi",
            Regime::Nmt => "nmt",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Regime::SupervisedEsc),
            "unsupervised" => Ok(Regime::UnsupervisedEsc),
            "semi" => Ok(Regime::SemiEsc),
            "nmt" => Ok(Regime::Nmt),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Zero means a constant `peak_lr`.
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of the main stage (pre-training for the semi-supervised regime).
    pub max_steps: usize,
    /// Fine-tuning steps of the semi-supervised regime.
    pub finetune_steps: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Periodic checkpoints go to `<prefix>.step<N>`.
    pub checkpoint_prefix: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::SupervisedEsc,
            batch_size: 32,
            warmup_steps: 200,
            peak_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            max_steps: 1000,
            finetune_steps: 0,
            label_smoothing: 0.0,
            seed: 1,
            checkpoint_every: 0,
            checkpoint_prefix: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.peak_lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("learning rate and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment coefficients must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `peak · min(t / warmup, sqrt(warmup / t))` for step `t ≥ 1`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.peak_lr;
        }
        let (t, w) = (step.max(1) as f64, self.warmup_steps as f64);
        self.peak_lr * (t / w).min((w / t).sqrt())
    }
}

/// Aligned training lines. Source and target lines must be non-empty; a
/// compressed line may be empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub cmp: Option<Vec<Vec<usize>>>,
}

impl ParallelCorpus {
    pub fn new(src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>, cmp: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if src.len() != tgt.len() || cmp.as_ref().is_some_and(|c| c.len() != src.len()) {
            return Err(Error::invalid("aligned corpora have different line counts"));
        }
        if let Some(i) = (0..src.len()).find(|&i| src[i].is_empty() || tgt[i].is_empty()) {
            return Err(Error::invalid(format!("empty line {} in corpus", i + 1)));
        }
        Ok(ParallelCorpus { src, tgt, cmp })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn batch(&self, idx: &[usize], with_cmp: bool) -> Batch {
        Batch {
            src: idx.iter().map(|&i| self.src[i].clone()).collect(),
            cmp: self
                .cmp
                .as_ref()
                .filter(|_| with_cmp)
                .map(|c| idx.iter().map(|&i| c[i].clone()).collect()),
            tgt: idx.iter().map(|&i| self.tgt[i].clone()).collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update; `grads` pairs parameter indices with gradients.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(usize, &Tensor)], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for &(i, g) in grads {
            let p = store.get_mut(crate::transformer::ParamId(i)).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("{}\t{:.10}\t{:.1}", self.step, self.loss, self.tokens_per_sec)
    }
}

pub const METRICS_HEADER: &str = "step\tloss\ttokens_per_s";

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub log: Vec<StepLog>,
}

impl Trained {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.loss).collect()
    }

    pub fn metrics_text(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for l in &self.log {
            s.push_str(&l.line());
            s.push('\n');
        }
        s
    }
}

/// Seeded epoch-wise shuffled index batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

/// Runs `steps` updates with a fresh optimizer, drawing each batch from `next`.
pub fn run_steps(
    model: &mut Model,
    cfg: &TrainConfig,
    steps: usize,
    stage: &str,
    mut next: impl FnMut() -> Result<Batch>,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    let mut opt = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let dropout_seed = RngState::new(cfg.seed).derive(&format!("{stage}/dropout")).seed;
    let offset = log.len();
    for step in 1..=steps {
        let batch = next()?;
        let started = Instant::now();
        let mut g = Graph::new();
        if model.config().dropout > 0.0 {
            g = g.with_dropout_rng(dropout_rng(dropout_seed, step));
        }
        let loss = model.loss(&mut g, &batch, cfg.label_smoothing)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {step}")));
        }
        g.backward(loss)?;
        opt.update(model.params_mut(), &g.param_grads(), cfg.learning_rate(step));
        let tokens = batch.target_tokens();
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        log.push(StepLog {
            step: offset + step,
            loss: value,
            tokens,
            tokens_per_sec: tokens as f64 / secs,
        });
        if let Some(prefix) = cfg.checkpoint_prefix.as_ref().filter(|_| cfg.checkpoint_every > 0) {
            if (offset + step) % cfg.checkpoint_every == 0 {
                let mut name = prefix.as_os_str().to_owned();
                name.push(format!(".step{}", offset + step));
                crate::checkpoint::save(model, &PathBuf::from(name))?;
            }
        }
    }
    Ok(())
}

fn esc_model(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    Model::new(model_cfg.clone(), FusionVariant::Baseline, cfg.seed)
}

fn fit_pairs(model: &mut Model, pairs: &ParallelCorpus, cfg: &TrainConfig, steps: usize, stage: &str, with_cmp: bool, log: &mut Vec<StepLog>) -> Result<()> {
    let mut batcher = Batcher::new(
        pairs.len(),
        cfg.batch_size,
        RngState::new(cfg.seed).derive(&format!("{stage}/batches")).rng(),
    );
    run_steps(model, cfg, steps, stage, || Ok(pairs.batch(&batcher.next(), with_cmp)), log)
}

fn fit_denoising(
    model: &mut Model,
    mono: &[Vec<usize>],
    pool: &[Vec<usize>],
    noise: &NoiseConfig,
    cfg: &TrainConfig,
    steps: usize,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    noise.validate()?;
    let mut batcher = Batcher::new(
        mono.len(),
        cfg.batch_size,
        RngState::new(cfg.seed).derive("denoise/batches").rng(),
    );
    let mut noise_rng = RngState::new(cfg.seed).derive("denoise/noise").rng();
    run_steps(
        model,
        cfg,
        steps,
        "denoise",
        || {
            let idx = batcher.next();
            let mut src = Vec::with_capacity(idx.len());
            for &i in &idx {
                src.push(noisy_input(&mono[i], pool, noise, &mut noise_rng)?);
            }
            Ok(Batch {
                src,
                cmp: None,
                tgt: idx.iter().map(|&i| mono[i].clone()).collect(),
            })
        },
        log,
    )
}

fn check_mono(mono: &[Vec<usize>]) -> Result<()> {
    if mono.is_empty() {
        return Err(Error::Empty("monolingual corpus"));
    }
    if mono.iter().any(Vec::is_empty) {
        return Err(Error::invalid("empty line in monolingual corpus"));
    }
    Ok(())
}

/// Teacher-forced training on verbose → compressed pairs.
pub fn train_supervised_esc(pairs: &ParallelCorpus, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Trained> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired corpus"));
    }
    let mut model = esc_model(model_cfg, cfg)?;
    let mut log = Vec::new();
    fit_pairs(&mut model, pairs, cfg, cfg.max_steps, "pairs", false, &mut log)?;
    Ok(Trained { model, log })
}

/// Denoising auto-encoder: input `shuffle(additive(S))`, target `S`. The
/// additive words are sampled from `pool`, or from `mono` itself when `pool`
/// is `None`.
pub fn train_unsupervised_esc(
    mono: &[Vec<usize>],
    pool: Option<&[Vec<usize>]>,
    noise: &NoiseConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    check_mono(mono)?;
    let pool = pool.unwrap_or(mono);
    let mut model = esc_model(model_cfg, cfg)?;
    let mut log = Vec::new();
    fit_denoising(&mut model, mono, pool, noise, cfg, cfg.max_steps, &mut log)?;
    Ok(Trained { model, log })
}

/// Continues supervised training of an existing model on pairs for
/// `cfg.finetune_steps`, with a fresh optimizer.
pub fn finetune_esc(pretrained: Trained, pairs: &ParallelCorpus, cfg: &TrainConfig) -> Result<Trained> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired corpus"));
    }
    cfg.validate()?;
    let Trained { mut model, mut log } = pretrained;
    fit_pairs(&mut model, pairs, cfg, cfg.finetune_steps, "pairs", false, &mut log)?;
    Ok(Trained { model, log })
}

/// Denoising pre-training for `max_steps`, then fine-tuning on pairs for
/// `finetune_steps`.
pub fn train_semi_esc(
    mono: &[Vec<usize>],
    pool: Option<&[Vec<usize>]>,
    pairs: &ParallelCorpus,
    noise: &NoiseConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    check_mono(mono)?;
    if pairs.is_empty() {
        return Err(Error::Empty("paired corpus"));
    }
    let pre = train_unsupervised_esc(mono, pool, noise, model_cfg, cfg)?;
    finetune_esc(pre, pairs, cfg)
}

/// Teacher-forced NMT training. Fusion variants need the aligned compressed
/// stream; the baseline never reads it.
pub fn train_nmt(
    variant: FusionVariant,
    corpus: &ParallelCorpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("parallel corpus"));
    }
    if variant.uses_compressed() && corpus.cmp.is_none() {
        return Err(Error::Variant {
            variant: variant.to_string(),
            reason: "requires a compressed stream",
        });
    }
    let mut model = Model::new(model_cfg.clone(), variant, cfg.seed)?;
    let mut log = Vec::new();
    fit_pairs(&mut model, corpus, cfg, cfg.max_steps, "nmt", variant.uses_compressed(), &mut log)?;
    Ok(Trained { model, log })
}
