//! Compression-rate-controlled beam search and the denoising noise procedures.
//!
//! Hypotheses are ranked by
//!
//! ```text
//! s(S', S) = log P(S'|S) / ln(S') + cp(S; S')
//! ln(S')   = ((5 + |S'|) / 6)^α
//! cp       = β · Σ_i ln(min(Σ_j p_ij, 1))
//! ```
//!
//! and no hypothesis grows past `floor(γ·|S|)` tokens. `|S'|` counts emitted
//! tokens without `</s>`; the log-probability of `</s>` is included in `logp`.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{EncodedSource, Model, StepOutput};
use crate::tokenizer::{BOS, EOS, PAD, UNK};

/// Floor applied to attention masses before the logarithm.
pub const MASS_FLOOR: f64 = 1e-9;

/// Which decoder layers feed the coverage accumulators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverageLayers {
    /// Mean over all layers (and heads).
    All,
    /// Last layer only (mean over heads).
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub beam: usize,
    /// Length allowance beyond `|S|` when decoding without a γ cap (translation).
    pub max_extra_tokens: usize,
    pub coverage: CoverageLayers,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.6,
            beam: 5,
            max_extra_tokens: 10,
            coverage: CoverageLayers::All,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.beam == 0 {
            return Err(Error::invalid("beam size must be positive"));
        }
        Ok(())
    }

    /// `floor(γ·len)`.
    pub fn cap(&self, src_len: usize) -> usize {
        (self.gamma * src_len as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub att_mass: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn length_norm(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

pub fn coverage_penalty(att_mass: &[f64], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    beta * att_mass.iter().map(|&m| m.clamp(MASS_FLOOR, 1.0).ln()).sum::<f64>()
}

pub fn score(hyp: &Hypothesis, cfg: &CompressionConfig) -> f64 {
    hyp.logp / length_norm(hyp.len(), cfg.alpha) + coverage_penalty(&hyp.att_mass, cfg.beta)
}

/// Anything that can extend a batch of equal-length prefixes.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Number of source positions covered by the attention vectors.
    fn src_len(&self) -> usize;
    /// `prefixes` all start with `<s>`.
    fn step(&self, prefixes: &[&[usize]]) -> Result<Vec<StepOutput>>;
}

/// A model bound to one encoded source sentence.
pub struct BoundModel<'a> {
    pub model: &'a Model,
    pub source: EncodedSource,
}

impl<'a> BoundModel<'a> {
    pub fn new(model: &'a Model, src: &[usize], cmp: Option<&[usize]>) -> Result<Self> {
        Ok(BoundModel {
            model,
            source: model.begin(src, cmp)?,
        })
    }
}

impl StepModel for BoundModel<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn src_len(&self) -> usize {
        self.source.src_len
    }

    fn step(&self, prefixes: &[&[usize]]) -> Result<Vec<StepOutput>> {
        self.model.step(&self.source, prefixes)
    }
}

fn coverage_row(out: &StepOutput, layers: CoverageLayers, n: usize) -> Vec<f64> {
    let picked: &[Vec<f64>] = match layers {
        CoverageLayers::All => &out.attention,
        CoverageLayers::Last => out.attention.last().map(std::slice::from_ref).unwrap_or(&[]),
    };
    let mut row = vec![0.0; n];
    for layer in picked {
        for (r, a) in row.iter_mut().zip(layer) {
            *r += a / picked.len() as f64;
        }
    }
    row
}

/// Beam search with a hard length cap. Every step pools the extensions of all
/// open hypotheses, ranks them by [`score`], and keeps the best `beam`;
/// extensions ending in `</s>` and those reaching `cap` tokens move to the
/// finished pool. The result is the best finished hypothesis.
pub fn beam_search<M: StepModel>(model: &M, cap: usize, cfg: &CompressionConfig) -> Result<Hypothesis> {
    let n = model.src_len();
    let empty = Hypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        att_mass: vec![0.0; n],
        finished: true,
    };
    if cap == 0 {
        return Ok(empty);
    }
    let mut open = vec![Hypothesis {
        finished: false,
        ..empty
    }];
    let mut finished: Vec<(f64, Hypothesis)> = Vec::new();
    while !open.is_empty() {
        let prefixes: Vec<Vec<usize>> = open
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        let outs = model.step(&refs)?;
        let mut candidates: Vec<(f64, Hypothesis)> = Vec::new();
        for (h, out) in open.iter().zip(&outs) {
            let cover = coverage_row(out, cfg.coverage, n);
            for (tok, &lp) in out.log_probs.iter().enumerate() {
                if matches!(tok, PAD | BOS | UNK) || (tok == EOS && h.is_empty()) {
                    continue;
                }
                let mut next = Hypothesis {
                    tokens: h.tokens.clone(),
                    logp: h.logp + lp,
                    att_mass: h.att_mass.clone(),
                    finished: tok == EOS,
                };
                if tok != EOS {
                    next.tokens.push(tok);
                    for (m, a) in next.att_mass.iter_mut().zip(&cover) {
                        *m += a;
                    }
                    next.finished = next.tokens.len() >= cap;
                }
                candidates.push((score(&next, cfg), next));
            }
        }
        if candidates.is_empty() {
            break;
        }
        // stable sort keeps generation order among equal scores
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        candidates.truncate(cfg.beam);
        open.clear();
        for (s, h) in candidates {
            if h.finished {
                finished.push((s, h));
            } else {
                open.push(h);
            }
        }
    }
    finished
        .into_iter()
        .reduce(|best, c| if c.0 > best.0 { c } else { best })
        .map(|(_, h)| h)
        .ok_or(Error::BeamCollapse)
}

/// Compresses `src` (which must be non-empty) to at most `floor(γ·|src|)` tokens.
pub fn compress_with<M: StepModel>(model: &M, cfg: &CompressionConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if model.src_len() == 0 {
        return Err(Error::Empty("source sentence"));
    }
    Ok(beam_search(model, cfg.cap(model.src_len()), cfg)?.tokens)
}

pub fn compress(model: &Model, src: &[usize], cfg: &CompressionConfig) -> Result<Vec<usize>> {
    if src.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    compress_with(&BoundModel::new(model, src, None)?, cfg)
}

/// Beam decoding for translation: no γ cap, at most `|src| + max_extra_tokens`.
pub fn translate(model: &Model, src: &[usize], cmp: Option<&[usize]>, cfg: &CompressionConfig) -> Result<Vec<usize>> {
    let bound = BoundModel::new(model, src, cmp)?;
    Ok(beam_search(&bound, src.len() + cfg.max_extra_tokens, cfg)?.tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Fraction of the sampled sentence's words appended.
    pub sample_fraction: f64,
    pub shuffle: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sample_fraction: 0.5,
            shuffle: true,
        }
    }
}

impl NoiseConfig {
    /// A zero fraction is accepted so that noise can be switched off.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sample_fraction) {
            return Err(Error::invalid("sample fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Appends `floor(fraction·|T|)` words of a random corpus sentence `T`, drawn
/// without replacement and kept in their original order.
pub fn additive_sampling_noise<R: Rng>(
    s: &[usize],
    corpus: &[Vec<usize>],
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::Empty("noise corpus"));
    }
    let sampled = &corpus[rng.gen_range(0..corpus.len())];
    let keep = (fraction * sampled.len() as f64).floor() as usize;
    let mut picks = index::sample(rng, sampled.len(), keep.min(sampled.len())).into_vec();
    picks.sort_unstable();
    let mut out = s.to_vec();
    out.extend(picks.into_iter().map(|i| sampled[i]));
    Ok(out)
}

pub fn shuffle_noise<R: Rng>(s: &[usize], rng: &mut R) -> Vec<usize> {
    let mut out = s.to_vec();
    out.shuffle(rng);
    out
}

/// `shuffle(additive(s))`, each stage optional through `cfg`.
pub fn noisy_input<R: Rng>(s: &[usize], corpus: &[Vec<usize>], cfg: &NoiseConfig, rng: &mut R) -> Result<Vec<usize>> {
    let noisy = if cfg.sample_fraction > 0.0 {
        additive_sampling_noise(s, corpus, cfg.sample_fraction, rng)?
    } else {
        s.to_vec()
    };
    Ok(if cfg.shuffle { shuffle_noise(&noisy, rng) } else { noisy })
}
