//! ROUGE-1/2/L F1 and corpus-level BLEU-4.
//!
//! ROUGE works on lowercased whitespace tokens without stemming. BLEU follows
//! the multi-bleu convention: clipped n-gram counts and lengths are summed over
//! the corpus before any ratio is taken, with a single reference per sentence.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rouge {
    R1,
    R2,
    RL,
}

impl Rouge {
    pub const ALL: [Rouge; 3] = [Rouge::R1, Rouge::R2, Rouge::RL];

    pub fn name(self) -> &'static str {
        match self {
            Rouge::R1 => "R-1",
            Rouge::R2 => "R-2",
            Rouge::RL => "R-L",
        }
    }
}

/// Result of one metric. ROUGE fills precision/recall/f1; BLEU fills the
/// n-gram precisions, brevity penalty, length ratio and `score` (×100).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ngram_precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub length_ratio: f64,
    pub score: f64,
    pub sentences: usize,
}

impl MetricReport {
    fn rouge(variant: Rouge, precision: f64, recall: f64, f1: f64, sentences: usize) -> Self {
        MetricReport {
            metric: variant.name().to_string(),
            precision,
            recall,
            f1,
            score: f1,
            sentences,
            ..Default::default()
        }
    }

    /// `key=value` pairs, one per line.
    pub fn key_values(&self) -> String {
        if self.metric == "BLEU" {
            let p: Vec<String> = self.ngram_precisions.iter().map(|p| format!("{p:.6}")).collect();
            format!(
                "metric=BLEU\nscore={:.6}\nprecisions={}\nbrevity_penalty={:.6}\nratio={:.6}\nsentences={}\n",
                self.score,
                p.join(","),
                self.brevity_penalty,
                self.length_ratio,
                self.sentences
            )
        } else {
            format!(
                "metric={}\nprecision={:.6}\nrecall={:.6}\nf1={:.6}\nsentences={}\n",
                self.metric, self.precision, self.recall, self.f1, self.sentences
            )
        }
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.metric == "BLEU" {
            let p: Vec<String> = self.ngram_precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
            write!(
                f,
                "BLEU = {:.2} ({}, BP={:.3}, ratio={:.3})",
                self.score,
                p.join("/"),
                self.brevity_penalty,
                self.length_ratio
            )
        } else {
            write!(
                f,
                "{} P {:.4} R {:.4} F1 {:.4}",
                self.metric, self.precision, self.recall, self.f1
            )
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(p: f64, r: f64) -> f64 {
    if p > 0.0 && r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// ROUGE over arbitrary token sequences. An empty candidate scores zero.
pub fn rouge_tokens<T: Eq + Hash>(cand: &[T], reference: &[T], variant: Rouge) -> Result<MetricReport> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    let (matched, cand_units, ref_units) = match variant {
        Rouge::R1 | Rouge::R2 => {
            let n = if variant == Rouge::R1 { 1 } else { 2 };
            let (m, c) = clipped(cand, reference, n);
            (m, c, reference.len().saturating_sub(n - 1))
        }
        Rouge::RL => (lcs_len(cand, reference), cand.len(), reference.len()),
    };
    let ratio = |m: usize, d: usize| if d == 0 { 0.0 } else { m as f64 / d as f64 };
    let (p, r) = (ratio(matched, cand_units), ratio(matched, ref_units));
    Ok(MetricReport::rouge(variant, p, r, f1(p, r), 1))
}

pub fn rouge_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn rouge(candidate: &str, reference: &str, variant: Rouge) -> Result<MetricReport> {
    rouge_tokens(&rouge_tokenize(candidate), &rouge_tokenize(reference), variant)
}

/// Sentence-averaged ROUGE over aligned lists.
pub fn rouge_corpus<S: AsRef<str>>(cands: &[S], refs: &[S], variant: Rouge) -> Result<MetricReport> {
    if cands.len() != refs.len() {
        return Err(Error::invalid("candidate and reference counts differ"));
    }
    if cands.is_empty() {
        return Err(Error::Empty("candidate corpus"));
    }
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (c, rf) in cands.iter().zip(refs) {
        let m = rouge(c.as_ref(), rf.as_ref(), variant)?;
        p += m.precision;
        r += m.recall;
        f += m.f1;
    }
    let n = cands.len() as f64;
    Ok(MetricReport::rouge(variant, p / n, r / n, f / n, cands.len()))
}

/// Corpus BLEU-4 over pre-tokenized sentences. With `smooth`, every n-gram
/// precision becomes `(matches + 1) / (total + 1)`.
pub fn bleu_tokens<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], smooth: bool) -> Result<MetricReport> {
    if cands.is_empty() {
        return Err(Error::Empty("candidate corpus"));
    }
    if cands.len() != refs.len() {
        return Err(Error::invalid("candidate and reference counts differ"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let (m, t) = clipped(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let precisions: Vec<f64> = (0..4)
        .map(|i| {
            if smooth {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            } else if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    let bp = if c_len == 0 {
        0.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).min(0.0).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(MetricReport {
        metric: "BLEU".into(),
        ngram_precisions: precisions,
        brevity_penalty: bp,
        length_ratio: if r_len == 0 { 0.0 } else { c_len as f64 / r_len as f64 },
        score,
        sentences: cands.len(),
        ..Default::default()
    })
}

pub fn bleu<S: AsRef<str>>(cands: &[S], refs: &[S], smooth: bool) -> Result<MetricReport> {
    let split = |v: &[S]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.as_ref().split_whitespace().map(String::from).collect())
            .collect()
    };
    bleu_tokens(&split(cands), &split(refs), smooth)
}
