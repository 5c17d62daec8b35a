//! Synthetic filler-language benchmark.
//!
//! Content words `k<i>` are grouped into topics. A backbone is 3 to 5 distinct
//! words of one topic in ascending order. A source sentence is the backbone
//! with filler words `f<i>` dropped into the gaps around content words; the
//! target maps every content word to its own `y<j>` and swaps adjacent pairs
//! (`a b c d e` becomes `B A D C E`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub topic_size: usize,
    pub fillers: usize,
    pub backbone_min: usize,
    pub backbone_max: usize,
    /// Probability that each gap (before, between and after content words)
    /// receives one filler word.
    pub filler_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 6,
            topic_size: 6,
            fillers: 12,
            backbone_min: 3,
            backbone_max: 5,
            filler_rate: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.topic_size == 0 {
            return Err(Error::invalid("need at least one topic with one word"));
        }
        if self.backbone_min == 0 || self.backbone_min > self.backbone_max || self.backbone_max > self.topic_size {
            return Err(Error::invalid("backbone length range must satisfy 1 <= min <= max <= topic size"));
        }
        if !(0.0..=1.0).contains(&self.filler_rate) {
            return Err(Error::invalid("filler rate must lie in [0, 1]"));
        }
        if self.filler_rate > 0.0 && self.fillers == 0 {
            return Err(Error::invalid("a positive filler rate needs filler words"));
        }
        Ok(())
    }

    pub fn content_words(&self) -> usize {
        self.topics * self.topic_size
    }

    pub fn is_filler(word: &str) -> bool {
        word.starts_with('f')
    }

    /// Seeded bijection content index → target index.
    fn target_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.content_words()).collect();
        map.shuffle(&mut RngState::new(self.seed).derive("synth/target-map").rng());
        map
    }
}

/// Line-aligned synthetic corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub src: Vec<String>,
    pub cmp: Vec<String>,
    pub tgt: Vec<String>,
}

impl SynthCorpus {
    /// Writes `<prefix>.src`, `<prefix>.cmp` and `<prefix>.tgt`, creating the
    /// parent directory if needed.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (ext, lines) in [("src", &self.src), ("cmp", &self.cmp), ("tgt", &self.tgt)] {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!(".{ext}"));
            let path = PathBuf::from(name);
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Applies the target rule to a backbone given as content word indices.
pub fn translate_backbone(spec: &SyntheticSpec, content: &[usize]) -> Vec<String> {
    let map = spec.target_map();
    let mut out: Vec<String> = content.iter().map(|&c| format!("y{}", map[c])).collect();
    for pair in out.chunks_mut(2) {
        pair.reverse();
    }
    out
}

/// Generates `size` sentences. `stream` separates independent draws from one
/// spec (for example training, held-out and monolingual sets).
pub fn synth_corpus(spec: &SyntheticSpec, size: usize, stream: &str) -> Result<SynthCorpus> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    let mut rng = RngState::new(spec.seed).derive(&format!("synth/{stream}")).rng();
    let mut out = SynthCorpus::default();
    for _ in 0..size {
        let topic = rng.gen_range(0..spec.topics);
        let len = rng.gen_range(spec.backbone_min..=spec.backbone_max);
        let mut picks = index::sample(&mut rng, spec.topic_size, len).into_vec();
        picks.sort_unstable();
        let content: Vec<usize> = picks.iter().map(|p| topic * spec.topic_size + p).collect();
        let mut src = Vec::new();
        for gap in 0..=len {
            if spec.filler_rate > 0.0 && rng.gen_bool(spec.filler_rate) {
                src.push(format!("f{}", rng.gen_range(0..spec.fillers)));
            }
            if gap < len {
                src.push(format!("k{}", content[gap]));
            }
        }
        let backbone: Vec<String> = content.iter().map(|c| format!("k{c}")).collect();
        let tgt = translate_backbone(spec, &content);
        out.src.push(src.join(" "));
        out.cmp.push(backbone.join(" "));
        out.tgt.push(tgt.join(" "));
    }
    Ok(out)
}

/// Every word the spec can emit, for a closed word-level vocabulary.
pub fn all_words(spec: &SyntheticSpec) -> Vec<String> {
    let n = spec.content_words();
    (0..n)
        .map(|i| format!("k{i}"))
        .chain((0..spec.fillers).map(|i| format!("f{i}")))
        .chain((0..n).map(|i| format!("y{i}")))
        .collect()
}

/// The compression baselines of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineCompressor {
    AllText,
    FirstEightWords,
    RandSample,
}

impl std::str::FromStr for BaselineCompressor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alltext" => Ok(BaselineCompressor::AllText),
            "f8w" => Ok(BaselineCompressor::FirstEightWords),
            "randsample" => Ok(BaselineCompressor::RandSample),
            other => Err(Error::invalid(format!("unknown compressor {other:?}"))),
        }
    }
}

/// `AllText` returns `s`, `F8W` its first 8 tokens, `RandSample` an
/// order-preserving random subset of `floor(γ·|s|)` tokens.
pub fn baseline_compress<T: Clone, R: Rng>(s: &[T], mode: BaselineCompressor, gamma: f64, rng: &mut R) -> Vec<T> {
    match mode {
        BaselineCompressor::AllText => s.to_vec(),
        BaselineCompressor::FirstEightWords => s[..s.len().min(8)].to_vec(),
        BaselineCompressor::RandSample => {
            let k = ((gamma * s.len() as f64).floor() as usize).min(s.len());
            let mut idx = index::sample(rng, s.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| s[i].clone()).collect()
        }
    }
}
