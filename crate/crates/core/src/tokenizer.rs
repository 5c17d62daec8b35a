//! Joint subword vocabulary shared by source, target, and compressed streams.
//!
//! Two segmentation modes exist. BPE mode splits each whitespace word into
//! characters, marks the final symbol of the word with `</w>`, and applies the
//! learned merges by rank. Word mode keeps whole words as a closed inventory and
//! is what the synthetic corpora use.
//!
//! Reserved ids are fixed: `0 = <pad>`, `1 = <s>`, `2 = </s>`, `3 = <unk>`.
//! Text is normalized by collapsing whitespace runs to single spaces and
//! trimming, so `decode(encode(s))` returns the normalized form of `s`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// End-of-word marker appended to the last symbol of every BPE word.
pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segmentation {
    Bpe,
    Word,
}

/// Encoded sentence without padding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    mode: Segmentation,
}

pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_pair(syms: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Greedy BPE: repeatedly merges the most frequent adjacent pair, breaking ties
/// by the lexicographically smallest `(left, right)`. Stops early when no pair
/// remains.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], merge_count: usize) -> Result<Vocabulary> {
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *words.entry(w.to_string()).or_default() += 1;
        }
    }
    if words.is_empty() {
        return Err(Error::Empty("BPE corpus"));
    }
    let mut segmented: Vec<(Vec<String>, usize)> =
        words.iter().map(|(w, &c)| (word_symbols(w), c)).collect();

    let mut merges = Vec::with_capacity(merge_count);
    for _ in 0..merge_count {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &segmented {
            for pair in syms.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((l, r), _)) = best else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in segmented.iter_mut() {
            *syms = merge_pair(syms, &l, &r);
        }
        merges.push((l, r));
    }

    // every character of the alphabet, both word-internal and word-final
    let base: std::collections::BTreeSet<String> = words
        .keys()
        .flat_map(|w| w.chars())
        .flat_map(|c| [c.to_string(), format!("{c}{END_OF_WORD}")])
        .collect();
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base);
    for (l, r) in &merges {
        tokens.push(format!("{l}{r}"));
    }
    Vocabulary::build(tokens, merges, Segmentation::Bpe)
}

/// Closed word-level vocabulary: every distinct whitespace token, sorted.
pub fn learn_words<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    let words: std::collections::BTreeSet<&str> = corpus
        .iter()
        .flat_map(|l| l.as_ref().split_whitespace())
        .collect();
    if words.is_empty() {
        return Err(Error::Empty("word corpus"));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().map(String::from));
    Vocabulary::build(tokens, Vec::new(), Segmentation::Word)
}

impl Vocabulary {
    fn build(
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        mode: Segmentation,
    ) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format("vocabulary", format!("id {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("bad token {t:?}")));
            }
            // distinct merges can spell the same string; the first id wins
            index.entry(t.clone()).or_insert(i);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            index,
            merges,
            ranks,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> Segmentation {
        self.mode
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min();
            let Some(&rank) = best else {
                return syms;
            };
            let (l, r) = &self.merges[rank];
            syms = merge_pair(&syms, l, r);
        }
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.mode {
                Segmentation::Word => ids.push(self.id(word).unwrap_or(UNK)),
                Segmentation::Bpe => {
                    for sym in self.segment_word(word) {
                        ids.push(self.id(&sym).unwrap_or(UNK));
                    }
                }
            }
        }
        TokenSequence(ids)
    }

    /// Inverse of [`Vocabulary::encode`] on in-alphabet text. Special tokens other
    /// than `<unk>` are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut at_word_start = true;
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IndexOutOfRange {
                index: id,
                size: self.len(),
            })?;
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if at_word_start && !out.is_empty() {
                out.push(' ');
            }
            match self.mode {
                Segmentation::Word => {
                    out.push_str(tok);
                    at_word_start = true;
                }
                Segmentation::Bpe => match tok.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        at_word_start = true;
                    }
                    None => {
                        out.push_str(tok);
                        at_word_start = id == UNK;
                    }
                },
            }
        }
        Ok(out)
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Result<Vec<String>> {
        Ok(self
            .decode(ids)?
            .split_whitespace()
            .map(String::from)
            .collect())
    }

    /// `token<TAB>id` lines.
    pub fn vocab_file(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    /// `left right` lines in merge order.
    pub fn merges_file(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    /// Parses a vocabulary file and, for BPE mode, its merges file. Without a
    /// merges file the vocabulary is word-level.
    pub fn parse(vocab: &str, merges: Option<&str>) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in vocab.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocab file", format!("line {}: no tab", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format("vocab file", format!("line {}: bad id", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::format(
                    "vocab file",
                    format!("line {}: ids must be dense, got {id}", n + 1),
                ));
            }
            tokens.push(tok.to_string());
        }
        let (merges, mode) = match merges {
            None => (Vec::new(), Segmentation::Word),
            Some(text) => {
                let mut m = Vec::new();
                for (n, line) in text.lines().enumerate() {
                    if line.is_empty() {
                        continue;
                    }
                    let (l, r) = line.split_once(' ').ok_or_else(|| {
                        Error::format("merges file", format!("line {}: expected a pair", n + 1))
                    })?;
                    m.push((l.to_string(), r.to_string()));
                }
                (m, Segmentation::Bpe)
            }
        };
        Vocabulary::build(tokens, merges, mode)
    }

    pub fn load(vocab_path: &Path, merges_path: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let vocab = read(vocab_path)?;
        let merges = merges_path.map(read).transpose()?;
        Vocabulary::parse(&vocab, merges.as_deref())
    }

    pub fn save(&self, vocab_path: &Path, merges_path: Option<&Path>) -> Result<()> {
        std::fs::write(vocab_path, self.vocab_file()).map_err(|e| Error::io(vocab_path, e))?;
        if let Some(p) = merges_path {
            std::fs::write(p, self.merges_file()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}
