//! Corpus plumbing shared by the CLI stages and the ablation harness.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint;
use crate::compression::{compress, translate, CompressionConfig};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::evaluation::bleu;
use crate::fusion::FusionVariant;
use crate::model::Model;
use crate::synth::{baseline_compress, BaselineCompressor};
use crate::tensor::RngState;
use crate::tokenizer::Vocabulary;
use crate::training::{train_nmt, ParallelCorpus, Trained};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_lines(vocab: &Vocabulary, lines: &[String]) -> Vec<Vec<usize>> {
    lines.iter().map(|l| vocab.encode(l).into_ids()).collect()
}

pub fn decode_lines(vocab: &Vocabulary, seqs: &[Vec<usize>]) -> Result<Vec<String>> {
    seqs.iter().map(|s| vocab.decode(s)).collect()
}

/// Loads `vocab.txt` and, when present, `merges.txt` from `dir`.
pub fn load_vocab_dir(dir: &Path) -> Result<Vocabulary> {
    let merges = dir.join("merges.txt");
    Vocabulary::load(&dir.join("vocab.txt"), merges.exists().then_some(merges.as_path()))
}

pub fn compress_lines(model: &Model, vocab: &Vocabulary, lines: &[String], cfg: &CompressionConfig) -> Result<Vec<String>> {
    lines
        .iter()
        .map(|l| vocab.decode(&compress(model, &vocab.encode(l), cfg)?))
        .collect()
}

pub fn translate_lines(
    model: &Model,
    vocab: &Vocabulary,
    src: &[String],
    cmp: Option<&[String]>,
    cfg: &CompressionConfig,
) -> Result<Vec<String>> {
    if cmp.is_some_and(|c| c.len() != src.len()) {
        return Err(Error::invalid("compressed stream not aligned with sources"));
    }
    src.iter()
        .enumerate()
        .map(|(i, l)| {
            let c = cmp.map(|c| vocab.encode(&c[i]).into_ids());
            vocab.decode(&translate(model, &vocab.encode(l), c.as_deref(), cfg)?)
        })
        .collect()
}

/// Where a cell's compressed stream comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompressionSource {
    /// No compressed stream; the cell runs the baseline.
    None,
    /// Gold backbones from the corpus `.cmp` files, cut to `floor(γ·|S|)`.
    Gold,
    /// A trained ESC model.
    Esc,
    AllText,
    F8W,
    RandSample,
}

impl fmt::Display for CompressionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompressionSource::None => "none",
            CompressionSource::Gold => "gold",
            CompressionSource::Esc => "esc",
            CompressionSource::AllText => "alltext",
            CompressionSource::F8W => "f8w",
            CompressionSource::RandSample => "randsample",
        })
    }
}

impl FromStr for CompressionSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CompressionSource::None),
            "gold" => Ok(CompressionSource::Gold),
            "esc" => Ok(CompressionSource::Esc),
            "alltext" => Ok(CompressionSource::AllText),
            "f8w" => Ok(CompressionSource::F8W),
            "randsample" => Ok(CompressionSource::RandSample),
            other => Err(Error::invalid(format!("unknown compression source {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: FusionVariant,
    pub source: CompressionSource,
    pub gamma: f64,
    pub seed: u64,
}

impl Cell {
    /// γ = 0 or no compression source means no compressed sentence exists, so
    /// the cell trains the baseline.
    pub fn wired_variant(&self) -> FusionVariant {
        if self.gamma == 0.0 || self.source == CompressionSource::None {
            FusionVariant::Baseline
        } else {
            self.variant
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}-g{}-s{}", self.variant, self.source, self.gamma, self.seed)
    }
}

/// `data_dir` holds `train.{src,tgt}`, `valid.{src,tgt}`, `vocab.txt` and
/// optionally `merges.txt` and gold `train.cmp`/`valid.cmp`.
#[derive(Clone, Debug)]
pub struct ExperimentMatrix {
    pub cells: Vec<Cell>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub esc_model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub variant: FusionVariant,
    pub bleu: f64,
    pub params: usize,
    pub tokens_per_sec: f64,
    pub error: Option<String>,
}

pub const TABLE_HEADER: &str = "cell\tvariant\tcompression\tgamma\tseed\tbleu\tparams\ttokens_per_s\tstatus";

impl CellResult {
    pub fn row(&self) -> String {
        let status = match &self.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {}", e.replace(['\t', '\n'], " ")),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\t{:.1}\t{}",
            self.cell.name(),
            self.variant,
            self.cell.source,
            self.cell.gamma,
            self.cell.seed,
            self.bleu,
            self.params,
            self.tokens_per_sec,
            status
        )
    }
}

pub fn table_text(results: &[CellResult]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in results {
        s.push_str(&r.row());
        s.push('\n');
    }
    s
}

/// Mean training throughput in target tokens per second.
pub fn throughput(trained: &Trained) -> f64 {
    let tokens: usize = trained.log.iter().map(|l| l.tokens).sum();
    let secs: f64 = trained.log.iter().map(|l| l.tokens as f64 / l.tokens_per_sec).sum();
    if secs > 0.0 {
        tokens as f64 / secs
    } else {
        0.0
    }
}

struct Data {
    vocab: Vocabulary,
    train_src: Vec<String>,
    train_tgt: Vec<String>,
    valid_src: Vec<String>,
    valid_tgt: Vec<String>,
    gold: Option<(Vec<String>, Vec<String>)>,
}

impl Data {
    fn load(dir: &Path) -> Result<Self> {
        let gold = if dir.join("train.cmp").exists() {
            Some((read_lines(&dir.join("train.cmp"))?, read_lines(&dir.join("valid.cmp"))?))
        } else {
            None
        };
        Ok(Data {
            vocab: load_vocab_dir(dir)?,
            train_src: read_lines(&dir.join("train.src"))?,
            train_tgt: read_lines(&dir.join("train.tgt"))?,
            valid_src: read_lines(&dir.join("valid.src"))?,
            valid_tgt: read_lines(&dir.join("valid.tgt"))?,
            gold,
        })
    }
}

type Streams = (Vec<String>, Vec<String>);

fn cap_words(line: &str, gamma: f64, src: &str) -> String {
    let n = (gamma * src.split_whitespace().count() as f64).floor() as usize;
    line.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn build_streams(
    cell: &Cell,
    data: &Data,
    esc: Option<&Model>,
    settings: &Settings,
) -> Result<Option<Streams>> {
    if cell.wired_variant() == FusionVariant::Baseline {
        return Ok(None);
    }
    let both = |f: &mut dyn FnMut(&[String]) -> Result<Vec<String>>| -> Result<Streams> {
        Ok((f(&data.train_src)?, f(&data.valid_src)?))
    };
    let baseline = |mode: BaselineCompressor| -> Result<Streams> {
        let mut rng = RngState::new(cell.seed).derive("randsample").rng();
        both(&mut |lines: &[String]| {
            Ok(lines
                .iter()
                .map(|l| {
                    let words: Vec<&str> = l.split_whitespace().collect();
                    baseline_compress(&words, mode, cell.gamma, &mut rng).join(" ")
                })
                .collect())
        })
    };
    let streams = match cell.source {
        CompressionSource::None => unreachable!(),
        CompressionSource::Gold => {
            let (t, v) = data
                .gold
                .as_ref()
                .ok_or_else(|| Error::invalid("gold compression needs train.cmp and valid.cmp"))?;
            let cut = |g: &[String], s: &[String]| g.iter().zip(s).map(|(g, s)| cap_words(g, cell.gamma, s)).collect();
            (cut(t, &data.train_src), cut(v, &data.valid_src))
        }
        CompressionSource::Esc => {
            let esc = esc.ok_or_else(|| Error::invalid("esc compression needs an ESC checkpoint"))?;
            let cfg = CompressionConfig {
                gamma: cell.gamma,
                ..settings.compression.clone()
            };
            both(&mut |lines: &[String]| compress_lines(esc, &data.vocab, lines, &cfg))?
        }
        CompressionSource::AllText => baseline(BaselineCompressor::AllText)?,
        CompressionSource::F8W => baseline(BaselineCompressor::FirstEightWords)?,
        CompressionSource::RandSample => baseline(BaselineCompressor::RandSample)?,
    };
    Ok(Some(streams))
}

fn run_cell(
    cell: &Cell,
    data: &Data,
    streams: Option<&Streams>,
    settings: &Settings,
    dir: &Path,
) -> Result<(f64, usize, f64)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = &data.vocab;
    let corpus = ParallelCorpus::new(
        encode_lines(vocab, &data.train_src),
        encode_lines(vocab, &data.train_tgt),
        streams.map(|(t, _)| encode_lines(vocab, t)),
    )?;
    if let Some((t, v)) = streams {
        write_lines(&dir.join("train.cmp"), t)?;
        write_lines(&dir.join("valid.cmp"), v)?;
    }
    let mut train = settings.train.clone();
    train.seed = cell.seed;
    let model_cfg = settings.model_config(vocab.len())?;
    let trained = train_nmt(cell.wired_variant(), &corpus, &model_cfg, &train)?;
    checkpoint::save(&trained.model, &dir.join("model.ckpt"))?;
    fs::write(dir.join("metrics.log"), trained.metrics_text()).map_err(|e| Error::io(dir, e))?;
    let hyp = translate_lines(
        &trained.model,
        vocab,
        &data.valid_src,
        streams.map(|(_, v)| v.as_slice()),
        &settings.translation,
    )?;
    write_lines(&dir.join("valid.hyp"), &hyp)?;
    let score = bleu(&hyp, &data.valid_tgt, false)?.score;
    Ok((score, trained.model.param_count(), throughput(&trained)))
}

/// Trains and scores every cell, writing `results.tsv` under `out_dir`. A
/// failing cell is recorded in its row and the remaining cells still run.
pub fn run_experiment(matrix: &ExperimentMatrix, settings: &Settings) -> Result<Vec<CellResult>> {
    fs::create_dir_all(&matrix.out_dir).map_err(|e| Error::io(&matrix.out_dir, e))?;
    let data = Data::load(&matrix.data_dir)?;
    let esc = matrix.esc_model.as_deref().map(checkpoint::load).transpose()?;
    let mut cache: HashMap<(CompressionSource, u64, u64), Streams> = HashMap::new();
    let mut results = Vec::new();
    for cell in &matrix.cells {
        // baseline compressors are seeded per cell; the rest only depend on γ
        let seed_key = if cell.source == CompressionSource::RandSample { cell.seed } else { 0 };
        let key = (cell.source, cell.gamma.to_bits(), seed_key);
        let outcome = (|| {
            if !cache.contains_key(&key) {
                if let Some(s) = build_streams(cell, &data, esc.as_ref(), settings)? {
                    cache.insert(key, s);
                }
            }
            let streams = cache.get(&key).filter(|_| cell.wired_variant() != FusionVariant::Baseline);
            run_cell(cell, &data, streams, settings, &matrix.out_dir.join(cell.name()))
        })();
        let (bleu, params, tps, error) = match outcome {
            Ok((b, p, t)) => (b, p, t, None),
            Err(e) => (0.0, 0, 0.0, Some(e.to_string())),
        };
        results.push(CellResult {
            cell: cell.clone(),
            variant: cell.wired_variant(),
            bleu,
            params,
            tokens_per_sec: tps,
            error,
        });
        fs::write(matrix.out_dir.join("results.tsv"), table_text(&results))
            .map_err(|e| Error::io(&matrix.out_dir, e))?;
    }
    Ok(results)
}
