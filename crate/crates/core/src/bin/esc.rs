use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use esc_core::checkpoint;
use esc_core::config::Settings;
use esc_core::evaluation::{bleu, rouge_corpus, Rouge};
use esc_core::experiment::{
    compress_lines, encode_lines, read_lines, run_experiment, table_text, translate_lines, write_lines, Cell,
    CompressionSource, ExperimentMatrix,
};
use esc_core::fusion::FusionVariant;
use esc_core::synth::synth_corpus;
use esc_core::tokenizer::{learn_bpe, learn_words, Vocabulary};
use esc_core::training::{
    finetune_esc, train_nmt, train_semi_esc, train_supervised_esc, train_unsupervised_esc, ParallelCorpus, Regime,
    Trained,
};
use esc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "esc", about = "Explicit sentence compression and backbone-fused translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra overrides, `--set key=value` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct VocabArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Merges file; omit for a word-level vocabulary
    #[arg(long = "merges-file")]
    merges_file: Option<PathBuf>,
}

impl VocabArgs {
    fn load(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.vocab, self.merges_file.as_deref())
    }
}

#[derive(Args, Clone, Default)]
struct BeamArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Rouge,
    Bleu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Subcommand)]
enum Command {
    /// Write <out>.src, <out>.cmp and <out>.tgt from the synthetic benchmark
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: usize,
        /// Independent draw name (train, valid, mono, ...)
        #[arg(long, default_value = "train")]
        stream: String,
        #[arg(long)]
        filler_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a joint BPE (or word-level) vocabulary from text files
    LearnBpe {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        merges: usize,
        /// Closed word vocabulary instead of BPE
        #[arg(long)]
        word_level: bool,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "merges-out")]
        merges_out: Option<PathBuf>,
    },
    /// Train an ESC model (supervised, unsupervised or semi)
    TrainEsc {
        #[arg(long)]
        regime: String,
        #[command(flatten)]
        vocab: VocabArgs,
        /// Monolingual sentences (unsupervised and semi)
        #[arg(long)]
        mono: Option<PathBuf>,
        /// Sentences supplying the additive noise words (defaults to --mono)
        #[arg(long)]
        noise_pool: Option<PathBuf>,
        /// Verbose side of the paired data (supervised and semi)
        #[arg(long)]
        src: Option<PathBuf>,
        /// Compressed side of the paired data
        #[arg(long)]
        cmp: Option<PathBuf>,
        /// Semi regime: fine-tune this pre-trained checkpoint instead of pre-training
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        finetune_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compress sentences with a trained ESC model, one output line per input line
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        beam: BeamArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train an NMT model of the given variant
    TrainNmt {
        #[arg(long, default_value = "baseline")]
        variant: String,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        cmp: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        independent_encoders: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Translate sentences with a trained NMT model
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cmp: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Score hypotheses against references
    Evaluate {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// +1 smoothing of BLEU n-gram precisions
        #[arg(long)]
        smooth: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Train and score a matrix of (variant, compression, gamma, seed) cells
    RunMatrix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,bsf,btf,bbf")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "esc")]
        compression: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.6")]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// ESC checkpoint for the `esc` compression source
        #[arg(long)]
        esc: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn settings(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut overrides: Vec<(&str, String)> = Vec::new();
    let mut parsed = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects key=value, got {s:?}")))?;
        parsed.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in &parsed {
        overrides.push((k.as_str(), v.clone()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed", seed.to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k, v.clone()));
        }
    }
    Settings::load(common.config.as_deref(), &overrides)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn beam_overrides(b: &BeamArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("alpha", opt(&b.alpha)),
        ("beta", opt(&b.beta)),
        ("gamma", opt(&b.gamma)),
        ("beam", opt(&b.beam)),
    ]
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::invalid(format!("this regime needs {flag}")))
}

fn save_trained(trained: &Trained, out: &Path, metrics: Option<&Path>) -> Result<()> {
    checkpoint::save(&trained.model, out)?;
    if let Some(m) = metrics {
        write_file(m, &trained.metrics_text())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SynthCorpus {
            out,
            size,
            stream,
            filler_rate,
            common,
        } => {
            let s = settings(&common, &[("filler_rate", opt(&filler_rate))])?;
            synth_corpus(&s.synth, size, &stream)?.write(&out)?;
        }
        Command::LearnBpe {
            input,
            merges,
            word_level,
            vocab,
            merges_out,
        } => {
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(read_lines(p)?);
            }
            let v = if word_level {
                learn_words(&lines)?
            } else {
                learn_bpe(&lines, merges)?
            };
            if !word_level && merges_out.is_none() {
                return Err(Error::invalid("BPE vocabularies need --merges-out"));
            }
            v.save(&vocab, merges_out.as_deref())?;
        }
        Command::TrainEsc {
            regime,
            vocab,
            mono,
            noise_pool,
            src,
            cmp,
            init,
            out,
            metrics,
            steps,
            finetune_steps,
            common,
        } => {
            let regime: Regime = regime.parse()?;
            let s = settings(
                &common,
                &[("max_steps", opt(&steps)), ("finetune_steps", opt(&finetune_steps))],
            )?;
            let v = vocab.load()?;
            let model_cfg = s.model_config(v.len())?;
            let mut train = s.train.clone();
            train.regime = regime;
            train.checkpoint_prefix = Some(out.clone());
            let load_mono = |p: &Option<PathBuf>| -> Result<Vec<Vec<usize>>> {
                Ok(encode_lines(&v, &read_lines(need(p, "--mono")?)?))
            };
            let pool = match &noise_pool {
                Some(p) => Some(encode_lines(&v, &read_lines(p)?)),
                None => None,
            };
            let pairs = || -> Result<ParallelCorpus> {
                ParallelCorpus::new(
                    encode_lines(&v, &read_lines(need(&src, "--src")?)?),
                    encode_lines(&v, &read_lines(need(&cmp, "--cmp")?)?),
                    None,
                )
            };
            let trained = match regime {
                Regime::SupervisedEsc => train_supervised_esc(&pairs()?, &model_cfg, &train)?,
                Regime::UnsupervisedEsc => {
                    train_unsupervised_esc(&load_mono(&mono)?, pool.as_deref(), &s.noise, &model_cfg, &train)?
                }
                Regime::SemiEsc => match &init {
                    Some(p) => {
                        let pre = Trained {
                            model: checkpoint::load(p)?,
                            log: Vec::new(),
                        };
                        finetune_esc(pre, &pairs()?, &train)?
                    }
                    None => train_semi_esc(&load_mono(&mono)?, pool.as_deref(), &pairs()?, &s.noise, &model_cfg, &train)?,
                },
                Regime::Nmt => return Err(Error::invalid("use train-nmt for translation models")),
            };
            save_trained(&trained, &out, metrics.as_deref())?;
        }
        Command::Compress {
            model,
            vocab,
            input,
            output,
            beam,
            common,
        } => {
            let s = settings(&common, &beam_overrides(&beam))?;
            let m = checkpoint::load(&model)?;
            let out = compress_lines(&m, &vocab.load()?, &read_lines(&input)?, &s.compression)?;
            write_lines(&output, &out)?;
        }
        Command::TrainNmt {
            variant,
            vocab,
            src,
            tgt,
            cmp,
            out,
            metrics,
            steps,
            independent_encoders,
            common,
        } => {
            let variant: FusionVariant = variant.parse()?;
            let indep = independent_encoders.then(|| "true".to_string());
            let s = settings(&common, &[("max_steps", opt(&steps)), ("independent_encoders", indep)])?;
            let v = vocab.load()?;
            let cmp = match &cmp {
                Some(p) => Some(encode_lines(&v, &read_lines(p)?)),
                None => None,
            };
            let corpus = ParallelCorpus::new(encode_lines(&v, &read_lines(&src)?), encode_lines(&v, &read_lines(&tgt)?), cmp)?;
            let mut train = s.train.clone();
            train.regime = Regime::Nmt;
            train.checkpoint_prefix = Some(out.clone());
            let trained = train_nmt(variant, &corpus, &s.model_config(v.len())?, &train)?;
            save_trained(&trained, &out, metrics.as_deref())?;
        }
        Command::Translate {
            model,
            vocab,
            input,
            cmp,
            output,
            beam,
            alpha,
            common,
        } => {
            let s = settings(&common, &[("nmt_beam", opt(&beam)), ("nmt_alpha", opt(&alpha))])?;
            let m = checkpoint::load(&model)?;
            let cmp = match &cmp {
                Some(p) => Some(read_lines(p)?),
                None => None,
            };
            let out = translate_lines(&m, &vocab.load()?, &read_lines(&input)?, cmp.as_deref(), &s.translation)?;
            write_lines(&output, &out)?;
        }
        Command::Evaluate {
            metric,
            hyp,
            reference,
            smooth,
            format,
        } => {
            let (h, r) = (read_lines(&hyp)?, read_lines(&reference)?);
            let reports = match metric {
                Metric::Rouge => Rouge::ALL
                    .iter()
                    .map(|&v| rouge_corpus(&h, &r, v))
                    .collect::<Result<Vec<_>>>()?,
                Metric::Bleu => vec![bleu(&h, &r, smooth)?],
            };
            for rep in reports {
                match format {
                    Format::Text => println!("{rep}"),
                    Format::Kv => print!("{}", rep.key_values()),
                }
            }
        }
        Command::RunMatrix {
            data,
            out,
            variants,
            compression,
            gammas,
            seeds,
            esc,
            common,
        } => {
            let s = settings(&common, &[])?;
            let mut cells = Vec::new();
            for v in &variants {
                let variant: FusionVariant = v.parse()?;
                for c in &compression {
                    let source: CompressionSource = c.parse()?;
                    for &gamma in &gammas {
                        for &seed in &seeds {
                            cells.push(Cell {
                                variant,
                                source,
                                gamma,
                                seed,
                            });
                        }
                    }
                }
            }
            let matrix = ExperimentMatrix {
                cells,
                data_dir: data,
                out_dir: out,
                esc_model: esc,
            };
            let results = run_experiment(&matrix, &s)?;
            print!("{}", table_text(&results));
            return Ok(results.iter().all(|r| r.error.is_none()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
