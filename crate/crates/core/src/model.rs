//! The full encoder-decoder for one [`FusionVariant`].
//!
//! Encoder inputs get `</s>` appended; decoder inputs are `<s> y` and targets
//! `y </s>`. Decoder layers are
//!
//! ```text
//! H_tgt = LN(y + MaskedMHA(y))
//! c     = FFN(MHA(H_tgt, M, M))            M = H_x, or H_x' for source fusion
//! c'    = gate(c, FFN(MHA(H_tgt, A, A)))   target-side variants only
//! o     = LN(H_tgt + c')
//! ```
//!
//! and the next-token distribution is `softmax(L_o · GeLU(L_w · o))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{backbone_context, gate_combine, source_fuse, FusionVariant, GateParams};
use crate::tensor::{kernels, AttnMask, Graph, RngState, Tensor, Var};
use crate::tokenizer::{BOS, EOS, PAD};
use crate::transformer::{
    attend, encode, layer_norm, multi_head, output_logits, AttendBlock, AttnLayout, EncoderLayer,
    Initializer, ModelConfig, MultiHeadParams, NormParams, OutputHead, Padded, ParamId, ParamStore,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadParams,
    pub norm1: NormParams,
    pub cross: AttendBlock,
    pub backbone: Option<AttendBlock>,
    pub gate: Option<GateParams>,
    pub norm2: NormParams,
}

/// Training or scoring examples. `cmp` is required by fusion variants and
/// ignored by the baseline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub cmp: Option<Vec<Vec<usize>>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(|t| t.len() + 1).sum()
    }
}

/// Encoder-side memories on a graph.
#[derive(Clone, Debug)]
pub struct Memory {
    pub main: Var,
    pub main_lens: Vec<usize>,
    pub main_width: usize,
    /// Second memory read by the backbone attention (target-side variants).
    pub aux: Option<(Var, Vec<usize>, usize)>,
}

/// Per-layer nodes from a decoder pass, kept for inspection and coverage.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub logits: Var,
    pub contexts: Vec<Var>,
    pub outputs: Vec<Var>,
    pub cross_attention: Vec<Var>,
    pub gates: Vec<Var>,
}

/// Encoder outputs of one source sentence, detached from any graph.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub src_len: usize,
    pub main: Tensor,
    pub aux: Option<Tensor>,
}

/// Next-token log-probabilities for one prefix, plus the main cross-attention
/// weights of its last position over the source tokens (`</s>` excluded), one
/// vector per decoder layer, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Last-position view of a decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStep {
    /// Context `c_i` of the final decoder layer (gated for target-side fusion).
    pub context: Vec<f64>,
    /// Layer output `o_i` fed to the distribution head.
    pub output: Vec<f64>,
    pub distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    variant: FusionVariant,
    params: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    compressed_encoder: Option<Vec<EncoderLayer>>,
    source_fusion: Option<AttendBlock>,
    decoder: Vec<DecoderLayer>,
    head: OutputHead,
}

fn with_eos(seq: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(seq.len() + 1);
    v.extend_from_slice(seq);
    v.push(EOS);
    v
}

impl Model {
    pub fn new(config: ModelConfig, variant: FusionVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng: ChaCha8Rng = RngState::new(seed).derive("init").rng();
        let mut init = Initializer {
            store: &mut params,
            rng: &mut rng,
        };
        let cfg = &config;
        // one-hot input, so fan-in is 1
        let table = Tensor::uniform(&[cfg.vocab_size, cfg.d_model], 1.0, init.rng);
        let embedding = init.store.add("embedding", table);

        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::init(&mut init, &format!("encoder.{i}"), cfg))
            .collect();
        let compressed_encoder = (variant.uses_compressed() && cfg.independent_encoders).then(|| {
            (0..cfg.enc_layers)
                .map(|i| EncoderLayer::init(&mut init, &format!("cmp_encoder.{i}"), cfg))
                .collect()
        });
        let source_fusion = variant
            .source_side()
            .then(|| AttendBlock::init(&mut init, "source_fusion", cfg));
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadParams::init(&mut init, &format!("{p}.self_attn"), cfg),
                    norm1: NormParams::init(&mut init, &format!("{p}.norm1"), cfg.d_model),
                    cross: AttendBlock::init(&mut init, &format!("{p}.cross"), cfg),
                    backbone: variant
                        .target_side()
                        .then(|| AttendBlock::init(&mut init, &format!("{p}.backbone"), cfg)),
                    gate: variant
                        .target_side()
                        .then(|| GateParams::init(&mut init, &format!("{p}.gate"), cfg)),
                    norm2: NormParams::init(&mut init, &format!("{p}.norm2"), cfg.d_model),
                }
            })
            .collect();
        let head = OutputHead::init(&mut init, cfg);
        Ok(Model {
            config,
            variant,
            params,
            embedding,
            encoder,
            compressed_encoder,
            source_fusion,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> FusionVariant {
        self.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn encoder(&self) -> &[EncoderLayer] {
        &self.encoder
    }

    /// Encoder stack applied to the compressed stream: the main encoder unless
    /// independent encoders were requested.
    pub fn compressed_encoder(&self) -> &[EncoderLayer] {
        self.compressed_encoder.as_deref().unwrap_or(&self.encoder)
    }

    pub fn source_fusion(&self) -> Option<&AttendBlock> {
        self.source_fusion.as_ref()
    }

    pub fn decoder(&self) -> &[DecoderLayer] {
        &self.decoder
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    /// Zeroes the output projection and biases of the source-fusion FFN, which
    /// makes `H_x' == H_x` exactly.
    pub fn zero_source_fusion(&mut self) -> Result<()> {
        let block = self.source_fusion.clone().ok_or(Error::Variant {
            variant: self.variant.to_string(),
            reason: "has no source fusion block",
        })?;
        for id in [block.ffn.w2, block.ffn.b2, block.ffn.b1] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
        Ok(())
    }

    fn check_ids(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::IndexOutOfRange {
                index: id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Encodes sources (and compressed companions when the variant uses them).
    pub fn encode_sources<S: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        src: &[S],
        cmp: Option<&[S]>,
    ) -> Result<Memory> {
        for s in src {
            if s.as_ref().is_empty() {
                return Err(Error::Empty("source sentence"));
            }
            self.check_ids(s.as_ref())?;
        }
        let cfg = &self.config;
        let src_pad = Padded::new(&src.iter().map(|s| with_eos(s.as_ref())).collect::<Vec<_>>())?;
        let hx = encode(g, &self.params, cfg, self.embedding, &self.encoder, &src_pad)?;
        let plain = Memory {
            main: hx,
            main_lens: src_pad.lens.clone(),
            main_width: src_pad.width,
            aux: None,
        };
        if !self.variant.uses_compressed() {
            return Ok(plain);
        }
        let cmp = cmp.ok_or(Error::Variant {
            variant: self.variant.to_string(),
            reason: "requires a compressed stream",
        })?;
        if cmp.len() != src.len() {
            return Err(Error::invalid("compressed stream not aligned with sources"));
        }
        for c in cmp {
            self.check_ids(c.as_ref())?;
        }
        let cmp_pad = Padded::new(&cmp.iter().map(|s| with_eos(s.as_ref())).collect::<Vec<_>>())?;
        let hc = encode(g, &self.params, cfg, self.embedding, self.compressed_encoder(), &cmp_pad)?;
        let fused = match &self.source_fusion {
            Some(block) => {
                let layout = AttnLayout {
                    batch: src.len(),
                    tq: src_pad.width,
                    tk: cmp_pad.width,
                    mask: AttnMask::key_lens(cmp_pad.lens.clone()),
                };
                Some(source_fuse(g, &self.params, cfg, block, hx, hc, &layout)?)
            }
            None => None,
        };
        let mut mem = plain;
        match self.variant {
            FusionVariant::Baseline => {}
            FusionVariant::SourceFusion => mem.main = fused.unwrap(),
            FusionVariant::TargetFusion => {
                mem.aux = Some((hc, cmp_pad.lens.clone(), cmp_pad.width));
            }
            FusionVariant::BothFusion => {
                mem.aux = Some((fused.unwrap(), src_pad.lens.clone(), src_pad.width));
            }
        }
        Ok(mem)
    }

    /// Teacher-forced decoder pass over padded decoder inputs.
    pub fn decode(&self, g: &mut Graph, mem: &Memory, inputs: &Padded) -> Result<DecoderTrace> {
        let cfg = &self.config;
        let batch = inputs.batch();
        let mut y = crate::transformer::embed(g, &self.params, self.embedding, inputs)?;
        y = g.dropout(y, cfg.dropout);
        let self_layout = AttnLayout {
            batch,
            tq: inputs.width,
            tk: inputs.width,
            mask: AttnMask::causal(),
        };
        let cross_layout = AttnLayout {
            batch,
            tq: inputs.width,
            tk: mem.main_width,
            mask: AttnMask::key_lens(mem.main_lens.clone()),
        };
        let aux_layout = mem.aux.as_ref().map(|(_, lens, width)| AttnLayout {
            batch,
            tq: inputs.width,
            tk: *width,
            mask: AttnMask::key_lens(lens.clone()),
        });
        let mut trace = DecoderTrace {
            logits: y,
            contexts: Vec::new(),
            outputs: Vec::new(),
            cross_attention: Vec::new(),
            gates: Vec::new(),
        };
        for layer in &self.decoder {
            let (a, _) = multi_head(g, &self.params, cfg, &layer.self_attn, y, y, &self_layout)?;
            let a = g.dropout(a, cfg.dropout);
            let s = g.add(y, a)?;
            let h_tgt = layer_norm(g, &self.params, &layer.norm1, s)?;
            let (mut c, attn) = attend(g, &self.params, cfg, &layer.cross, h_tgt, mem.main, &cross_layout)?;
            trace.cross_attention.push(attn);
            if let (Some(gate), Some((aux, _, _)), Some(layout)) = (&layer.gate, &mem.aux, &aux_layout) {
                let (b, _) = backbone_context(
                    g,
                    &self.params,
                    cfg,
                    self.variant,
                    layer.backbone.as_ref(),
                    h_tgt,
                    *aux,
                    layout,
                )?;
                let (mixed, gv) = gate_combine(g, &self.params, gate, c, b)?;
                c = mixed;
                trace.gates.push(gv);
            }
            trace.contexts.push(c);
            let c = g.dropout(c, cfg.dropout);
            let o = g.add(h_tgt, c)?;
            y = layer_norm(g, &self.params, &layer.norm2, o)?;
            trace.outputs.push(y);
        }
        trace.logits = output_logits(g, &self.params, &self.head, y)?;
        Ok(trace)
    }

    /// Mean cross-entropy of the batch targets (pad positions excluded).
    pub fn loss(&self, g: &mut Graph, batch: &Batch, smoothing: f64) -> Result<Var> {
        if batch.src.len() != batch.tgt.len() {
            return Err(Error::invalid("sources and targets are not aligned"));
        }
        let mem = self.encode_sources(g, &batch.src, batch.cmp.as_deref())?;
        let mut inputs = Vec::with_capacity(batch.tgt.len());
        let mut targets = Vec::with_capacity(batch.tgt.len());
        for t in &batch.tgt {
            self.check_ids(t)?;
            let mut i = vec![BOS];
            i.extend_from_slice(t);
            inputs.push(i);
            targets.push(with_eos(t));
        }
        let inputs = Padded::new(&inputs)?;
        let targets = Padded::new(&targets)?;
        let trace = self.decode(g, &mem, &inputs)?;
        g.cross_entropy(trace.logits, &targets.ids, PAD, smoothing)
    }

    /// Logits `[len(prefix), vocab]` for a single teacher-forced prefix that
    /// starts with `<s>`.
    pub fn logits(&self, src: &[usize], cmp: Option<&[usize]>, prefix: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let trace = self.single_pass(&mut g, src, cmp, prefix)?;
        Ok(g.value(trace.logits).clone())
    }

    fn single_pass(
        &self,
        g: &mut Graph,
        src: &[usize],
        cmp: Option<&[usize]>,
        prefix: &[usize],
    ) -> Result<DecoderTrace> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::invalid("decoder prefix must start with <s>"));
        }
        self.check_ids(prefix)?;
        let cmp_batch = cmp.map(|c| [c]);
        let mem = self.encode_sources(g, &[src], cmp_batch.as_ref().map(|c| &c[..]))?;
        self.decode(g, &mem, &Padded::new(&[prefix])?)
    }

    /// Context, output and next-token distribution at the last prefix position.
    pub fn decode_step(&self, src: &[usize], cmp: Option<&[usize]>, prefix: &[usize]) -> Result<DecodeStep> {
        if prefix.is_empty() {
            return Err(Error::Empty("decoder prefix"));
        }
        let mut g = Graph::new();
        let trace = self.single_pass(&mut g, src, cmp, prefix)?;
        let last = prefix.len() - 1;
        let context = g.value(*trace.contexts.last().unwrap()).row(last).to_vec();
        let output = g.value(*trace.outputs.last().unwrap()).row(last).to_vec();
        let mut distribution = g.value(trace.logits).row(last).to_vec();
        kernels::softmax_in_place(&mut distribution);
        Ok(DecodeStep {
            context,
            output,
            distribution,
        })
    }

    /// Runs the encoder once for incremental decoding.
    pub fn begin(&self, src: &[usize], cmp: Option<&[usize]>) -> Result<EncodedSource> {
        let mut g = Graph::new();
        let cmp_batch = cmp.map(|c| [c]);
        let mem = self.encode_sources(&mut g, &[src], cmp_batch.as_ref().map(|c| &c[..]))?;
        Ok(EncodedSource {
            src_len: src.len(),
            main: g.value(mem.main).clone(),
            aux: mem.aux.map(|(v, _, _)| g.value(v).clone()),
        })
    }

    /// Scores a group of equal-length prefixes (each starting with `<s>`)
    /// against one encoded source.
    pub fn step(&self, enc: &EncodedSource, prefixes: &[&[usize]]) -> Result<Vec<StepOutput>> {
        let Some(first) = prefixes.first() else {
            return Ok(Vec::new());
        };
        let len = first.len();
        if len == 0 || prefixes.iter().any(|p| p.len() != len || p[0] != BOS) {
            return Err(Error::invalid("step prefixes must share a length and start with <s>"));
        }
        for p in prefixes {
            self.check_ids(p)?;
        }
        let batch = prefixes.len();
        let mut g = Graph::new();
        let tile = |t: &Tensor, g: &mut Graph| -> Result<(Var, usize)> {
            let rows = t.rows();
            let mut data = Vec::with_capacity(t.len() * batch);
            for _ in 0..batch {
                data.extend_from_slice(t.data());
            }
            Ok((g.leaf(Tensor::new(vec![rows * batch, t.cols()], data)?), rows))
        };
        let (main, main_width) = tile(&enc.main, &mut g)?;
        let aux = match &enc.aux {
            Some(t) => {
                let (v, w) = tile(t, &mut g)?;
                Some((v, vec![w; batch], w))
            }
            None => None,
        };
        let mem = Memory {
            main,
            main_lens: vec![main_width; batch],
            main_width,
            aux,
        };
        let trace = self.decode(&mut g, &mem, &Padded::new(prefixes)?)?;
        let logits = g.value(trace.logits);
        let heads = self.config.heads;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = logits.row(b * len + len - 1);
            let lse = kernels::log_sum_exp(row);
            let log_probs = row.iter().map(|x| x - lse).collect();
            let mut attention = Vec::with_capacity(trace.cross_attention.len());
            for &a in &trace.cross_attention {
                let (spec, probs) = g.attention_probs(a).unwrap();
                let mut avg = vec![0.0; enc.src_len];
                for h in 0..heads {
                    let base = ((b * heads + h) * spec.tq + len - 1) * spec.tk;
                    for (j, slot) in avg.iter_mut().enumerate() {
                        *slot += probs[base + j] / heads as f64;
                    }
                }
                attention.push(avg);
            }
            out.push(StepOutput {
                log_probs,
                attention,
            });
        }
        Ok(out)
    }
}

/// Deterministic generator for dropout masks during training.
pub fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(RngState::new(seed).derive(&format!("dropout/{step}")).seed)
}
