//! Encoder-decoder building blocks: embeddings with sinusoidal positions,
//! multi-head attention, position-wise feed-forward layers, post-norm encoder
//! layers, and the two-layer output head `L_o · GeLU(L_w · o)`.
//!
//! Sequences are processed in padded batches. A batch of `B` sequences padded to
//! length `T` is a `[B·T, d_model]` matrix; row `b·T + t` is position `t` of
//! sequence `b`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttnMask, AttnSpec, Graph, Tensor, Var};
use crate::tokenizer::PAD;

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScale {
    /// `sqrt(d_k)`, the base Transformer convention.
    SqrtDk,
    /// `sqrt(d_model)`.
    SqrtDModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub attention_scale: AttentionScale,
    /// Affine layers in the context gate MLP (GeLU between them).
    pub gate_layers: usize,
    /// Separate encoder stack for the compressed stream.
    pub independent_encoders: bool,
}

impl ModelConfig {
    /// Desk-scale default profile.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_k: 16,
            d_v: 16,
            ffn_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.0,
            vocab_size,
            attention_scale: AttentionScale::SqrtDk,
            gate_layers: 1,
            independent_encoders: false,
        }
    }

    /// Same layout as [`ModelConfig::desk`] with explicit width and depth.
    pub fn sized(vocab_size: usize, d_model: usize, heads: usize, ffn_dim: usize, layers: usize) -> Self {
        ModelConfig {
            d_model,
            heads,
            d_k: d_model / heads,
            d_v: d_model / heads,
            ffn_dim,
            enc_layers: layers,
            dec_layers: layers,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("gate_layers", self.gate_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.vocab_size <= crate::tokenizer::UNK {
            return Err(Error::invalid("vocabulary must hold the reserved tokens"));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::SqrtDk => 1.0 / (self.d_k as f64).sqrt(),
            AttentionScale::SqrtDModel => 1.0 / (self.d_model as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter registry. Ids are dense and follow registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Leaf for `id` on `g`; repeated calls share one node.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, &self.tensors[id.0])
    }
}

/// Registers parameters with the shared initialization rule: weights uniform in
/// `±1/sqrt(fan_in)`, biases and norm offsets zero, norm gains one.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Initializer<'_> {
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, len: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(&[len], value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    /// `[d_model, H·d_k]`; head `h` is column block `h`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `[H·d_v, d_model]`.
    pub wo: ParamId,
}

impl MultiHeadParams {
    pub fn init(init: &mut Initializer, prefix: &str, cfg: &ModelConfig) -> Self {
        let (d, h) = (cfg.d_model, cfg.heads);
        MultiHeadParams {
            wq: init.weight(&format!("{prefix}.wq"), d, h * cfg.d_k),
            wk: init.weight(&format!("{prefix}.wk"), d, h * cfg.d_k),
            wv: init.weight(&format!("{prefix}.wv"), d, h * cfg.d_v),
            wo: init.weight(&format!("{prefix}.wo"), h * cfg.d_v, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init(init: &mut Initializer, prefix: &str, cfg: &ModelConfig) -> Self {
        FfnParams {
            w1: init.weight(&format!("{prefix}.w1"), cfg.d_model, cfg.ffn_dim),
            b1: init.constant(&format!("{prefix}.b1"), cfg.ffn_dim, 0.0),
            w2: init.weight(&format!("{prefix}.w2"), cfg.ffn_dim, cfg.d_model),
            b2: init.constant(&format!("{prefix}.b2"), cfg.d_model, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn init(init: &mut Initializer, prefix: &str, d: usize) -> Self {
        NormParams {
            gain: init.constant(&format!("{prefix}.gain"), d, 1.0),
            bias: init.constant(&format!("{prefix}.bias"), d, 0.0),
        }
    }
}

/// `FFN(MultiHead(q, kv, kv))`: the shape shared by cross-attention contexts and
/// both fusion blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendBlock {
    pub attn: MultiHeadParams,
    pub ffn: FfnParams,
}

impl AttendBlock {
    pub fn init(init: &mut Initializer, prefix: &str, cfg: &ModelConfig) -> Self {
        AttendBlock {
            attn: MultiHeadParams::init(init, &format!("{prefix}.attn"), cfg),
            ffn: FfnParams::init(init, &format!("{prefix}.ffn"), cfg),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

impl EncoderLayer {
    pub fn init(init: &mut Initializer, prefix: &str, cfg: &ModelConfig) -> Self {
        EncoderLayer {
            self_attn: MultiHeadParams::init(init, &format!("{prefix}.self_attn"), cfg),
            norm1: NormParams::init(init, &format!("{prefix}.norm1"), cfg.d_model),
            ffn: FfnParams::init(init, &format!("{prefix}.ffn"), cfg),
            norm2: NormParams::init(init, &format!("{prefix}.norm2"), cfg.d_model),
        }
    }
}

/// Batch geometry for one attention call.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub mask: AttnMask,
}

/// Token ids padded into a `[B, T]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Padded {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        let width = *lens.iter().max().unwrap();
        if width == 0 {
            return Err(Error::Empty("sequence"));
        }
        let mut ids = vec![PAD; seqs.len() * width];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * width..b * width + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(Padded { ids, lens, width })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Sinusoidal position table: `PE(p, 2i) = sin(p / 10000^(2i/d))`,
/// `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

/// Word vectors plus position vectors for every row of a padded batch.
pub fn embed(g: &mut Graph, store: &ParamStore, table: ParamId, seqs: &Padded) -> Result<Var> {
    let d = store.get(table).cols();
    let t = store.var(g, table);
    let words = g.embedding(t, &seqs.ids)?;
    let pe = positional_encoding(seqs.width, d);
    let mut tiled = Vec::with_capacity(seqs.ids.len() * d);
    for _ in 0..seqs.batch() {
        tiled.extend_from_slice(pe.data());
    }
    let pe = g.leaf(Tensor::new(vec![seqs.ids.len(), d], tiled)?);
    g.add(words, pe)
}

/// Single-head attention on unbatched `Q`, `K`, `V`; logits are multiplied by
/// `scale`.
pub fn self_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: AttnMask,
    scale: f64,
) -> Result<Var> {
    let (tq, dk) = (g.value(q).rows(), g.value(q).cols());
    let tk = g.value(k).rows();
    if g.value(v).rows() != tk {
        return Err(Error::Shape {
            op: "self_attention",
            lhs: g.value(k).shape().to_vec(),
            rhs: g.value(v).shape().to_vec(),
        });
    }
    let dv = g.value(v).cols();
    let spec = AttnSpec {
        batch: 1,
        tq,
        tk,
        heads: 1,
        dk,
        dv,
        scale,
        mask,
    };
    g.attention(q, k, v, spec)
}

/// `Concat(head_1..head_H) · W^O` with `head_h = Attn(q·W_h^Q, kv·W_h^K, kv·W_h^V)`.
/// Returns the output and the attention node (for its weights).
pub fn multi_head(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    p: &MultiHeadParams,
    q_in: Var,
    kv_in: Var,
    layout: &AttnLayout,
) -> Result<(Var, Var)> {
    if g.value(q_in).cols() != cfg.d_model || g.value(kv_in).cols() != cfg.d_model {
        return Err(Error::Shape {
            op: "multi_head",
            lhs: g.value(q_in).shape().to_vec(),
            rhs: g.value(kv_in).shape().to_vec(),
        });
    }
    let (wq, wk, wv, wo) = (
        store.var(g, p.wq),
        store.var(g, p.wk),
        store.var(g, p.wv),
        store.var(g, p.wo),
    );
    if g.value(wq).cols() != cfg.heads * cfg.d_k || g.value(wo).rows() != cfg.heads * cfg.d_v {
        return Err(Error::invalid("projection extents disagree with head count"));
    }
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let spec = AttnSpec {
        batch: layout.batch,
        tq: layout.tq,
        tk: layout.tk,
        heads: cfg.heads,
        dk: cfg.d_k,
        dv: cfg.d_v,
        scale: cfg.scale(),
        mask: layout.mask.clone(),
    };
    let attn = g.attention(q, k, v, spec)?;
    let out = g.matmul(attn, wo)?;
    Ok((out, attn))
}

/// Position-wise `GeLU(x·W1 + b1)·W2 + b2`.
pub fn ffn(g: &mut Graph, store: &ParamStore, p: &FfnParams, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        store.var(g, p.w1),
        store.var(g, p.b1),
        store.var(g, p.w2),
        store.var(g, p.b2),
    );
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    g.add_bias(o, b2)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, p: &NormParams, x: Var) -> Result<Var> {
    let (gain, bias) = (store.var(g, p.gain), store.var(g, p.bias));
    g.layer_norm(x, gain, bias)
}

/// `FFN(MultiHead(q, kv, kv))`; also returns the attention node.
pub fn attend(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    block: &AttendBlock,
    q: Var,
    kv: Var,
    layout: &AttnLayout,
) -> Result<(Var, Var)> {
    let (a, attn) = multi_head(g, store, cfg, &block.attn, q, kv, layout)?;
    Ok((ffn(g, store, &block.ffn, a)?, attn))
}

/// Post-norm encoder layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
pub fn encoder_layer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    layer: &EncoderLayer,
    x: Var,
    layout: &AttnLayout,
) -> Result<Var> {
    let (a, _) = multi_head(g, store, cfg, &layer.self_attn, x, x, layout)?;
    let a = g.dropout(a, cfg.dropout);
    let x = g.add(x, a)?;
    let x = layer_norm(g, store, &layer.norm1, x)?;
    let f = ffn(g, store, &layer.ffn, x)?;
    let f = g.dropout(f, cfg.dropout);
    let x = g.add(x, f)?;
    layer_norm(g, store, &layer.norm2, x)
}

/// Embeds and encodes a padded batch, yielding `H` as `[B·T, d_model]`.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    table: ParamId,
    layers: &[EncoderLayer],
    seqs: &Padded,
) -> Result<Var> {
    let mut x = embed(g, store, table, seqs)?;
    x = g.dropout(x, cfg.dropout);
    let layout = AttnLayout {
        batch: seqs.batch(),
        tq: seqs.width,
        tk: seqs.width,
        mask: AttnMask::key_lens(seqs.lens.clone()),
    };
    for layer in layers {
        x = encoder_layer(g, store, cfg, layer, x, &layout)?;
    }
    Ok(x)
}

/// Output projections of the distribution head.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    /// `L_w`, `[d_model, d_model]`.
    pub hidden: ParamId,
    /// `L_o`, `[d_model, vocab]`.
    pub out: ParamId,
}

impl OutputHead {
    pub fn init(init: &mut Initializer, cfg: &ModelConfig) -> Self {
        OutputHead {
            hidden: init.weight("output.l_w", cfg.d_model, cfg.d_model),
            out: init.weight("output.l_o", cfg.d_model, cfg.vocab_size),
        }
    }
}

/// Unnormalized scores `L_o · GeLU(L_w · o)` for every row of `o`.
pub fn output_logits(g: &mut Graph, store: &ParamStore, head: &OutputHead, o: Var) -> Result<Var> {
    let lw = store.var(g, head.hidden);
    let lo = store.var(g, head.out);
    let h = g.matmul(o, lw)?;
    let h = g.gelu(h);
    g.matmul(h, lo)
}
