//! Backbone fusion: injecting the encoded compressed sentence `H_c` into the
//! translation model.
//!
//! * source-side fusion: `H_x' = H_x + FFN(MultiHead(H_x, H_c, H_c))`, and the
//!   decoder reads `H_x'` instead of `H_x`;
//! * target-side fusion: each decoder layer adds a second context
//!   `b = FFN(MultiHead(H_tgt, H_c, H_c))` and mixes it with the ordinary context
//!   `c` through an elementwise gate;
//! * both-side fusion: as target-side, but `b` attends to `H_x'`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::transformer::{attend, AttendBlock, AttnLayout, Initializer, ModelConfig, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionVariant {
    Baseline,
    SourceFusion,
    TargetFusion,
    BothFusion,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Baseline,
        FusionVariant::SourceFusion,
        FusionVariant::TargetFusion,
        FusionVariant::BothFusion,
    ];

    pub fn uses_compressed(self) -> bool {
        self != FusionVariant::Baseline
    }

    pub fn source_side(self) -> bool {
        matches!(self, FusionVariant::SourceFusion | FusionVariant::BothFusion)
    }

    pub fn target_side(self) -> bool {
        matches!(self, FusionVariant::TargetFusion | FusionVariant::BothFusion)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Baseline => "baseline",
            FusionVariant::SourceFusion => "bsf",
            FusionVariant::TargetFusion => "btf",
            FusionVariant::BothFusion => "bbf",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "transformer" => Ok(FusionVariant::Baseline),
            "bsf" | "bsfnmt" => Ok(FusionVariant::SourceFusion),
            "btf" | "btfnmt" => Ok(FusionVariant::TargetFusion),
            "bbf" | "bbfnmt" => Ok(FusionVariant::BothFusion),
            other => Err(Error::invalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// Context gate `σ(MLP([c; b]))`. The MLP maps `2d → d`; with more than one
/// layer the hidden layers keep width `2d` and use GeLU.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl GateParams {
    pub fn init(init: &mut Initializer, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.gate_layers)
            .map(|i| {
                let out = if i + 1 == cfg.gate_layers { d } else { 2 * d };
                (
                    init.weight(&format!("{prefix}.{i}.w"), 2 * d, out),
                    init.constant(&format!("{prefix}.{i}.b"), out, 0.0),
                )
            })
            .collect();
        GateParams { layers }
    }
}

/// `H_x + FFN(MultiHead(H_x, H_c, H_c))`.
pub fn source_fuse(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    block: &AttendBlock,
    hx: Var,
    hc: Var,
    layout: &AttnLayout,
) -> Result<Var> {
    let (hxc, _) = attend(g, store, cfg, block, hx, hc, layout)?;
    g.add(hx, hxc)
}

/// `FFN(MultiHead(H_tgt, H_aux, H_aux))`, where `H_aux` is `H_c` for
/// target-side fusion and `H_x'` for both-side fusion. Returns the context and
/// its attention node.
#[allow(clippy::too_many_arguments)]
pub fn backbone_context(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    variant: FusionVariant,
    block: Option<&AttendBlock>,
    h_tgt: Var,
    h_aux: Var,
    layout: &AttnLayout,
) -> Result<(Var, Var)> {
    let block = block.filter(|_| variant.target_side()).ok_or(Error::Variant {
        variant: variant.to_string(),
        reason: "has no backbone attention block",
    })?;
    attend(g, store, cfg, block, h_tgt, h_aux, layout)
}

/// `c' = g ⊗ c + (1 - g) ⊗ b` with `g = σ(MLP([c; b]))`. Returns `(c', g)`.
pub fn gate_combine(
    g: &mut Graph,
    store: &ParamStore,
    gate: &GateParams,
    c: Var,
    b: Var,
) -> Result<(Var, Var)> {
    if g.value(c).shape() != g.value(b).shape() {
        return Err(Error::Shape {
            op: "gate_combine",
            lhs: g.value(c).shape().to_vec(),
            rhs: g.value(b).shape().to_vec(),
        });
    }
    let mut h = g.concat_cols(c, b)?;
    for (i, &(w, bias)) in gate.layers.iter().enumerate() {
        if i > 0 {
            h = g.gelu(h);
        }
        let (w, bias) = (store.var(g, w), store.var(g, bias));
        h = g.matmul(h, w)?;
        h = g.add_bias(h, bias)?;
    }
    let gv = g.sigmoid(h);
    // b + g ⊗ (c - b)
    let diff = g.sub(c, b)?;
    let scaled = g.mul(gv, diff)?;
    let mixed = g.add(b, scaled)?;
    Ok((mixed, gv))
}
