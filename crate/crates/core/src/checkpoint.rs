//! Binary checkpoint container.
//!
//! ```text
//! magic "ESCCKPT\0" | u32 version
//! u32 len | config as key=value lines (includes the fusion variant)
//! u32 tensor count
//! per tensor: u32 len | name | u32 rank | u64 extents.. | f64 data..
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::transformer::{AttentionScale, ModelConfig};

pub const MAGIC: &[u8; 8] = b"ESCCKPT\0";
pub const VERSION: u32 = 1;

/// Serializes a config and variant as `key=value` lines in a fixed order.
pub fn config_text(cfg: &ModelConfig, variant: FusionVariant) -> String {
    let scale = match cfg.attention_scale {
        AttentionScale::SqrtDk => "sqrt_dk",
        AttentionScale::SqrtDModel => "sqrt_d_model",
    };
    format!(
        "variant={variant}\nd_model={}\nheads={}\nd_k={}\nd_v={}\nffn_dim={}\nenc_layers={}\n\
         dec_layers={}\ndropout={:?}\nvocab_size={}\nattention_scale={scale}\ngate_layers={}\n\
         independent_encoders={}\n",
        cfg.d_model,
        cfg.heads,
        cfg.d_k,
        cfg.d_v,
        cfg.ffn_dim,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.dropout,
        cfg.vocab_size,
        cfg.gate_layers,
        cfg.independent_encoders,
    )
}

/// Splits `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("key=value", format!("line {}: {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::format("checkpoint config", format!("missing {key}")))?;
    raw.parse()
        .map_err(|_| Error::format("checkpoint config", format!("bad {key}={raw}")))
}

pub fn parse_config(text: &str) -> Result<(ModelConfig, FusionVariant)> {
    let kv = parse_kv(text)?;
    let variant: FusionVariant = kv
        .get("variant")
        .ok_or_else(|| Error::format("checkpoint config", "missing variant"))?
        .parse()?;
    let attention_scale = match kv.get("attention_scale").map(String::as_str) {
        Some("sqrt_dk") => AttentionScale::SqrtDk,
        Some("sqrt_d_model") => AttentionScale::SqrtDModel,
        other => return Err(Error::format("checkpoint config", format!("attention_scale {other:?}"))),
    };
    let cfg = ModelConfig {
        d_model: field(&kv, "d_model")?,
        heads: field(&kv, "heads")?,
        d_k: field(&kv, "d_k")?,
        d_v: field(&kv, "d_v")?,
        ffn_dim: field(&kv, "ffn_dim")?,
        enc_layers: field(&kv, "enc_layers")?,
        dec_layers: field(&kv, "dec_layers")?,
        dropout: field(&kv, "dropout")?,
        vocab_size: field(&kv, "vocab_size")?,
        attention_scale,
        gate_layers: field(&kv, "gate_layers")?,
        independent_encoders: field(&kv, "independent_encoders")?,
    };
    cfg.validate()?;
    Ok((cfg, variant))
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text(model.config(), model.variant());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let store = model.params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        let t = store.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "non-UTF-8 text"))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let (cfg, variant) = parse_config(&r.string()?)?;
    let mut model = Model::new(cfg, variant, 0)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::format(
            "checkpoint",
            format!("{count} tensors, model expects {}", model.params().len()),
        ));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {name}")))?;
        if model.params().get(id).shape() != shape.as_slice() {
            return Err(Error::format("checkpoint", format!("tensor {name} has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.params_mut().get_mut(id) = Tensor::new(shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
