//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PRUNECKP"
//! version    u32
//! name       u32 length + UTF-8 bytes
//! model ver  u32
//! seed       u64
//! input      3 × u32  (C, H, W)
//! classes    u32
//! layers     u32 count, then per layer: u32 length + record bytes
//! params     u32 count, then per parameter:
//!              name (u32 length + UTF-8), u32 ndim, ndim × u32 dims,
//!              u64 value count, value count × f64
//! ```
//!
//! A JSON sidecar (`<path>.json`) mirrors the metadata and layer table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ConvSpec, LayerSpec, ModelGraph, ModelMeta, ResidualSpec};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRUNECKP";
pub const FORMAT_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_POOL: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_FC: u8 = 4;
const TAG_RESIDUAL: u8 = 5;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    meta: &'a ModelMeta,
    input_shape: [usize; 3],
    num_classes: usize,
    num_params: usize,
    layers: &'a [LayerSpec],
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        meta: &model.meta,
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        num_params: model.num_params(),
        layers: model.layers(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    decode(&fs::read(path)?)
}

pub fn encode(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &model.meta.name);
    put_u32(&mut out, model.meta.version);
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    for d in model.input_shape() {
        put_u32(&mut out, d as u32);
    }
    put_u32(&mut out, model.num_classes() as u32);

    put_u32(&mut out, model.layers().len() as u32);
    for layer in model.layers() {
        let record = encode_layer(layer);
        put_u32(&mut out, record.len() as u32);
        out.extend_from_slice(&record);
    }

    put_u32(&mut out, model.params().len() as u32);
    for p in model.params().iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.ndim() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        out.extend_from_slice(&(p.value.numel() as u64).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let name = r.string("model name")?;
    let model_version = r.u32("model version")?;
    let seed = r.u64("seed")?;
    let input_shape = [r.u32("input shape")? as usize, r.u32("input shape")? as usize, r.u32("input shape")? as usize];
    let num_classes = r.u32("class count")? as usize;

    let n_layers = r.u32("layer count")?;
    let mut layers = Vec::new();
    for i in 0..n_layers {
        let len = r.u32("layer record length")? as usize;
        let record = r.take(len, "layer record")?;
        let mut lr = Reader { buf: record, pos: 0 };
        let layer = decode_layer(&mut lr)?;
        if lr.pos != record.len() {
            return Err(Error::Integrity(format!("layer record {i} has trailing bytes")));
        }
        layers.push(layer);
    }

    let n_params = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let pname = r.string("parameter name")?;
        let ndim = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("parameter shape")? as usize);
        }
        let count = r.u64("value count")? as usize;
        let declared: usize = shape.iter().product();
        if declared != count {
            return Err(Error::Integrity(format!(
                "parameter {pname} declares shape {shape:?} ({declared} values) but stores {count}"
            )));
        }
        let raw = r.take(
            count.checked_mul(8).ok_or_else(|| Error::Integrity("value count overflow".into()))?,
            "parameter values",
        )?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        if params.id_of(&pname).is_some() {
            return Err(Error::Integrity(format!("duplicate parameter {pname}")));
        }
        params.insert(pname, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let meta = ModelMeta { name, version: model_version, seed };
    ModelGraph::new(meta, input_shape, num_classes, layers, params).map_err(|e| match e {
        Error::Shape(msg) => Error::Integrity(format!("layer table inconsistent with weights: {msg}")),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_conv(out: &mut Vec<u8>, c: &ConvSpec) {
    for v in [c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.pad] {
        put_u32(out, v as u32);
    }
    out.push(u8::from(c.prunable));
}

fn encode_layer(layer: &LayerSpec) -> Vec<u8> {
    let mut out = Vec::new();
    match layer {
        LayerSpec::Conv(c) => {
            out.push(TAG_CONV);
            put_conv(&mut out, c);
        }
        LayerSpec::Pool { kh, kw } => {
            out.push(TAG_POOL);
            put_u32(&mut out, *kh as u32);
            put_u32(&mut out, *kw as u32);
        }
        LayerSpec::Relu => out.push(TAG_RELU),
        LayerSpec::Flatten => out.push(TAG_FLATTEN),
        LayerSpec::Fc { in_dim, out_dim } => {
            out.push(TAG_FC);
            put_u32(&mut out, *in_dim as u32);
            put_u32(&mut out, *out_dim as u32);
        }
        LayerSpec::Residual(r) => {
            out.push(TAG_RESIDUAL);
            put_conv(&mut out, &r.conv1);
            put_conv(&mut out, &r.conv2);
            put_u32(&mut out, r.skip.len() as u32);
            for s in &r.skip {
                let v: i64 = s.map_or(-1, |c| c as i64);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_conv(r: &mut Reader) -> Result<ConvSpec> {
    let mut v = [0usize; 6];
    for slot in &mut v {
        *slot = r.u32("conv spec")? as usize;
    }
    let prunable = match r.u8("conv spec")? {
        0 => false,
        1 => true,
        other => return Err(Error::Integrity(format!("bad prunable flag {other}"))),
    };
    Ok(ConvSpec {
        in_channels: v[0],
        out_channels: v[1],
        kernel_h: v[2],
        kernel_w: v[3],
        stride: v[4],
        pad: v[5],
        prunable,
    })
}

fn decode_layer(r: &mut Reader) -> Result<LayerSpec> {
    Ok(match r.u8("layer tag")? {
        TAG_CONV => LayerSpec::Conv(decode_conv(r)?),
        TAG_POOL => LayerSpec::Pool { kh: r.u32("pool")? as usize, kw: r.u32("pool")? as usize },
        TAG_RELU => LayerSpec::Relu,
        TAG_FLATTEN => LayerSpec::Flatten,
        TAG_FC => LayerSpec::Fc { in_dim: r.u32("fc")? as usize, out_dim: r.u32("fc")? as usize },
        TAG_RESIDUAL => {
            let conv1 = decode_conv(r)?;
            let conv2 = decode_conv(r)?;
            let n = r.u32("skip length")? as usize;
            let mut skip = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let v = r.i64("skip entry")?;
                skip.push(if v < 0 { None } else { Some(v as usize) });
            }
            LayerSpec::Residual(ResidualSpec { conv1, conv2, skip })
        }
        other => return Err(Error::Integrity(format!("unknown layer tag {other}"))),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Integrity(format!("{what} is not UTF-8")))
    }
}
