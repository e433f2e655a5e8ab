//! Model checkpoints: a versioned binary container holding a magic string,
//! the serialized config, and a named tensor table with shapes and
//! little-endian 64-bit floats. Round-trips are bit-exact.

use crate::bytes::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters, Variant};
use crate::numerics::{Scalar, Tensor};
use crate::rng::SplitMix64;
use std::collections::BTreeMap;
use std::path::Path;

const MODEL_MAGIC: &[u8; 8] = b"LSTNMTCK";
const MODEL_VERSION: u32 = 1;

pub(crate) fn put_config(out: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.d,
        cfg.heads,
        cfg.n_layers_enc,
        cfg.n_layers_dec,
        cfg.ffn_dim,
        cfg.combine_dim,
        cfg.vocab_src,
        cfg.vocab_tgt,
        cfg.k,
        cfg.max_positions,
    ] {
        bytes::put_u64(out, v as u64);
    }
    for id in [cfg.sep_id, cfg.pad_id, cfg.bos_id, cfg.eos_id] {
        bytes::put_u32(out, id);
    }
    bytes::put_u8(out, matches!(cfg.variant, Variant::Lst) as u8);
    bytes::put_u8(out, cfg.tie_output as u8);
    bytes::put_f64(out, cfg.dropout);
}

pub(crate) fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut sizes = [0usize; 10];
    for s in &mut sizes {
        *s = r.u64()? as usize;
    }
    let [d, heads, n_layers_enc, n_layers_dec, ffn_dim, combine_dim, vocab_src, vocab_tgt, k, max_positions] =
        sizes;
    let sep_id = r.u32()?;
    let pad_id = r.u32()?;
    let bos_id = r.u32()?;
    let eos_id = r.u32()?;
    let variant = if r.u8()? == 1 {
        Variant::Lst
    } else {
        Variant::Baseline
    };
    let tie_output = r.u8()? == 1;
    let dropout = r.f64()?;
    Ok(ModelConfig {
        d,
        heads,
        n_layers_enc,
        n_layers_dec,
        ffn_dim,
        combine_dim,
        vocab_src,
        vocab_tgt,
        k,
        sep_id,
        pad_id,
        bos_id,
        eos_id,
        variant,
        dropout,
        max_positions,
        tie_output,
    })
}

pub(crate) fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    bytes::put_string(out, name);
    bytes::put_u8(out, t.shape().len() as u8);
    for &dim in t.shape() {
        bytes::put_u64(out, dim as u64);
    }
    for &v in t.data() {
        bytes::put_f64(out, v.to_f64_exact());
    }
}

pub(crate) fn read_tensor<S: Scalar>(r: &mut Reader) -> Result<(String, Tensor<S>)> {
    let name = r.string()?;
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(S::from_f64_exact(r.f64()?));
    }
    Ok((name.clone(), Tensor::new(shape, data).map_err(|_| {
        Error::Checkpoint(format!("tensor {name}: inconsistent shape"))
    })?))
}

pub fn model_to_bytes<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    bytes::put_u32(&mut out, MODEL_VERSION);
    put_config(&mut out, &model.cfg);
    let mut count = 0u32;
    model.params.for_each(&mut |_, _| count += 1);
    bytes::put_u32(&mut out, count);
    model.params.for_each(&mut |name, t| {
        put_tensor(&mut out, &name, t);
    });
    out
}

pub fn model_from_bytes<S: Scalar>(buf: &[u8]) -> Result<Model<S>> {
    let mut r = Reader::new(buf, "checkpoint");
    if r.bytes(8)? != MODEL_MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = read_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut table: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;

    // Shape the parameter structure from the config, then fill every tensor
    // from the table by name.
    let mut params: Parameters<S> = Parameters::init(&cfg, &mut SplitMix64::new(0));
    let mut missing: Vec<String> = Vec::new();
    params.for_each_mut(&mut |name, t| match table.remove(&name) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} != expected {:?}",
            loaded.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Model::from_parts(cfg, params)
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    model_from_bytes(&buf)
}
