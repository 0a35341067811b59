//! Binary checkpoint: `"PLAB"`, u32 version, u64 config length, JSON config,
//! little-endian f64 tensors in declaration order, u64 FNV-1a of the tensor bytes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, TransformerWeights};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"PLAB";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode(model: &Model) -> Result<Vec<u8>, ModelError> {
    let json = serde_json::to_vec(&model.config).map_err(|e| ModelError::Format(e.to_string()))?;
    let mut payload = Vec::with_capacity(model.weights.param_count() * 8);
    for t in model.weights.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], ModelError> {
    if bytes.len() < *at + n {
        return Err(ModelError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated")));
    }
    let s = &bytes[*at..*at + n];
    *at += n;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(ModelError::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(ModelError::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap()) as usize;
    let config: ModelConfig =
        serde_json::from_slice(take(bytes, &mut at, json_len)?).map_err(|e| ModelError::Format(e.to_string()))?;
    config.validate()?;
    let shapes = TransformerWeights::expected_shapes(&config);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let payload = take(bytes, &mut at, total * 8)?;
    let checksum = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
    if at != bytes.len() {
        return Err(ModelError::Format("trailing bytes after checksum".into()));
    }
    if fnv1a64(payload) != checksum {
        return Err(ModelError::Format("checksum mismatch".into()));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n = shape.iter().product();
        tensors.push(Tensor::new(shape, values.by_ref().take(n).collect())?);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("shape list matches");
    let embedding = next();
    let pos_embedding = (config.pos_scheme == super::PosScheme::Learned).then(&mut next);
    let blocks = (0..config.n_layers)
        .map(|_| super::Block {
            attn_norm: next(),
            w_qkv: next(),
            w_o: next(),
            ffn_norm: next(),
            w_up: next(),
            w_down: next(),
        })
        .collect();
    let final_norm = next();
    let head = (!config.tie_embeddings).then(&mut next);
    let weights = TransformerWeights { embedding, pos_embedding, blocks, final_norm, head };
    Ok(Model { config, weights })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    decode(&fs::read(path)?)
}
