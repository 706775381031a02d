//! Checkpoint file layout (little endian):
//!
//! ```text
//! magic "ILTSCKPT" | version u32 | meta_len u32 | meta JSON
//! n_tensors u32 | per tensor: name_len u16, name, dtype u8, ndims u8,
//!                 dims u32×ndims, data
//! crc32 u32 over every preceding byte
//! ```
//!
//! Tensors are the model parameters followed by `adam.m.*` and `adam.v.*`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::{DType, Tensor};

use super::{AdamState, ModelConfig, ModelState, TrainConfig, Transformer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ILTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    examples_seen: u64,
    step: u64,
    adam_t: u64,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DType::F32.tag());
    buf.push(2);
    buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let meta = serde_json::to_vec(&Meta {
        model: state.model.config.clone(),
        train: state.train.clone(),
        examples_seen: state.examples_seen,
        step: state.step,
        adam_t: state.adam.t,
    })
    .map_err(|e| ModelError::CorruptFile(e.to_string()))?;
    let names = state.model.names();
    let mut buf = Vec::with_capacity(12 * state.model.parameter_count() + meta.len() + 1024);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(3 * names.len() as u32).to_le_bytes());
    for (n, t) in names.iter().zip(&state.model.tensors) {
        put_tensor(&mut buf, n, t);
    }
    for (n, t) in names.iter().zip(&state.adam.m) {
        put_tensor(&mut buf, &format!("adam.m.{n}"), t);
    }
    for (n, t) in names.iter().zip(&state.adam.v) {
        put_tensor(&mut buf, &format!("adam.v.{n}"), t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::CorruptFile("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 12 {
        return Err(ModelError::CorruptFile("file too short".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::CorruptFile("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CorruptFile(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
    meta.model.validate()?;
    let n = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::CorruptFile("tensor name is not utf-8".into()))?
            .to_string();
        if DType::from_tag(r.u8()?) != Some(DType::F32) {
            return Err(ModelError::CorruptFile(format!("{name}: unsupported dtype")));
        }
        let ndims = r.u8()? as usize;
        let dims: Vec<usize> = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r, *c),
            _ => return Err(ModelError::CorruptFile(format!("{name}: expected 2 dims"))),
        };
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptFile("trailing bytes".into()));
    }

    let reference = Transformer::<f32>::init(meta.model.clone(), 0)?;
    let mut fetch = |name: String, like: &Tensor<f32>| -> Result<Tensor<f32>, ModelError> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| ModelError::CorruptFile(format!("missing tensor {name}")))?;
        if (t.rows, t.cols) != (like.rows, like.cols) {
            return Err(ModelError::CorruptFile(format!("{name}: shape mismatch")));
        }
        Ok(t)
    };
    let names = reference.names();
    let mut params = Vec::with_capacity(names.len());
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, like) in names.iter().zip(&reference.tensors) {
        params.push(fetch(name.clone(), like)?);
        m.push(fetch(format!("adam.m.{name}"), like)?);
        v.push(fetch(format!("adam.v.{name}"), like)?);
    }
    Ok(ModelState {
        model: Transformer {
            config: meta.model,
            tensors: params,
        },
        adam: AdamState { t: meta.adam_t, m, v },
        train: meta.train,
        examples_seen: meta.examples_seen,
        step: meta.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_library, generate_traces, GenConfig};
    use crate::dynsys::Family;
    use crate::model::{forward, train_step};

    #[test]
    fn round_trip_is_lossless() {
        let dir = std::env::temp_dir().join(format!("ilts-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let mut cfg = TrainConfig::medium();
        cfg.learning_rate = 1e-3;
        let mut state = ModelState::new(ModelConfig::tiny(), 4, cfg).unwrap();
        let lib = build_library(20, 1, 251, Family::Identity, 1);
        let batch: Vec<_> = generate_traces(&lib, &GenConfig::default(), 2, 0, 3)
            .unwrap()
            .iter()
            .map(|t| t.encode())
            .collect();
        train_step(&mut state, &batch).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(back.examples_seen, 3);
        let a = forward(&state.model, &batch, 3);
        let b = forward(&back.model, &batch, 3);
        assert_eq!(a, b);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CorruptFile(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CorruptFile(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
