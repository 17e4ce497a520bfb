//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SRPM" | u32 version | u32 meta_len | meta JSON
//! u32 n_tensors | { u32 name_len | name | u32 ndim | u64 dims[] | f64 data[] }*
//! u8 has_opt | [ u64 step | u32 n | { u64 len | f64 m[] | f64 v[] }* ]
//! ```
//!
//! The meta JSON holds the model config, the vocabulary token list, and an
//! arbitrary run-config snapshot. Tensor data round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::train::AdamWState;

pub const MAGIC: [u8; 4] = *b"SRPM";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<AdamWState>,
    /// Optimizer step counter at save time.
    pub step: u64,
    /// Run-config snapshot, stored verbatim.
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
    extra: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    write_u32(&mut w, VERSION)?;

    let meta = Meta {
        model: ckpt.model.config.clone(),
        vocab: ckpt.model.vocab.tokens().to_vec(),
        extra: ckpt.extra.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    write_u32(&mut w, meta_bytes.len() as u32)?;
    w.write_all(&meta_bytes)?;

    let tensors = ckpt.model.named_tensors();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in &tensors {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        write_f64s(&mut w, &t.data)?;
    }

    match &ckpt.optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            write_u64(&mut w, ckpt.step)?;
            write_u32(&mut w, opt.m.len() as u32)?;
            for (m, v) in opt.m.iter().zip(&opt.v) {
                write_u64(&mut w, m.len() as u64)?;
                write_f64s(&mut w, m)?;
                write_f64s(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for magic bytes"))?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }

    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes).map_err(|e| bad(e.to_string()))?;

    let vocab = Vocabulary::from_tokens(meta.vocab).map_err(|e| bad(e.to_string()))?;
    let mut model =
        ModelState::init(meta.model, vocab, 0).map_err(|e| bad(format!("config: {e}")))?;

    let n_tensors = read_u32(&mut r)? as usize;
    let mut named = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|e| bad(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64s(&mut r, numel)?;
        named.insert(name, (shape, data));
    }

    let mut missing = Vec::new();
    for (name, tensor) in model.named_tensors_mut() {
        match named.remove(&name) {
            Some((shape, data)) => {
                if shape != tensor.shape {
                    return Err(bad(format!(
                        "tensor {name}: stored shape {shape:?} vs model {:?}",
                        tensor.shape
                    )));
                }
                tensor.data = data;
            }
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(bad(format!("missing tensors: {missing:?}")));
    }
    if !named.is_empty() {
        let extra: Vec<&String> = named.keys().collect();
        return Err(bad(format!("unknown tensors in file: {extra:?}")));
    }

    let mut has_opt = [0u8];
    r.read_exact(&mut has_opt)?;
    let (optimizer, step) = if has_opt[0] == 1 {
        let step = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            m.push(read_f64s(&mut r, len)?);
            v.push(read_f64s(&mut r, len)?);
        }
        (Some(AdamWState { step, m, v }), step)
    } else {
        (None, 0)
    };

    Ok(Checkpoint {
        model,
        optimizer,
        step,
        extra: meta.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_corpus, SyntheticSpec};
    use crate::model::{generate, ModelConfig};

    fn demo_checkpoint() -> (Checkpoint, Vec<crate::data::Example>) {
        let corpus = generate_corpus(&SyntheticSpec {
            n_examples: 4,
            seed: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus);
        let model = ModelState::init(ModelConfig::default(), vocab, 8).unwrap();
        let opt = AdamWState::init(&model);
        (
            Checkpoint {
                model,
                optimizer: Some(opt),
                step: 17,
                extra: serde_json::json!({"note": "demo"}),
            },
            corpus,
        )
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join("serpent-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.srpm");
        let (ckpt, corpus) = demo_checkpoint();
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.extra["note"], "demo");
        assert_eq!(loaded.model.config, ckpt.model.config);
        for ((na, ta), (nb, tb)) in ckpt
            .model
            .named_tensors()
            .into_iter()
            .zip(loaded.model.named_tensors())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }

        // reload reproduces generation bit-exactly
        let a = generate(&ckpt.model, &corpus[0].image, 2, 10).unwrap();
        let b = generate(&loaded.model, &corpus[0].image, 2, 10).unwrap();
        assert_eq!(a.ids.ids(), b.ids.ids());
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join("serpent-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.srpm");
        let (ckpt, _) = demo_checkpoint();
        save(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("serpent-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("short.srpm");
        let (ckpt, _) = demo_checkpoint();
        save(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
