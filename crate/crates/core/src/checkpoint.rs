//! Model checkpoints: config, step, seed, named tensors and optimizer state.
//!
//! Layout: magic, version, config hash, step, seed, model mode, trainable
//! group flags, config JSON, tensors, optional optimizer moments, then a
//! checksum over everything before it. Loading recomputes the hash of the
//! embedded config and, if the caller supplies one, compares it against the
//! expected config.

use std::path::Path;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Group, Model, ModelConfig, ModelMode};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RLCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub step: u64,
    pub seed: u64,
    pub trainable: [bool; 6],
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, seed: u64, optimizer: Option<&Optimizer>) -> Self {
        Self {
            config: model.config().clone(),
            mode: model.mode(),
            step,
            seed,
            trainable: Group::ALL.map(|g| model.is_trainable(g)),
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::from_named(&self.config, self.mode, self.tensors.clone())?;
        for (g, t) in Group::ALL.iter().zip(self.trainable) {
            m.set_group_trainable(*g, t);
        }
        Ok(m)
    }

    pub fn config_hash(&self) -> u64 {
        self.config.hash()
    }
}

fn f64_bits(w: &mut ByteWriter, x: f64) {
    w.u64(x.to_bits());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(ck.config_hash());
    w.u64(ck.step);
    w.u64(ck.seed);
    w.u8(match ck.mode {
        ModelMode::Off => 0,
        ModelMode::On => 1,
    });
    for t in ck.trainable {
        w.u8(u8::from(t));
    }
    w.str(&serde_json::to_string(&ck.config).expect("config serializes"));
    w.u32(ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        w.str(name);
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u32(d as u32);
        }
        w.f32s(&t.data);
    }
    match &ck.optimizer {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            w.u8(match o.kind {
                OptimizerKind::Radam => 0,
                OptimizerKind::Adamw => 1,
            });
            for x in [o.beta1, o.beta2, o.eps, o.weight_decay] {
                f64_bits(&mut w, x);
            }
            w.u64(o.t);
            w.u32(o.m.len() as u32);
            for (m, v) in o.m.iter().zip(&o.v) {
                w.u32(m.len() as u32);
                w.f32s(m);
                w.f32s(v);
            }
        }
    }
    let sum = codec::checksum64(&w.buf);
    w.u64(sum);
    w.buf
}

/// Decodes a checkpoint; with `expected`, a differing config is a hash-mismatch error.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC, "checkpoint")?;
    r.expect_version(VERSION, "checkpoint")?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if codec::checksum64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Checksum("checkpoint"));
    }
    let mut r = ByteReader::new(&body[8..]);
    let stored_hash = r.u64()?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let mode = match r.u8()? {
        0 => ModelMode::Off,
        1 => ModelMode::On,
        m => return Err(Error::Config(format!("unknown model mode {m}"))),
    };
    let mut trainable = [true; 6];
    for t in &mut trainable {
        *t = r.u8()? != 0;
    }
    let config: ModelConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    if config.hash() != stored_hash {
        return Err(Error::ConfigHash {
            checkpoint: stored_hash,
            expected: config.hash(),
        });
    }
    if let Some(exp) = expected {
        if exp.hash() != stored_hash {
            return Err(Error::ConfigHash {
                checkpoint: stored_hash,
                expected: exp.hash(),
            });
        }
    }
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        tensors.push((name, Tensor::new(shape, data)));
    }
    let optimizer = match r.u8()? {
        0 => None,
        _ => {
            let kind = match r.u8()? {
                0 => OptimizerKind::Radam,
                _ => OptimizerKind::Adamw,
            };
            let mut f = [0.0; 4];
            for x in &mut f {
                *x = f64::from_bits(r.u64()?);
            }
            let t = r.u64()?;
            let slots = r.u32()? as usize;
            let mut o = Optimizer::new(kind, slots, f[3]);
            (o.beta1, o.beta2, o.eps, o.t) = (f[0], f[1], f[2], t);
            for i in 0..slots {
                let len = r.u32()? as usize;
                o.m[i] = r.f32s(len)?;
                o.v[i] = r.f32s(len)?;
            }
            Some(o)
        }
    };
    if r.remaining() != 0 {
        return Err(Error::Shape(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    Ok(Checkpoint {
        config,
        mode,
        step,
        seed,
        trainable,
        tensors,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    codec::write_atomic(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    decode_checkpoint(&codec::read_file(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, FreezePolicy};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            seq_len: 8,
            chunk_len: 4,
            k_neighbors: 2,
            cca_layers: vec![2],
            d_emb: 8,
            neighbor_encoder_layers: 1,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut m = build_model(&cfg(), ModelMode::On).unwrap();
        m.set_freeze_policy(FreezePolicy::FreezeBackboneTrainCca);
        let mut o = Optimizer::new(OptimizerKind::Adamw, m.params().len(), 0.01);
        o.begin_step();
        let mut p = vec![1.0f32; 3];
        o.update(2, &mut p, &[0.1, 0.2, 0.3], 1e-3);
        let ck = Checkpoint::from_model(&m, 17, 99, Some(&o));
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes, Some(&cfg())).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        assert!(!m2.is_trainable(Group::Attention) && m2.is_trainable(Group::Cca));
        for (a, b) in m.params().iter().zip(m2.params()) {
            assert_eq!(a.tensor, b.tensor);
        }
        assert_eq!(encode_checkpoint(&Checkpoint::from_model(&m2, 17, 99, Some(&o))), bytes);
    }

    #[test]
    fn config_hash_mismatch_is_reported() {
        let m = build_model(&cfg(), ModelMode::Off).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_model(&m, 0, 0, None));
        let mut other = cfg();
        other.d_ff = 32;
        let e = decode_checkpoint(&bytes, Some(&other)).unwrap_err();
        assert_eq!(e.code(), "E_CONFIG_HASH");
    }

    #[test]
    fn corruption_is_detected() {
        let m = build_model(&cfg(), ModelMode::Off).unwrap();
        let mut bytes = encode_checkpoint(&Checkpoint::from_model(&m, 0, 0, None));
        let i = bytes.len() / 2;
        bytes[i] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::Checksum(_))));
    }
}
