//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!   magic "PGRP" | version u16 | header_len u64 | header JSON |
//!   per tensor: name_len u64, name, ndim u64, dims u64…, count u64,
//!   f64 payload | SHA-256 of everything before it.
//!
//! The header fixes the tensor order, so save → load → save is
//! byte-identical. The RNG state is the master seed: every draw in a run
//! derives statelessly from it plus step coordinates.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, Projection, ScaleMode};
use crate::model::{ModelConfig, ModelParams};

use super::optim::{Moments, OptimState};
use super::{PretrainConfig, TrainConfig};

pub const MAGIC: &[u8; 4] = b"PGRP";
pub const VERSION: u16 = 1;

/// Everything needed to resume a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// "pretrain" or "grpo".
    pub kind: String,
    pub model_cfg: ModelConfig,
    pub vocab: String,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Completed optimizer steps of the owning phase.
    pub step: u64,
    /// Master seed; all sampling derives from it statelessly.
    pub seed: u64,
    pub params: ModelParams,
    pub adapters: AdapterSet,
    pub optim: OptimState,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    scale_mode: ScaleMode,
    targets: Vec<Projection>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    model: ModelConfig,
    vocab: String,
    train: TrainConfig,
    pretrain: PretrainConfig,
    step: u64,
    seed: u64,
    optim_step: u64,
    adapters: Option<AdapterHeader>,
    tensors: Vec<TensorMeta>,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    push_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    push_u64(buf, shape.len() as u64);
    for &d in shape {
        push_u64(buf, d as u64);
    }
    push_u64(buf, data.len() as u64);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// (name, shape, data) triples in serialization order.
fn tensor_list(ckpt: &Checkpoint) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, t) in ckpt.params.named() {
        out.push((name, t.shape().to_vec(), t.data().to_vec()));
    }
    for ad in ckpt.adapters.iter() {
        out.push((ad.name_a(), ad.a.shape().to_vec(), ad.a.data().to_vec()));
        out.push((ad.name_b(), ad.b.shape().to_vec(), ad.b.data().to_vec()));
    }
    for (name, moments) in ckpt.optim.entries() {
        out.push((format!("optim.m.{name}"), vec![moments.m.len()], moments.m.clone()));
        out.push((format!("optim.v.{name}"), vec![moments.v.len()], moments.v.clone()));
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors = tensor_list(ckpt);
    let header = Header {
        kind: ckpt.kind.clone(),
        model: ckpt.model_cfg.clone(),
        vocab: ckpt.vocab.clone(),
        train: ckpt.train.clone(),
        pretrain: ckpt.pretrain.clone(),
        step: ckpt.step,
        seed: ckpt.seed,
        optim_step: ckpt.optim.step,
        adapters: ckpt.adapters.iter().next().map(|ad| AdapterHeader {
            rank: ad.rank,
            alpha: ad.alpha,
            scale_mode: ad.scale_mode,
            targets: ckpt
                .adapters
                .iter()
                .filter(|a| a.layer == 0)
                .map(|a| a.target)
                .collect(),
        }),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("encode header: {e}")))?;

    let mut buf = Vec::with_capacity(1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    push_u64(&mut buf, header_json.len() as u64);
    buf.extend_from_slice(&header_json);
    for (name, shape, data) in &tensors {
        push_tensor(&mut buf, name, shape, data);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if buf.len() < MAGIC.len() + 2 + 8 + 32 {
        return Err(Error::Format("truncated checkpoint file".into()));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    if &body[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &body[..4]
        )));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Format("checksum mismatch; file corrupt".into()));
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("decode header: {e}")))?;

    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for meta in &header.tensors {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        if name != meta.name {
            return Err(Error::Format(format!(
                "tensor order mismatch: header says {:?}, payload has {name:?}",
                meta.name
            )));
        }
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        if shape != meta.shape {
            return Err(Error::Format(format!("tensor {name}: shape mismatch")));
        }
        let count = r.u64()? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(Error::Format(format!("tensor {name}: length mismatch")));
        }
        let bytes = r.take(count * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }

    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
    };

    let params = rebuild_params(&header.model, &mut take)?;
    let adapters = match &header.adapters {
        None => AdapterSet::default(),
        Some(ah) => {
            let mut list = Vec::new();
            for layer in 0..header.model.n_layers {
                for &target in &ah.targets {
                    let a = take(&format!("lora.layer{layer}.{}.a", target.name()))?
                        .with_requires_grad(true);
                    let b = take(&format!("lora.layer{layer}.{}.b", target.name()))?
                        .with_requires_grad(true);
                    list.push(LoraAdapter {
                        a,
                        b,
                        rank: ah.rank,
                        alpha: ah.alpha,
                        scale_mode: ah.scale_mode,
                        layer,
                        target,
                    });
                }
            }
            AdapterSet::from_adapters(list)?
        }
    };

    let mut optim = OptimState::new();
    optim.step = header.optim_step;
    for meta in &header.tensors {
        if let Some(param) = meta.name.strip_prefix("optim.m.") {
            let m = take(&format!("optim.m.{param}"))?;
            let v = take(&format!("optim.v.{param}"))?;
            optim.insert(
                param.to_string(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                },
            );
        }
    }

    Ok(Checkpoint {
        kind: header.kind,
        model_cfg: header.model,
        vocab: header.vocab,
        train: header.train,
        pretrain: header.pretrain,
        step: header.step,
        seed: header.seed,
        params,
        adapters,
        optim,
    })
}

fn rebuild_params(
    cfg: &ModelConfig,
    take: &mut impl FnMut(&str) -> Result<Tensor>,
) -> Result<ModelParams> {
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let tok_emb = take("tok_emb")?;
    let pos_emb = take("pos_emb")?;
    for l in 0..cfg.n_layers {
        layers.push(crate::model::LayerParams {
            attn_norm: take(&format!("layer{l}.attn_norm"))?,
            wq: take(&format!("layer{l}.wq"))?,
            wk: take(&format!("layer{l}.wk"))?,
            wv: take(&format!("layer{l}.wv"))?,
            wo: take(&format!("layer{l}.wo"))?,
            mlp_norm: take(&format!("layer{l}.mlp_norm"))?,
            w_up: take(&format!("layer{l}.w_up"))?,
            w_down: take(&format!("layer{l}.w_down"))?,
        });
    }
    let final_norm = take("final_norm")?;
    let lm_head = take("lm_head")?;
    let params = ModelParams {
        cfg: cfg.clone(),
        tok_emb,
        pos_emb,
        layers,
        final_norm,
        lm_head,
    };
    // shape sanity against the config
    for (name, t) in params.named() {
        if t.numel() == 0 {
            return Err(Error::Format(format!("tensor {name} is empty")));
        }
    }
    Ok(params)
}

