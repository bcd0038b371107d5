//! Checkpoint archive: both parameter groups, optimizer moments and the
//! estimator baseline, so a run resumes exactly where it stopped.
//!
//! Layout: magic, format version, a TOML header, named `f64` tensors, Adam
//! moments in parameter order, and a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AsrError, Result};
use crate::generative::ModelConfig;
use crate::model::AsrModel;
use crate::nn::Adam;
use crate::tape::Tensor;
use crate::training::Baseline;

const MAGIC: &[u8; 8] = b"ASRCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    seed: u64,
    baseline: Baseline,
    adam: Option<AdamHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    step: u64,
}

/// Everything needed to continue or evaluate a run.
pub struct Checkpoint {
    pub model: AsrModel,
    pub adam: Option<Adam>,
    pub baseline: Baseline,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_vec(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &AsrModel, adam: Option<&Adam>, baseline: &Baseline, epoch: usize, seed: u64) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        epoch,
        seed,
        baseline: baseline.clone(),
        adam: adam.map(|a| AdamHeader { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, clip_norm: a.clip_norm, step: a.step }),
    };
    let text = toml::to_string(&header).map_err(|e| AsrError::Config(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        put_tensor(&mut buf, name, t);
    }
    if let Some(a) = adam {
        let (m, v) = a.moments();
        for (mi, vi) in m.iter().zip(v) {
            put_vec(&mut buf, mi);
            put_vec(&mut buf, vi);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AsrError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| AsrError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AsrError::corrupt("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| AsrError::corrupt("checkpoint", "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AsrError::io(path, e))?;
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(AsrError::corrupt("checkpoint", "not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(AsrError::corrupt("checkpoint", "checksum mismatch (truncated or modified)"));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(AsrError::Config(format!(
            "checkpoint format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let hlen = r.u64()?;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|e| AsrError::corrupt("checkpoint", e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| AsrError::corrupt("checkpoint", e.to_string()))?;
    let mut model = AsrModel::new(header.model.clone(), 0)?;
    let count = r.u64()?;
    if count != model.params.len() {
        return Err(AsrError::corrupt("checkpoint", format!("{count} tensors, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| AsrError::corrupt("checkpoint", e.to_string()))?.to_string();
        let (rows, cols) = (r.u64()?, r.u64()?);
        let data = r.f64s(rows.saturating_mul(cols))?;
        let id = model.params.id(&name).ok_or_else(|| AsrError::corrupt("checkpoint", format!("unknown tensor {name}")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != (rows, cols) {
            return Err(AsrError::corrupt("checkpoint", format!("tensor {name} is {rows}x{cols}, expected {:?}", slot.shape())));
        }
        slot.data = data;
    }
    let adam = match header.adam {
        None => None,
        Some(h) => {
            let mut a = Adam::new(&model.params, h.lr, h.beta1, h.beta2, h.clip_norm);
            a.eps = h.eps;
            a.step = h.step;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (_, _, t) in model.params.iter() {
                let n = r.u64()?;
                if n != t.data.len() {
                    return Err(AsrError::corrupt("checkpoint", "optimizer moment length mismatch"));
                }
                m.push(r.f64s(n)?);
                let n = r.u64()?;
                if n != t.data.len() {
                    return Err(AsrError::corrupt("checkpoint", "optimizer moment length mismatch"));
                }
                v.push(r.f64s(n)?);
            }
            a.set_moments(m, v);
            Some(a)
        }
    };
    if r.pos != body.len() {
        return Err(AsrError::corrupt("checkpoint", "trailing bytes"));
    }
    Ok(Checkpoint { model, adam, baseline: header.baseline, epoch: header.epoch, seed: header.seed })
}
