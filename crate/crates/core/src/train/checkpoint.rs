//! Binary checkpoint: magic, JSON header, parameter blob, optimizer moments
//! and a SHA-256 trailer over everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::HistoryRow;
use super::TrainError;
use crate::nn::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGKCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub model_params: Vec<u8>,
    pub optimizer: Adam,
    /// Global seed; every per-epoch and per-sample stream is derived from it.
    pub seed: u64,
    pub best_validation_metric: f64,
    pub best_epoch: usize,
    pub config_fingerprint: String,
    pub history: Vec<HistoryRow>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    seed: u64,
    best_validation_metric: f64,
    best_epoch: usize,
    config_fingerprint: String,
    history: Vec<HistoryRow>,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend((bytes.len() as u64).to_le_bytes());
    out.extend(bytes);
}

fn put_moments(out: &mut Vec<u8>, m: &[Vec<f32>]) {
    out.extend((m.len() as u32).to_le_bytes());
    for v in m {
        out.extend((v.len() as u32).to_le_bytes());
        for x in v {
            out.extend(x.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(state: &CheckpointState) -> Vec<u8> {
    let a = &state.optimizer;
    let header = Header {
        epoch: state.epoch,
        seed: state.seed,
        best_validation_metric: state.best_validation_metric,
        best_epoch: state.best_epoch,
        config_fingerprint: state.config_fingerprint.clone(),
        history: state.history.clone(),
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
    };
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_blob(&mut out, &serde_json::to_vec(&header).expect("header serializes"));
    put_blob(&mut out, &state.model_params);
    put_moments(&mut out, &a.m);
    put_moments(&mut out, &a.v);
    let digest = Sha256::digest(&out);
    out.extend(digest.as_slice());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or("truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn blob(&mut self) -> Result<&'a [u8], String> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        self.take(n)
    }
    fn moments(&mut self) -> Result<Vec<Vec<f32>>, String> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = self.u32()?;
            let raw = self.take(n.checked_mul(4).ok_or("overflow")?)?;
            out.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointState, String> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("not a segkit checkpoint".into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err("checksum mismatch, file is corrupt".into());
    }
    let mut r = Reader { buf: body, pos: 8 };
    let header: Header = serde_json::from_slice(r.blob()?).map_err(|e| format!("header: {e}"))?;
    let model_params = r.blob()?.to_vec();
    let m = r.moments()?;
    let v = r.moments()?;
    if r.pos != body.len() {
        return Err("trailing bytes".into());
    }
    Ok(CheckpointState {
        epoch: header.epoch,
        model_params,
        optimizer: Adam {
            lr: header.lr,
            beta1: header.beta1,
            beta2: header.beta2,
            eps: header.eps,
            step: header.step,
            m,
            v,
        },
        seed: header.seed,
        best_validation_metric: header.best_validation_metric,
        best_epoch: header.best_epoch,
        config_fingerprint: header.config_fingerprint,
        history: header.history,
    })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(super::io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(super::io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState, TrainError> {
    let bytes = fs::read(path).map_err(super::io_err(path))?;
    decode_checkpoint(&bytes).map_err(|msg| TrainError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
