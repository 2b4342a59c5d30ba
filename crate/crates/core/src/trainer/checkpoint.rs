//! Binary checkpoint. Little-endian layout:
//!
//! ```text
//! "OANCK1" | u32 version
//! u64 len | config JSON
//! u64 epoch
//! params(model) | params(teacher) | f64 tau
//! f64 momentum | tensor(keys)
//! u32 n | n x (u64 epoch, 7 x f64)     history
//! u32 n | n x u32 seen | u32 n | n x u32 unseen
//! ```
//!
//! `params` is `u32 count` then per tensor `u32 name_len, name, tensor`;
//! `tensor` is `u64 rows, u64 cols, rows*cols x f64`.

use std::path::Path;

use super::{EpochMetrics, TrainConfig, TrainState};
use crate::dataset::{ByteReader, SeenUnseenSplit};
use crate::diffcore::Tensor;
use crate::error::{OanError, Result};
use crate::memory::OntologyDictionary;
use crate::model::{OanModel, TeacherModel};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"OANCK1";
const VERSION: u32 = 1;

/// A training state together with the config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f64>) {
    put_u64(out, t.rows() as u64);
    put_u64(out, t.cols() as u64);
    for &v in t.data() {
        put_f64(out, v);
    }
}

fn put_params(out: &mut Vec<u8>, params: &[(&str, &Tensor<f64>)]) {
    put_u32(out, params.len());
    for (name, t) in params {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_tensor(out, t);
    }
}

fn get_tensor(r: &mut ByteReader) -> Result<Tensor<f64>> {
    let at = r.offset();
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let n = rows.checked_mul(cols).filter(|n| n.saturating_mul(8) <= r.remaining()).ok_or_else(|| OanError::Format {
        offset: at,
        message: format!("tensor {rows}x{cols} exceeds remaining bytes"),
    })?;
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Tensor::new(rows, cols, data)
}

fn get_params(r: &mut ByteReader, expected: &[&str]) -> Result<Vec<Tensor<f64>>> {
    let at = r.offset();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(OanError::Format {
            offset: at,
            message: format!("expected {} parameter tensors, found {n}", expected.len()),
        });
    }
    let mut out = Vec::with_capacity(n);
    for want in expected {
        let at = r.offset();
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != want.as_bytes() {
            return Err(OanError::Format {
                offset: at,
                message: format!("expected parameter {want}, found {}", String::from_utf8_lossy(name)),
            });
        }
        out.push(get_tensor(r)?);
    }
    Ok(out)
}

fn get_ids(r: &mut ByteReader) -> Result<Vec<usize>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

impl Checkpoint {
    pub fn from_state(config: TrainConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, VERSION as usize);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put_u64(&mut out, s.epoch as u64);
        put_params(&mut out, &s.model.named_params());
        put_params(&mut out, &s.teacher.named_params());
        put_f64(&mut out, s.teacher.tau);
        put_f64(&mut out, s.dictionary.momentum());
        put_tensor(&mut out, s.dictionary.keys());
        put_u32(&mut out, s.history.len());
        for m in &s.history {
            put_u64(&mut out, m.epoch as u64);
            for v in [m.cls, m.se, m.inter, m.s_hcr, m.t_hcr, m.total, m.lr] {
                put_f64(&mut out, v);
            }
        }
        for ids in [s.split.seen(), s.split.unseen()] {
            put_u32(&mut out, ids.len());
            for &c in ids {
                put_u32(&mut out, c);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(6)?;
        if magic != CHECKPOINT_MAGIC {
            if magic.starts_with(&CHECKPOINT_MAGIC[..5]) {
                return Err(OanError::Version {
                    expected: "OANCK1".into(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(OanError::Format {
                offset: 0,
                message: "missing OANCK magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(OanError::Version {
                expected: VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let at = r.offset();
        let len = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?).map_err(|e| OanError::Format {
            offset: at + 8,
            message: format!("config: {e}"),
        })?;
        let epoch = r.u64()? as usize;
        let model = OanModel::from_params(get_params(&mut r, &crate::model::PARAM_NAMES)?)?;
        let teacher_params = get_params(&mut r, &crate::model::PARAM_NAMES[..7])?;
        let tau = r.f64()?;
        let teacher = TeacherModel::from_params(teacher_params, tau)?;
        let momentum = r.f64()?;
        let dictionary = OntologyDictionary::from_keys(get_tensor(&mut r)?, momentum)?;
        let n = r.u32()? as usize;
        let mut history = Vec::with_capacity(n.min(r.remaining() / 64));
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let mut v = [0.0; 7];
            for x in &mut v {
                *x = r.f64()?;
            }
            history.push(EpochMetrics {
                epoch,
                cls: v[0],
                se: v[1],
                inter: v[2],
                s_hcr: v[3],
                t_hcr: v[4],
                total: v[5],
                lr: v[6],
            });
        }
        let seen = get_ids(&mut r)?;
        let unseen = get_ids(&mut r)?;
        let split = SeenUnseenSplit::new(seen, unseen)?;
        if r.remaining() != 0 {
            return Err(OanError::Format {
                offset: r.offset(),
                message: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self {
            config,
            state: TrainState {
                model,
                teacher,
                dictionary,
                split,
                epoch,
                history,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| OanError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| OanError::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}
