//! `OINC` model checkpoints.
//!
//! Layout (little-endian): magic, version u32, dim u32, class count u32,
//! prototype count u32, extractor kind u32 (0 identity, 1 linear) followed
//! for linear by rows u32, cols u32 and the row-major matrix, scale f64,
//! class ids, the step each class was added (u32), class weights, consumed
//! flags (u32), prototypes, the three imprint gate vectors and the attention
//! temperature.

use std::path::Path;

use super::{ClassifierHead, Extractor, Model};
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::imprint::ImprintParams;
use crate::numeric::Mat;
use crate::prototype::PrototypeBank;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OINC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let dim = model.dim();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, dim);
    put_u32(&mut out, model.head.class_ids.len());
    put_u32(&mut out, model.bank.len());
    match &model.extractor {
        Extractor::Identity { .. } => put_u32(&mut out, 0),
        Extractor::Linear(a) => {
            put_u32(&mut out, 1);
            put_u32(&mut out, a.rows());
            put_u32(&mut out, a.cols());
            put_f64s(&mut out, a.values());
        }
    }
    put_f64s(&mut out, &[model.head.scale]);
    for &c in &model.head.class_ids {
        put_u32(&mut out, c as usize);
    }
    for &s in &model.head.introduced {
        put_u32(&mut out, s);
    }
    for w in &model.head.weights {
        put_f64s(&mut out, w);
    }
    for &c in model.bank.consumed() {
        put_u32(&mut out, c as usize);
    }
    for p in model.bank.prototypes() {
        put_f64s(&mut out, p);
    }
    put_f64s(&mut out, &model.gates.w_f);
    put_f64s(&mut out, &model.gates.w_att);
    put_f64s(&mut out, &model.gates.w_p);
    put_f64s(&mut out, &[model.gates.attention_temperature]);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.error_at(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let at = r.offset();
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let k = r.u32()? as usize;
    if dim == 0 || k == 0 {
        return Err(r.error_at(at, "zero dimension or empty bank"));
    }
    let at = r.offset();
    let extractor = match r.u32()? {
        0 => Extractor::Identity { dim },
        1 => {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: rows,
                });
            }
            let values = r.f64s(rows * cols)?;
            Extractor::Linear(Mat::from_vec(rows, cols, values)?)
        }
        _ => return Err(r.error_at(at, "unknown extractor kind")),
    };
    let scale = r.f64()?;
    let class_ids = r.u32s(classes)?;
    let introduced = r.u32s(classes)?.into_iter().map(|s| s as usize).collect();
    let weights = (0..classes)
        .map(|_| r.f64s(dim))
        .collect::<Result<Vec<_>>>()?;
    let at = r.offset();
    let consumed = r
        .u32s(k)?
        .into_iter()
        .map(|c| match c {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(r.error_at(at, "consumed flag must be 0 or 1")),
        })
        .collect::<Result<Vec<_>>>()?;
    let prototypes = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
    let gates = ImprintParams {
        w_f: r.f64s(dim)?,
        w_att: r.f64s(dim)?,
        w_p: r.f64s(dim)?,
        attention_temperature: r.f64()?,
    };
    if r.remaining() != 0 {
        return Err(r.error_at(r.offset(), "trailing bytes"));
    }
    Ok(Model {
        extractor,
        head: ClassifierHead {
            class_ids,
            introduced,
            weights,
            scale,
        },
        bank: PrototypeBank::from_parts(prototypes, consumed),
        gates,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
