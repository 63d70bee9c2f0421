//! `MRGE` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MRGE"  u32 version
//! [32]    SHA-256 of the canonical backbone + schedule config
//! u32 n   n bytes of canonical config JSON
//! u32 k   k tensors sorted by name:
//!         u32 len, name (UTF-8), u8 dtype (0 = f32), u32 rank, u32 extents..., f32 payload
//! u32 k   k trainable flags (u8), same order
//! u8      1 if a converter plan follows, else 0
//!         u8 setting ('A'..'E'), u8 gre, u32 stack_n, u32 n_groups,
//!         u32 depth, u32 group index per block
//! ```

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{ConverterSetting, ExperimentConfig};
use crate::converters::{make_group_plan, ConverterStack, MergeModel};
use crate::error::{Error, Result};
use crate::numerics::{hex, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MRGE";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "MRGE",
        reason: reason.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn canonical_json(cfg: &ExperimentConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config is serializable");
    serde_json::to_string(&v).expect("value is serializable")
}

fn raw_digest(cfg: &ExperimentConfig) -> [u8; 32] {
    let mut out = [0u8; 32];
    let hexed = cfg.model_digest();
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hexed[2 * i..2 * i + 2], 16).expect("hex digest");
    }
    out
}

/// Serializes a model.
pub fn to_bytes(model: &MergeModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&raw_digest(&model.config));
    let json = canonical_json(&model.config);
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, model.store.len());
    for (name, p) in model.store.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        put_u32(&mut out, p.tensor.rank());
        for &e in p.tensor.shape() {
            put_u32(&mut out, e);
        }
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    put_u32(&mut out, model.store.len());
    out.extend(model.store.iter().map(|(_, p)| u8::from(p.trainable)));
    match &model.converters {
        None => out.push(0),
        Some(stack) => {
            out.push(1);
            out.push(stack.setting.as_char() as u8);
            out.push(u8::from(stack.plan.gre()));
            put_u32(&mut out, stack.plan.stack_n());
            put_u32(&mut out, stack.plan.n_groups());
            put_u32(&mut out, stack.plan.depth());
            for &g in stack.plan.assignment() {
                put_u32(&mut out, g);
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// A decoded checkpoint together with the digest it was written with.
pub struct Loaded {
    pub model: MergeModel,
    /// Hex model digest stored in the file.
    pub stored_digest: String,
}

/// Parses a checkpoint. The stored digest must match the embedded config.
pub fn from_bytes(buf: &[u8]) -> Result<Loaded> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let stored_digest = hex(c.take(32)?);
    let n = c.u32()?;
    let json = std::str::from_utf8(c.take(n)?).map_err(|e| fmt_err(e.to_string()))?;
    let config: ExperimentConfig = serde_json::from_str(json)?;
    if config.model_digest() != stored_digest {
        return Err(Error::DigestMismatch {
            expected: stored_digest,
            found: config.model_digest(),
        });
    }
    let count = c.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| fmt_err(e.to_string()))?
            .to_string();
        if c.u8()? != DTYPE_F32 {
            return Err(fmt_err(format!("unsupported dtype for {name}")));
        }
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = c
            .take(numel.checked_mul(4).ok_or_else(|| fmt_err("tensor too large"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.u32()? != count {
        return Err(fmt_err("flag table length differs from tensor table"));
    }
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        let flag = c.u8()?;
        if flag > 1 {
            return Err(fmt_err(format!("bad trainable flag {flag}")));
        }
        store.insert(name, t, flag == 1)?;
    }
    let converters = match c.u8()? {
        0 => None,
        1 => {
            let setting = ConverterSetting::from_char(c.u8()? as char)?;
            let gre = c.u8()? == 1;
            let stack_n = c.u32()?;
            let n_groups = c.u32()?;
            let depth = c.u32()?;
            let assignment = (0..depth).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let plan = make_group_plan(depth, n_groups, gre, stack_n)?;
            if plan.assignment() != assignment.as_slice() {
                return Err(fmt_err("group assignment is not the contiguous even split"));
            }
            Some(ConverterStack { plan, setting })
        }
        b => return Err(fmt_err(format!("bad plan marker {b}"))),
    };
    if c.pos != buf.len() {
        return Err(fmt_err("trailing bytes"));
    }
    Ok(Loaded {
        model: MergeModel {
            config,
            store,
            converters,
        },
        stored_digest,
    })
}

pub fn save(model: &MergeModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Compares a checkpoint's model digest against `expected`. A mismatch is
/// logged as a warning and is an error unless `force` is set.
pub fn check_digest(loaded: &Loaded, expected: &ExperimentConfig, force: bool) -> Result<()> {
    let want = expected.model_digest();
    if loaded.stored_digest == want {
        return Ok(());
    }
    log::warn!(
        "checkpoint digest {} differs from config digest {}",
        loaded.stored_digest,
        want
    );
    if force {
        Ok(())
    } else {
        Err(Error::DigestMismatch {
            expected: want,
            found: loaded.stored_digest.clone(),
        })
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
