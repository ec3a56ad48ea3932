//! Binary checkpoint container: a magic string, a fixed header, a
//! little-endian tensor table, and a trailing SHA-256 checksum over
//! everything between magic and checksum. All floats are 64-bit, so a
//! save → load round trip is bitwise exact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::params::{ParamStore, Role};
use crate::trainer::{Checkpoint, OptSlot};

pub const MAGIC: &[u8; 8] = b"STJEMA01";
pub const SCHEMA_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint container (bad magic)")]
    BadMagic,
    #[error("unsupported schema version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch: file is corrupt or truncated")]
    ChecksumMismatch,
    #[error("malformed container: {0}")]
    Corrupt(String),
    #[error("parameter store error: {0}")]
    Param(#[from] crate::nn::params::ParamError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io { path: path.display().to_string(), source }
}

fn role_tag(role: Role) -> u8 {
    match role {
        Role::Encoder => 0,
        Role::Projection => 1,
        Role::MaskToken => 2,
        Role::DecoderNode => 3,
        Role::DecoderEdge => 4,
        Role::Head => 5,
    }
}

fn tag_role(tag: u8) -> Result<Role, ContainerError> {
    Ok(match tag {
        0 => Role::Encoder,
        1 => Role::Projection,
        2 => Role::MaskToken,
        3 => Role::DecoderNode,
        4 => Role::DecoderEdge,
        5 => Role::Head,
        other => return Err(ContainerError::Corrupt(format!("unknown role tag {other}"))),
    })
}

/// Tag for tensors that carry optimizer state rather than parameters.
const ROLE_OPT: u8 = 255;

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, role: u8, value: &Array2<f64>) {
    push_str(buf, name);
    buf.push(role);
    buf.push(DTYPE_F64);
    buf.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
    for v in value.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Corrupt("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ContainerError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| ContainerError::Corrupt("non-UTF-8 name".into()))
    }

    fn tensor(&mut self) -> Result<(String, u8, Array2<f64>), ContainerError> {
        let name = self.string()?;
        let role = self.u8()?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(ContainerError::Corrupt(format!("unknown dtype tag {dtype}")));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| ContainerError::Corrupt("tensor shape overflow".into()))?;
        let raw = self.take(count * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ContainerError::Corrupt(format!("tensor shape: {e}")))?;
        Ok((name, role, value))
    }
}

/// Serialize a checkpoint. The write is atomic: a temporary sibling
/// file is written and renamed into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ContainerError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    payload.extend_from_slice(&ckpt.step.to_le_bytes());
    push_str(&mut payload, &ckpt.config_hash);

    let n_tensors = ckpt.params.names().count()
        + ckpt.target.names().count()
        + 3 * ckpt.opt.len();
    payload.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    for (name, role, value) in ckpt.params.iter_full() {
        push_tensor(&mut payload, &format!("params/{name}"), role_tag(role), value);
    }
    for (name, role, value) in ckpt.target.iter_full() {
        push_tensor(&mut payload, &format!("target/{name}"), role_tag(role), value);
    }
    for (name, slot) in &ckpt.opt {
        push_tensor(&mut payload, &format!("opt.m/{name}"), ROLE_OPT, &slot.m);
        push_tensor(&mut payload, &format!("opt.v/{name}"), ROLE_OPT, &slot.v);
        let t = Array2::from_elem((1, 1), slot.t as f64);
        push_tensor(&mut payload, &format!("opt.t/{name}"), ROLE_OPT, &t);
    }

    let checksum = Sha256::digest(&payload);
    let tmp = path.with_extension("stj.tmp");
    {
        let mut file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(MAGIC).map_err(io_err(&tmp))?;
        file.write_all(&payload).map_err(io_err(&tmp))?;
        file.write_all(&checksum).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Deserialize a checkpoint, verifying magic, version, and checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ContainerError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let payload = &bytes[MAGIC.len()..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let computed = Sha256::digest(payload);
    if computed.as_slice() != stored {
        return Err(ContainerError::ChecksumMismatch);
    }

    let mut r = Reader { bytes: payload, pos: 0 };
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let step = r.u64()?;
    let config_hash = r.string()?;
    let n_tensors = r.u32()? as usize;

    let mut params = ParamStore::new();
    let mut target = ParamStore::new();
    let mut opt_m: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut opt_v: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut opt_t: BTreeMap<String, u64> = BTreeMap::new();
    for _ in 0..n_tensors {
        let (full_name, role, value) = r.tensor()?;
        let (section, name) = full_name
            .split_once('/')
            .ok_or_else(|| ContainerError::Corrupt(format!("unsectioned tensor {full_name}")))?;
        match section {
            "params" => params.insert(name, tag_role(role)?, value)?,
            "target" => target.insert(name, tag_role(role)?, value)?,
            "opt.m" => {
                opt_m.insert(name.to_string(), value);
            }
            "opt.v" => {
                opt_v.insert(name.to_string(), value);
            }
            "opt.t" => {
                if value.dim() != (1, 1) {
                    return Err(ContainerError::Corrupt(format!(
                        "optimizer step counter for {name} is not a scalar"
                    )));
                }
                opt_t.insert(name.to_string(), value[(0, 0)] as u64);
            }
            other => {
                return Err(ContainerError::Corrupt(format!("unknown section {other}")));
            }
        }
    }
    if r.pos != payload.len() {
        return Err(ContainerError::Corrupt("trailing bytes after tensor table".into()));
    }

    if opt_m.len() != opt_v.len() || opt_m.len() != opt_t.len() {
        return Err(ContainerError::Corrupt("optimizer sections are inconsistent".into()));
    }
    let mut opt = BTreeMap::new();
    for (name, m) in opt_m {
        let v = opt_v
            .remove(&name)
            .ok_or_else(|| ContainerError::Corrupt(format!("missing opt.v for {name}")))?;
        let t = opt_t
            .remove(&name)
            .ok_or_else(|| ContainerError::Corrupt(format!("missing opt.t for {name}")))?;
        if m.dim() != v.dim() {
            return Err(ContainerError::Corrupt(format!("optimizer moment shapes differ for {name}")));
        }
        opt.insert(name, OptSlot { m, v, t });
    }

    Ok(Checkpoint { params, target, opt, step, config_hash })
}
