//! QEC1 checkpoints.
//!
//! ```text
//! "QEC1"  u32 version  u32 count
//! count × { u16 name_len, name, u8 dtype (1 = f64), u8 rank, rank × u64 dims, u64 offset }
//! zero padding to a multiple of 64
//! data: little-endian f64, every tensor starting on a 64-byte boundary
//! u32 CRC32 of everything before it
//! ```
//!
//! All integers are little-endian and offsets are relative to the start of
//! the data section. The architecture lives in a JSON sidecar at
//! `<checkpoint>.json`.

use std::path::{Path, PathBuf};

use qelim_core::attention::AttnWeights;
use qelim_core::model::{ArchConfig, BlockWeights, LmHead, ModelWeights};
use qelim_core::Matrix;

use crate::arch::ArchJson;
use crate::error::{Error, Result};
use crate::files;

pub const MAGIC: [u8; 4] = *b"QEC1";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn matrix(name: String, m: &Matrix) -> Self {
        Self { name, dims: vec![m.rows(), m.cols()], data: m.as_slice().to_vec() }
    }

    fn vector(name: String, v: &[f64]) -> Self {
        Self { name, dims: vec![v.len()], data: v.to_vec() }
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0usize;
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        offset = align(offset + 8 * t.data.len());
    }
    let data_start = align(out.len());
    out.resize(data_start, 0);
    for t in tensors {
        out.resize(align(out.len() - data_start) + data_start, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = files::crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Record {
    name: Vec<u8>,
    dtype: u8,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Malformed(format!("size {v} does not fit in memory")))
}

fn read_records(c: &mut Cursor, count: u32) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = c.take(name_len)?.to_vec();
        let dtype = c.u8()?;
        let rank = c.u8()?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(to_usize(c.u64()?)?);
        }
        let offset = to_usize(c.u64()?)?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed("tensor size overflows".into()))?;
        records.push(Record { name, dtype, dims, offset, len });
    }
    Ok(records)
}

/// Decode and validate a checkpoint. Checks run in the order: magic,
/// truncation, checksum, version.
pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    let count = c.u32()?;
    let records = if version == VERSION {
        let records = read_records(&mut c, count)?;
        let data_start = align(c.pos);
        let data_end = records.iter().map(|r| r.offset.saturating_add(r.len.saturating_mul(8))).max().unwrap_or(0);
        if bytes.len() < data_start.saturating_add(data_end).saturating_add(4) {
            return Err(Error::TruncatedFile);
        }
        Some((records, data_start))
    } else {
        None
    };
    if bytes.len() < c.pos + 4 {
        return Err(Error::TruncatedFile);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = files::crc32(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let Some((records, data_start)) = records else {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    };
    records
        .into_iter()
        .map(|r| {
            let name = String::from_utf8(r.name).map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            if r.dtype != DTYPE_F64 {
                return Err(Error::Malformed(format!("{name}: unsupported dtype {}", r.dtype)));
            }
            if r.offset % ALIGN != 0 {
                return Err(Error::Malformed(format!("{name}: offset {} is not {ALIGN}-byte aligned", r.offset)));
            }
            let start = data_start + r.offset;
            let data = body[start..start + 8 * r.len]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Tensor { name, dims: r.dims, data })
        })
        .collect()
}

/// The trailing checksum field (0 if the file is shorter than 4 bytes).
pub fn stored_crc(bytes: &[u8]) -> u32 {
    match bytes.len().checked_sub(4) {
        Some(n) => u32::from_le_bytes(bytes[n..].try_into().unwrap()),
        None => 0,
    }
}

pub fn tensors_of(m: &ModelWeights) -> Vec<Tensor> {
    let mut out = vec![Tensor::matrix("embed".into(), &m.e), Tensor::matrix("pos_embed".into(), &m.e_p)];
    for (i, b) in m.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        out.push(Tensor::matrix(format!("{p}.attn.w_q"), &b.attn.w_q));
        out.push(Tensor::matrix(format!("{p}.attn.w_k"), &b.attn.w_k));
        out.push(Tensor::matrix(format!("{p}.attn.w_v"), &b.attn.w_v));
        out.push(Tensor::matrix(format!("{p}.attn.w_o"), &b.attn.w_o));
        out.push(Tensor::matrix(format!("{p}.mlp.w_up"), &b.w_up));
        out.push(Tensor::matrix(format!("{p}.mlp.w_down"), &b.w_down));
        if let Some(s) = &b.ln1_scale {
            out.push(Tensor::vector(format!("{p}.ln1.scale"), s));
        }
        if let Some(s) = &b.ln2_scale {
            out.push(Tensor::vector(format!("{p}.ln2.scale"), s));
        }
    }
    if let LmHead::Untied(w) = &m.lm_head {
        out.push(Tensor::matrix("lm_head".into(), w));
    }
    out
}

struct Named(std::collections::BTreeMap<String, Tensor>);

impl Named {
    fn take(&mut self, name: &str) -> Option<Tensor> {
        self.0.remove(name)
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let t = self.take(name).ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
        match t.dims[..] {
            [r, c] => Ok(Matrix::from_vec(r, c, t.data)?),
            _ => Err(Error::Malformed(format!("{name} has rank {}, expected 2", t.dims.len()))),
        }
    }

    fn vector(&mut self, name: &str) -> Result<Option<Vec<f64>>> {
        match self.take(name) {
            None => Ok(None),
            Some(t) if t.dims.len() == 1 => Ok(Some(t.data)),
            Some(t) => Err(Error::Malformed(format!("{name} has rank {}, expected 1", t.dims.len()))),
        }
    }
}

/// Rebuild model weights from decoded tensors and check them against `cfg`.
pub fn model_from_tensors(tensors: Vec<Tensor>, cfg: &ArchConfig) -> Result<ModelWeights> {
    let mut map = std::collections::BTreeMap::new();
    for t in tensors {
        let name = t.name.clone();
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }
    let mut named = Named(map);
    let e = named.matrix("embed")?;
    let e_p = named.matrix("pos_embed")?;
    let mut blocks = Vec::with_capacity(cfg.stored_blocks());
    for i in 0..cfg.stored_blocks() {
        let p = format!("blocks.{i}");
        let attn = AttnWeights::new(
            named.matrix(&format!("{p}.attn.w_q"))?,
            named.matrix(&format!("{p}.attn.w_k"))?,
            named.matrix(&format!("{p}.attn.w_v"))?,
            named.matrix(&format!("{p}.attn.w_o"))?,
        )
        .map_err(mismatch)?;
        blocks.push(BlockWeights {
            attn,
            w_up: named.matrix(&format!("{p}.mlp.w_up"))?,
            w_down: named.matrix(&format!("{p}.mlp.w_down"))?,
            ln1_scale: named.vector(&format!("{p}.ln1.scale"))?,
            ln2_scale: named.vector(&format!("{p}.ln2.scale"))?,
        });
    }
    let lm_head = if named.0.contains_key("lm_head") { LmHead::Untied(named.matrix("lm_head")?) } else { LmHead::Tied };
    if let Some(extra) = named.0.keys().next() {
        return Err(Error::Malformed(format!("unexpected tensor {extra}")));
    }
    let m = ModelWeights { e, e_p, blocks, lm_head };
    m.check(cfg).map_err(mismatch)?;
    Ok(m)
}

fn mismatch(e: qelim_core::Error) -> Error {
    Error::Malformed(format!("tensors do not match the architecture: {e}"))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    files::with_suffix(path, ".json")
}

/// Write the checkpoint and its sidecar; returns both files' bytes.
pub fn save(m: &ModelWeights, cfg: &ArchConfig, path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    m.check(cfg)?;
    let bytes = encode(&tensors_of(m));
    let sidecar = files::to_json(&ArchJson::from_config(cfg));
    files::write_atomic(path, &bytes)?;
    files::write_atomic(&sidecar_path(path), &sidecar)?;
    Ok((bytes, sidecar))
}

/// Decode a checkpoint read from `path` together with its sidecar.
pub fn from_bytes(path: &Path, bytes: &[u8], sidecar: &[u8]) -> Result<(ModelWeights, ArchConfig)> {
    let tensors = decode(bytes)?;
    let arch: ArchJson =
        serde_json::from_slice(sidecar).map_err(|source| Error::Json { path: sidecar_path(path), source })?;
    let cfg = arch.to_config()?;
    Ok((model_from_tensors(tensors, &cfg)?, cfg))
}

pub fn load(path: &Path) -> Result<(ModelWeights, ArchConfig)> {
    from_bytes(path, &files::read(path)?, &files::read(&sidecar_path(path))?)
}
