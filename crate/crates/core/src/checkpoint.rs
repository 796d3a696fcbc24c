//! Binary weight checkpoints: a little-endian container holding the field
//! configuration, the named parameter layout, the raw f64 payload, and a
//! trailing CRC32 over everything before it.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "MCAP" | version u32 | header len u32 | header JSON
//! | segment count u32 | (name len u32, name utf8, segment len u64)*
//! | payload f64* | crc32 u32
//! ```
//!
//! The header JSON carries the field shape and the canonicalization mode so
//! a checkpoint is self-describing; the payload stays binary for size.

use std::path::Path;
use std::sync::Arc;

use crate::difftape::{ParamLayout, ParamVector};
use crate::field::FieldConfig;
use crate::template::CanoMode;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Guards against absurd allocations from truncated or garbled files; real
/// layouts have a few dozen segments with short names.
const MAX_SEGMENTS: u32 = 1 << 20;
const MAX_NAME_LEN: u32 = 4096;
const MAX_HEADER_LEN: u32 = 1 << 20;

/// JSON-encoded metadata block.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    field: FieldConfig,
    mode: CanoMode,
}

/// A loaded checkpoint: the field shape, the canonicalization mode the
/// weights were trained under, and the weights themselves.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub field: FieldConfig,
    pub mode: CanoMode,
    pub params: ParamVector,
}

/// Serializes a checkpoint to bytes. Exposed for tests; use
/// [`save_checkpoint`] to write files.
pub fn encode_checkpoint(
    field: &FieldConfig,
    mode: CanoMode,
    params: &ParamVector,
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        field: field.clone(),
        mode,
    })?;
    if header.len() > MAX_HEADER_LEN as usize {
        return Err(Error::data("checkpoint: header too large"));
    }
    let segs = params.layout.segments();
    let mut out = Vec::with_capacity(64 + header.len() + 8 * params.values.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for seg in segs {
        let name = seg.name.as_bytes();
        if name.len() > MAX_NAME_LEN as usize {
            return Err(Error::data(format!(
                "checkpoint: segment name too long ({} bytes)",
                name.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(seg.len as u64).to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Byte-slice reader with bounds-checked little-endian reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::data("checkpoint: truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, verifying the CRC before trusting any field.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::data("checkpoint: truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::data(format!(
            "checkpoint: CRC mismatch (stored {stored:#010x}, computed {actual:#010x})"
        )));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::data("checkpoint: bad magic, not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "checkpoint: unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = r.u32()?;
    if header_len > MAX_HEADER_LEN {
        return Err(Error::data("checkpoint: header too large"));
    }
    let header: Header = serde_json::from_slice(r.take(header_len as usize)?)?;

    let n_segs = r.u32()?;
    if n_segs > MAX_SEGMENTS {
        return Err(Error::data("checkpoint: segment table too large"));
    }
    let mut builder = ParamLayout::builder();
    let mut names = std::collections::HashSet::new();
    let mut total: u64 = 0;
    for _ in 0..n_segs {
        let name_len = r.u32()?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::data("checkpoint: segment name too long"));
        }
        let name = std::str::from_utf8(r.take(name_len as usize)?)
            .map_err(|_| Error::data("checkpoint: segment name is not UTF-8"))?;
        if !names.insert(name.to_string()) {
            return Err(Error::data(format!(
                "checkpoint: duplicate segment name {name:?}"
            )));
        }
        let len = r.u64()?;
        total = total
            .checked_add(len)
            .ok_or_else(|| Error::data("checkpoint: segment lengths overflow"))?;
        builder.push(name, len as usize);
    }

    let payload = r.take(body.len() - r.pos)?;
    if payload.len() % 8 != 0 {
        return Err(Error::data("checkpoint: payload is not whole f64 words"));
    }
    let count = (payload.len() / 8) as u64;
    if count != total {
        return Err(Error::data(format!(
            "checkpoint: segment lengths sum to {total} but payload holds {count} values"
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        field: header.field,
        mode: header.mode,
        params: ParamVector {
            values,
            layout: Arc::new(builder.build()),
        },
    })
}

/// Writes a checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    field: &FieldConfig,
    mode: CanoMode,
    params: &ParamVector,
) -> Result<()> {
    let bytes = encode_checkpoint(field, mode, params)?;
    std::fs::write(path, bytes)
        .map_err(|e| Error::data(format!("checkpoint {}: {e}", path.display())))
}

/// Reads and verifies a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
