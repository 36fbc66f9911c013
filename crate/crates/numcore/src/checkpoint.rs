//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "CSGAN001"
//! count      u32      number of entries
//! entry*     u32 name-len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!            u32 rank, u64 dims[rank], u64 byte-offset of the payload
//!            from the start of the file
//! payload*   raw elements in row-major order, in table order
//! ```

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSGAN001";

pub fn encode_checkpoint<F: Scalar>(store: &ParamStore<F>) -> Vec<u8> {
    let entries: Vec<(&str, &ArrayD<F>)> = store.iter().collect();
    let mut header_len = CHECKPOINT_MAGIC.len() + 4;
    for (name, value) in &entries {
        header_len += 4 + name.len() + 1 + 4 + 8 * value.ndim() + 8;
    }

    let mut out = Vec::with_capacity(header_len + store.num_elements() * F::DTYPE.width());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, value) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.code());
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (value.len() * F::DTYPE.width()) as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, value) in &entries {
        for &x in value.iter() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| NumError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses a checkpoint, converting stored elements to `F`.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<ParamStore<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| NumError::Checkpoint(format!("entry name: {e}")))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| NumError::Checkpoint(format!("unknown dtype {code}")))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, dtype, dims, offset));
    }

    let mut store = ParamStore::new();
    for (name, dtype, dims, offset) in table {
        let n: usize = dims.iter().product();
        let len = n * dtype.width();
        let payload = offset
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .map(|e| &bytes[offset..e])
            .ok_or_else(|| NumError::Checkpoint(format!("payload of `{name}` out of bounds")))?;
        let data: Vec<F> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        if store.contains(&name) {
            return Err(NumError::Checkpoint(format!("duplicate entry `{name}`")));
        }
        store.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data).expect("element count matches dims"),
        );
    }
    Ok(store)
}

pub fn save_checkpoint<F: Scalar>(store: &ParamStore<F>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<F>> {
    decode_checkpoint(&std::fs::read(path)?)
}
