//! Checkpoint files.
//!
//! ```text
//! hanme-checkpoint v1\n
//! <metadata, one line of JSON>\n
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 ndim, u64 dims[ndim], f64 values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "hanme-checkpoint v1";

pub fn encode_checkpoint(meta: &str, params: &ParamStore) -> Result<Vec<u8>> {
    if meta.contains('\n') {
        return Err(Error::Checkpoint("metadata must be a single line".into()));
    }
    let mut out = Vec::with_capacity(64 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(meta.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Returns the metadata line and the tensors in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("unsupported header `{magic}`")));
    }
    let meta = cur.line()?.to_string();
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        if ndim == 0 || ndim > 3 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has {ndim} axes")));
        }
        let dims = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        // Leading axes fold into rows.
        let cols = *dims.last().unwrap();
        let rows: usize = dims[..ndim - 1].iter().product::<usize>().max(if ndim == 1 { 1 } else { 0 });
        let n = rows * cols;
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::from_vec(rows, cols, data)?)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((meta, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &str, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(meta, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shapes in proptest::collection::vec((1usize..5, 1usize..5), 0..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            for (i, (r, c)) in shapes.iter().enumerate() {
                store.add(format!("p{i}"), Tensor::random_uniform(*r, *c, -1e3, 1e3, &mut rng)).unwrap();
            }
            let bytes = encode_checkpoint("{\"k\":1}", &store).unwrap();
            let (meta, back) = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(meta, "{\"k\":1}");
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let bytes = encode_checkpoint("{}", &store).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }
}
