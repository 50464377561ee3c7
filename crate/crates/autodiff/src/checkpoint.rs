//! Parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"DMNCKPT\0"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 metadata
//! count      u32
//! count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, data f64 × numel }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Archive {
    pub metadata: String,
    pub params: ParamStore,
}

pub fn write_archive<W: Write>(w: &mut W, store: &ParamStore, metadata: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(metadata.len() as u64).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Archive> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("not a parameter archive".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let meta_len = read_u64(r)? as usize;
    let metadata = String::from_utf8(read_bytes(r, meta_len)?)
        .map_err(|_| TensorError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = String::from_utf8(read_bytes(r, name_len)?)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(r, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(Archive { metadata, params })
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, metadata: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, store, metadata)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
    read_archive(&mut BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(TensorError::Checkpoint("truncated archive".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Vec::new();
        write_archive(&mut bytes, &ParamStore::new(), "").unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_archive(&mut bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = read_archive(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn truncated_archive_fails() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut bytes = Vec::new();
        write_archive(&mut bytes, &s, "meta").unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_archive(&mut bytes.as_slice()).is_err());
    }
}
