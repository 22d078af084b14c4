//! Binary checkpoints: weights, momentum buffers and running BN statistics,
//! stamped with a hash of the experiment configuration.
//!
//! Layout (little endian): magic `MSRNNCKP`, `u32` version, length-prefixed
//! config hash, then three sections (weights, momentum, BN statistics), each
//! a `u32` count followed by its entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{ParamStore, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unroll::BnKey;

const MAGIC: &[u8; 8] = b"MSRNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of a canonical configuration string.
pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    v.iter().try_for_each(|x| w.write_f64::<LE>(*x))
}

fn read_f64s(r: &mut impl Read) -> std::io::Result<Vec<f64>> {
    let len = r.read_u64::<LE>()? as usize;
    let mut v = vec![0.0; len];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_tensors<'a>(w: &mut impl Write, entries: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) -> std::io::Result<()> {
    w.write_u32::<LE>(entries.len() as u32)?;
    for (name, t) in entries {
        write_str(w, name)?;
        for d in t.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        write_f64s(w, t.data())?;
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, ReadError> {
    let n = r.read_u32::<LE>()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = read_str(r)?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.read_u64::<LE>()? as usize;
        }
        let data = read_f64s(r)?;
        out.push((name, Tensor::new(shape, data).map_err(ReadError::Crate)?));
    }
    Ok(out)
}

enum ReadError {
    Io(std::io::Error),
    Crate(Error),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &str) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        write_str(&mut w, config_hash)?;
        write_tensors(&mut w, store.weights.iter())?;
        write_tensors(&mut w, store.momentum.iter())?;
        w.write_u32::<LE>(store.bn.len() as u32)?;
        for (key, s) in &store.bn {
            write_str(&mut w, &key.node)?;
            match key.t {
                Some(t) => {
                    w.write_u8(1)?;
                    w.write_u64::<LE>(t as u64)?;
                }
                None => w.write_u8(0)?,
            }
            write_f64s(&mut w, &s.mean)?;
            write_f64s(&mut w, &s.variance)?;
            w.write_u64::<LE>(s.count)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, refusing one written for a different configuration.
pub fn load_checkpoint(path: &Path, expected_hash: &str) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let read = |r: &mut BufReader<File>| -> Result<ParamStore, ReadError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadError::Crate(Error::Config(format!("{}: not a checkpoint file", path.display()))));
        }
        let version = r.read_u32::<LE>()?;
        if version != CHECKPOINT_VERSION {
            return Err(ReadError::Crate(Error::Config(format!(
                "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
                path.display()
            ))));
        }
        let found = read_str(r)?;
        if found != expected_hash {
            return Err(ReadError::Crate(Error::ConfigHashMismatch {
                expected: expected_hash.to_string(),
                found,
            }));
        }
        let mut store = ParamStore::default();
        store.weights = read_tensors(r)?.into_iter().collect();
        store.momentum = read_tensors(r)?.into_iter().collect();
        let n = r.read_u32::<LE>()?;
        for _ in 0..n {
            let node = read_str(r)?;
            let t = match r.read_u8()? {
                0 => None,
                _ => Some(r.read_u64::<LE>()? as usize),
            };
            let mean = read_f64s(r)?;
            let variance = read_f64s(r)?;
            let count = r.read_u64::<LE>()?;
            store.bn.insert(BnKey { node, t }, RunningStats { mean, variance, count });
        }
        Ok(store)
    };
    read(&mut r).map_err(|e| match e {
        ReadError::Io(e) => Error::io(path, e),
        ReadError::Crate(e) => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::default();
        s.weights.insert("a".into(), Tensor::from_fn([2, 1, 3, 3], |n, _, y, x| (n + y * x) as f64 - 0.5));
        s.momentum.insert("a".into(), Tensor::filled([2, 1, 3, 3], 0.25));
        s.bn.insert(
            BnKey { node: "h1->h1/bn0".into(), t: Some(3) },
            RunningStats { mean: vec![0.1, -0.2], variance: vec![1.5, 2.5], count: 7 },
        );
        s.bn.insert(
            BnKey { node: "post/bn".into(), t: None },
            RunningStats { mean: vec![0.0], variance: vec![1.0], count: 1 },
        );
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store = sample_store();
        let hash = config_hash("{}");
        save_checkpoint(&path, &store, &hash).unwrap();
        assert_eq!(load_checkpoint(&path, &hash).unwrap(), store);
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &sample_store(), &config_hash("a")).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &config_hash("b")),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let hash = config_hash("a");
        save_checkpoint(&path, &sample_store(), &hash).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path, &hash), Err(Error::Io { .. })));
    }
}
