//! Parameter checkpoint file format.
//!
//! Layout: magic "DCKP", version u32, count u32, then per parameter:
//! name length u16, name utf-8, dtype u8, rank u8, extents u32 each,
//! raw little-endian scalar payload. All integers little-endian.

use super::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

pub struct CheckpointEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

pub fn write_checkpoint<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(S::DTYPE as u8);
        buf.push(p.value.rank() as u8);
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match S::DTYPE {
            DType::F32 => {
                for v in p.value.data() {
                    buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for v in p.value.data() {
                    buf.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read every record. Values are converted into the run scalar type; the
/// on-disk dtype only selects the payload width.
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<CheckpointEntry<S>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                *off
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|e| Error::MalformedCheckpoint(format!("non-utf8 name: {e}")))?;
        let dtype = DType::from_u8(take(&mut off, 1)?[0])?;
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<S> = match dtype {
            DType::F32 => take(&mut off, numel * 4)?
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => take(&mut off, numel * 8)?
                .chunks_exact(8)
                .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let value = Tensor::new(shape, data)
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        entries.push(CheckpointEntry { name, value, trainable: true });
    }
    Ok(entries)
}

/// Load checkpoint values into an already-constructed store. Every store
/// parameter must be present with a matching shape; extra file records are
/// an error. Trainability is a property of the live store, not the file.
pub fn load_into_store<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let entries = read_checkpoint::<S>(path)?;
    if entries.len() != store.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "checkpoint holds {} parameters, model wants {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        if !store.contains(&e.name) {
            return Err(Error::MalformedCheckpoint(format!("unexpected parameter {}", e.name)));
        }
        let p = store.get_mut(&e.name);
        if p.value.shape() != e.value.shape() {
            return Err(Error::MalformedCheckpoint(format!(
                "shape mismatch for {}: file {:?}, model {:?}",
                e.name,
                e.value.shape(),
                p.value.shape()
            )));
        }
        p.value = e.value;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = std::env::temp_dir().join("dckp_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.dckp");
        let mut store = ParamStore::<f64>::new();
        store.register("b.weight", Tensor::new(vec![2, 3], vec![1.5, -0.25, 3.75, 0.0, -1.0, 2.0]).unwrap(), true);
        store.register("a.bias", Tensor::new(vec![2], vec![0.125, -8.5]).unwrap(), false);
        write_checkpoint(&path, &store).unwrap();
        let entries = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(entries.len(), 2);
        // BTreeMap ordering puts a.bias first.
        assert_eq!(entries[0].name, "a.bias");
        assert_eq!(entries[0].value.data(), &[0.125, -8.5]);
        assert_eq!(entries[1].value.shape(), &[2, 3]);
        let mut store2 = ParamStore::<f64>::new();
        store2.register("a.bias", Tensor::zeros(&[2]), false);
        store2.register("b.weight", Tensor::zeros(&[2, 3]), true);
        load_into_store(&path, &mut store2).unwrap();
        assert_eq!(store2.get("b.weight").value.data(), store.get("b.weight").value.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("dckp_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.dckp");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }
}
