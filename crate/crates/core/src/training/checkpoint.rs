//! `BDET` checkpoints: magic, `u32` version, length-prefixed JSON model
//! config, `u32` entry count, then `(u32 name length, name, TNS4 tensor)`
//! entries. All integers little-endian; tensors are stored as f32.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::detector::{BorderDet, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::HasParams;
use crate::tensor::{Real, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDET";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Real>(model: &BorderDet<T>, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION as usize)?;
    let cfg = serde_json::to_vec(model.config())?;
    write_u32(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    let mut entries = Vec::new();
    model.visit_params("", &mut |name, shape, values| {
        entries.push((name.to_string(), shape, values.to_vec()));
    });
    write_u32(&mut w, entries.len())?;
    for (name, shape, values) in entries {
        write_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        Tensor4::from_vec(shape, values)?.write_to(&mut w)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<BorderDet<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a BDET checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut cfg = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut cfg)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg)?;
    let count = read_u32(&mut r)? as usize;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        table.insert(name, Tensor4::<T>::read_from(&mut r)?);
    }
    let mut model = BorderDet::<T>::new(cfg)?;
    let mut problem = None;
    model.visit_params_mut("", &mut |slot| {
        match table.remove(&slot.name) {
            Some(t) if t.shape() == slot.shape => slot.value.copy_from_slice(t.data()),
            Some(t) => {
                problem.get_or_insert(format!("{}: shape {:?}, expected {:?}", slot.name, t.shape(), slot.shape));
            }
            None => {
                problem.get_or_insert(format!("missing tensor {}", slot.name));
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Format(p));
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    model.bump_version();
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &BorderDet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<BorderDet<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values<T: Real>(m: &BorderDet<T>) -> Vec<(String, Vec<f64>)> {
        let mut v = Vec::new();
        m.visit_params("", &mut |n, _, d| v.push((n.to_string(), d.iter().map(|x| x.to_f64_lossy()).collect())));
        v
    }

    #[test]
    fn round_trip() {
        let cfg = ModelConfig { init_seed: 5, pool_size: 4, ..Default::default() };
        let model = BorderDet::<f32>::new(cfg.clone()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"BDET");
        let back: BorderDet<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config(), &cfg);
        assert_eq!(values(&back), values(&model));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_checkpoint::<f32>(&b"NOPE\0\0\0\0"[..]), Err(Error::Format(_))));
        let model = BorderDet::<f32>::new(ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint::<f32>(buf.as_slice()).is_err());
    }
}
