//! `.mcgt` binary tensor container.
//!
//! Layout, all little-endian: magic `MCGT`, version u16, record count u32,
//! then per record: id length u16, UTF-8 id, dtype u8 (0 = f32), ndim u8,
//! dims as u32, payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::nn::Parameterized;
use crate::retrieval::{EmbeddingVector, ItemId};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"MCGT";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(id: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("record `{id}`: dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Self { id, dims, data })
    }
}

pub fn write_records<W: Write>(w: &mut W, records: &[Record]) -> Result<()> {
    let fmt = |m: String| Error::Format(m);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len()).map_err(|_| fmt("too many records".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let id = r.id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| fmt(format!("id `{}` too long", r.id)))?;
        let ndim = u8::try_from(r.dims.len()).map_err(|_| fmt(format!("record `{}` has too many dims", r.id)))?;
        if r.dims.iter().product::<usize>() != r.data.len() {
            return Err(fmt(format!("record `{}`: dims do not match payload", r.id)));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[DTYPE_F32, ndim])?;
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| fmt(format!("record `{}`: dim too large", r.id)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated container while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    Ok(u16::from_le_bytes(read_exact(r, 2, what)?.try_into().unwrap()))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>> {
    if read_exact(r, 4, "magic")? != MAGIC {
        return Err(Error::Format("not an MCGT container (bad magic)".into()));
    }
    let version = read_u16(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u32(r, "record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = read_u16(r, "id length")? as usize;
        let id = String::from_utf8(read_exact(r, len, "id")?)
            .map_err(|_| Error::Format("record id is not valid UTF-8".into()))?;
        let head = read_exact(r, 2, "dtype")?;
        if head[0] != DTYPE_F32 {
            return Err(Error::Format(format!("record `{id}`: unknown dtype code {}", head[0])));
        }
        let dims = (0..head[1])
            .map(|_| read_u32(r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record `{id}`: payload size overflows")))?;
        let bytes = read_exact(r, n, "payload")?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { id, dims, data });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(records)
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<Record>> {
    read_records(&mut BufReader::new(File::open(path)?))
}

/// One record per parameter tensor (running statistics included), in layer order.
pub fn model_records<T: Real>(model: &JointModel<T>) -> Vec<Record> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        out.push(Record {
            id: p.name.clone(),
            dims: p.shape.clone(),
            data: p.value.iter().map(|v| v.to_f32().unwrap()).collect(),
        })
    });
    out
}

/// Overwrites the weights of `model` from records written by [`model_records`].
pub fn apply_model_records<T: Real>(model: &mut JointModel<T>, records: &[Record]) -> Result<()> {
    let mut count = 0;
    model.visit_params(&mut |_| count += 1);
    if count != records.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model expects {count}", records.len())));
    }
    let mut i = 0;
    let mut bad = None;
    model.visit_params_mut(&mut |p| {
        let r = &records[i];
        i += 1;
        if bad.is_some() {
            return;
        }
        if r.id != p.name || r.dims != p.shape {
            bad = Some(format!("tensor `{}` {:?} does not match `{}` {:?}", r.id, r.dims, p.name, p.shape));
            return;
        }
        for (w, &v) in p.value.iter_mut().zip(&r.data) {
            *w = T::from_f32(v).unwrap();
        }
        p.zero_grad();
        p.momentum.iter_mut().for_each(|m| *m = T::zero());
    });
    if let Some(m) = bad {
        return Err(Error::Format(m));
    }
    model.bump_version();
    Ok(())
}

pub fn save_model<T: Real>(model: &JointModel<T>, path: &Path) -> Result<()> {
    save_records(path, &model_records(model))
}

pub fn load_model_into<T: Real>(model: &mut JointModel<T>, path: &Path) -> Result<()> {
    apply_model_records(model, &load_records(path)?)
}

/// Embeddings keyed by decimal item id.
pub fn embedding_records(items: &[(ItemId, EmbeddingVector)]) -> Vec<Record> {
    items
        .iter()
        .map(|(id, v)| Record { id: id.to_string(), dims: vec![v.dim()], data: v.values().to_vec() })
        .collect()
}

pub fn records_to_embeddings(records: &[Record]) -> Result<Vec<(ItemId, EmbeddingVector)>> {
    records
        .iter()
        .map(|r| {
            let id = r.id.parse().map_err(|_| Error::Format(format!("record id `{}` is not an item id", r.id)))?;
            if r.dims.len() != 1 {
                return Err(Error::Format(format!("record `{}` is not a vector", r.id)));
            }
            Ok((id, EmbeddingVector::new(r.data.clone())?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Vec<Record> {
        vec![
            Record::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap(),
            Record::new("β", vec![1], vec![0.5]).unwrap(),
        ]
    }

    fn bytes(records: &[Record]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_records(&mut buf, records).unwrap();
        buf
    }

    #[test]
    fn roundtrip() {
        let r = sample();
        assert_eq!(read_records(&mut bytes(&r).as_slice()).unwrap(), r);
    }

    #[test]
    fn header_layout() {
        let b = bytes(&sample());
        assert_eq!(&b[..4], b"MCGT");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 2);
        // "a": len 1, id, dtype 0, ndim 2, dims 2 and 3, then 6 floats
        assert_eq!(&b[10..14], &[1, 0, b'a', 0]);
        assert_eq!(b[14], 2);
        assert_eq!(b.len(), 10 + (2 + 1 + 2 + 8 + 24) + (2 + 2 + 2 + 4 + 4));
    }

    #[test]
    fn rejects_corruption() {
        let good = bytes(&sample());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let mut bad_dtype = good.clone();
        bad_dtype[13] = 3;
        let truncated = &good[..good.len() - 1];
        let mut trailing = good.clone();
        trailing.push(0);
        for b in [&bad_magic[..], &bad_version, &bad_dtype, truncated, &trailing] {
            assert!(matches!(read_records(&mut &b[..]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let spec = ModelSpec { classes: 4, ..ModelSpec::default() };
        let a: JointModel<f32> = JointModel::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut b: JointModel<f32> = JointModel::new(spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mcgt");
        save_model(&a, &p).unwrap();
        load_model_into(&mut b, &p).unwrap();
        assert_eq!(model_records(&a), model_records(&b));
        let other = ModelSpec { classes: 5, ..ModelSpec::default() };
        let mut c: JointModel<f32> = JointModel::new(other, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(load_model_into(&mut c, &p).is_err());
    }

    #[test]
    fn embeddings_roundtrip() {
        let items = vec![(42u64, EmbeddingVector::new(vec![1.0, 2.0]).unwrap())];
        let back = records_to_embeddings(&embedding_records(&items)).unwrap();
        assert_eq!(back, items);
        let bad = vec![Record::new("x", vec![1], vec![1.0]).unwrap()];
        assert!(records_to_embeddings(&bad).is_err());
    }
}
