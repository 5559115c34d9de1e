//! Single-file little-endian tensor archive.
//!
//! Layout: `b"APRCKPT\0"`, `u32` version, `u32` record count, then per record
//! `u32` name length, UTF-8 name, `u8` dtype tag (0 = f32, 1 = f64, 2 = u8),
//! `u32` rank, `rank` x `u64` dims, raw element bytes.

use std::io::{Read, Write};

use crate::{ParamStore, Real, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"APRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let payload = if T::DTYPE_TAG == 0 {
            Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            Payload::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        self.records.push(Record {
            name: name.into(),
            dims: t.shape().to_vec(),
            payload,
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.records.push(Record {
            name: name.into(),
            dims: vec![bytes.len()],
            payload: Payload::U8(bytes),
        });
    }

    /// Add every tensor of `store` under `prefix.`.
    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.push_tensor(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn bytes(&self, name: &str) -> Option<&[u8]> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::U8(b)) => Some(b),
            _ => None,
        }
    }

    /// Tensor view of a float record, converted to `T`.
    pub fn tensor<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        let r = self.get(name)?;
        let data: Vec<T> = match &r.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            Payload::U8(_) => return None,
        };
        Tensor::new(r.dims.clone(), data).ok()
    }

    /// Fill `store` from records written by [`Checkpoint::push_store`].
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let loaded: Vec<(String, Tensor<T>)> = store
            .names()
            .iter()
            .map(|n| {
                let full = format!("{prefix}.{n}");
                self.tensor(&full)
                    .map(|t| (n.clone(), t))
                    .ok_or_else(|| bad(format!("missing tensor `{full}`")))
            })
            .collect::<Result<_>>()?;
        store.load_named(|name| loaded.iter().find(|(n, _)| n == name).map(|(_, t)| t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            if r.dims.iter().product::<usize>() != r.payload.len() {
                return Err(bad(format!("record `{}` dims disagree with payload", r.name)));
            }
            buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(r.name.as_bytes());
            buf.push(r.payload.tag());
            buf.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut buf)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut buf)),
                Payload::U8(v) => buf.extend_from_slice(v),
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = match tag[0] {
                0 => {
                    let mut raw = vec![0u8; n * 4];
                    r.read_exact(&mut raw)?;
                    Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect())
                }
                1 => {
                    let mut raw = vec![0u8; n * 8];
                    r.read_exact(&mut raw)?;
                    Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect())
                }
                2 => {
                    let mut raw = vec![0u8; n];
                    r.read_exact(&mut raw)?;
                    Payload::U8(raw)
                }
                t => return Err(bad(format!("unknown dtype tag {t} in `{name}`"))),
            };
            records.push(Record { name, dims, payload });
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
