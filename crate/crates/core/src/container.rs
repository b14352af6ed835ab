//! Binary tensor container shared by the feature cache and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FPDA" | version: u16 | dtype: u16 | ndim: u16 | dims: u64 × ndim | payload
//! ```
//!
//! The payload is row-major. dtype 1 is `f32`, dtype 2 is `f64`.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPDA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl TensorRecord {
    pub fn f32(dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            dims: dims.to_vec(),
            payload: Payload::F32(data),
        }
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Self {
        Self {
            dims: dims.to_vec(),
            payload: Payload::F64(data),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        debug_assert_eq!(self.dims.iter().product::<usize>(), self.payload.len());
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let dtype = match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        };
        out.extend_from_slice(&(dtype as u16).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decode one record from the front of `bytes`; returns the record and
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let dtype = r.u16()?;
        let ndim = r.u16()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflow")?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("dimension overflow")?;
        let payload = match dtype {
            1 => Payload::F32(
                r.take(n.checked_mul(4).ok_or("payload overflow")?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Payload::F64(
                r.take(n.checked_mul(8).ok_or("payload overflow")?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(format!("unknown dtype code {other}")),
        };
        Ok((Self { dims, payload }, r.pos))
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (rec, used) = Self::decode(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(rec)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err("truncated".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
