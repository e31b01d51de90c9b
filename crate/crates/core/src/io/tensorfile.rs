use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HXLM";
pub const VERSION: u32 = 1;

/// A named row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: &str, m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self {
            name: name.to_string(),
            rows: m.nrows() as u64,
            cols: m.ncols() as u64,
            data,
        }
    }

    pub fn row_vector(name: &str, values: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            rows: 1,
            cols: values.len() as u64,
            data: values.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows as usize, self.cols as usize, &self.data)
    }
}

/// Ordered tensor records: magic, `u32` version, then per record a `u32`
/// name length, the UTF-8 name, `u64` rows, `u64` cols and row-major `f64`
/// data, all little-endian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<Tensor>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TensorFile {
    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| format_err(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&t.rows.to_le_bytes());
            out.extend_from_slice(&t.cols.to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(format_err("bad magic, not an HXLM file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported HXLM version {version}")));
        }
        let mut file = TensorFile::default();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_string();
            let rows = r.u64()?;
            let cols = r.u64()?;
            let count = rows
                .checked_mul(cols)
                .and_then(|c| usize::try_from(c).ok())
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len() - r.pos))
                .ok_or_else(|| format_err(format!("tensor `{name}` of {rows}×{cols} exceeds the file")))?;
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            file.tensors.push(Tensor { name, rows, cols, data });
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::default();
        f.push(Tensor::from_matrix("W", &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.0])));
        f.push(Tensor::row_vector("b", &[f64::MIN_POSITIVE, 1e300]));
        f.push(Tensor::row_vector("empty", &[]));
        f
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample().to_bytes();
        let back = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.require("W").unwrap().to_matrix()[(1, 0)], 4.0);
        assert_eq!(back.require("W").unwrap().data[5].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn layout_is_row_major_little_endian() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"HXLM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(bytes[12], b'W');
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[37..45], &2.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = sample().to_bytes();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut huge = b"HXLM\x01\0\0\0\x01\0\0\0X".to_vec();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&2u64.to_le_bytes());
        assert!(TensorFile::from_bytes(&huge).is_err());
    }
}
