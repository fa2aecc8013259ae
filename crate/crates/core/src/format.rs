//! SMAT tensor containers and SMCK named-tensor checkpoints.
//!
//! SMAT layout (all integers little-endian):
//!
//! ```text
//! "SMAT" | version 0x01 | dtype 0x00 (f32) | rank u8 | 3 reserved zero bytes
//! rank x u32 extents | row-major f32 payload
//! ```
//!
//! SMCK layout:
//!
//! ```text
//! "SMCK" | version 0x01 | entry count u32
//! per entry: name length u16 | UTF-8 name | embedded SMAT
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const SMAT_MAGIC: &[u8; 4] = b"SMAT";
pub const SMCK_MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

pub fn encode_tensor_into(tensor: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(SMAT_MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, tensor.rank() as u8, 0, 0, 0]);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.rank() + 4 * tensor.numel());
    encode_tensor_into(tensor, &mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated {}: need {n} bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode_tensor_at(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let magic = r.take(4)?;
    if magic != SMAT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported tensor dtype {dtype}")));
    }
    let rank = r.u8()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} outside 1..={MAX_RANK}")));
    }
    if r.take(3)? != [0, 0, 0] {
        return Err(Error::Format("reserved tensor header bytes are not zero".into()));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor dims {dims:?} overflow")))?;
    let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("tensor payload size overflows".into()))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&dims, data).map_err(|e| Error::Format(format!("invalid tensor: {e}")))
}

/// Decodes exactly one SMAT tensor; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: "tensor",
    };
    let t = decode_tensor_at(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - r.pos)));
    }
    Ok(t)
}

pub fn encode_checkpoint(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SMCK_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor_into(tensor, &mut out);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: "checkpoint",
    };
    let magic = r.take(4)?;
    if magic != SMCK_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let tensor = decode_tensor_at(&mut r)?;
        entries.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_tensor_file(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tensor(&bytes)
}

pub fn write_checkpoint_file(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode_checkpoint(entries)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_checkpoint_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode_tensor(&t);
        let mut expect = b"SMAT".to_vec();
        expect.extend_from_slice(&[1, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(decode_tensor(&b).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode_tensor(&t);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_tensor(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 1;
        assert!(decode_tensor(&bad).is_err());
        let mut bad = good.clone();
        bad[9] = 1;
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_tensor(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_tensor(&long).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_truncation() {
        let entries = vec![
            ("a.weight".to_string(), Tensor::new(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()),
            ("b".to_string(), Tensor::new(&[1], vec![0.5f32]).unwrap()),
        ];
        let bytes = encode_checkpoint(&entries).unwrap();
        assert_eq!(&bytes[..5], b"SMCK\x01");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), entries);
        for cut in [3, 8, 12, bytes.len() - 2] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(decode_checkpoint(&wrong).is_err());
    }
}
