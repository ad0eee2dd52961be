//! Binary tensor collections.
//!
//! A file is a sequence of entries. Each entry is one record
//!
//! ```text
//! "AFPT" | version u8 | rank u8 | dims u32 LE × rank | payload f32 LE | CRC32
//! ```
//!
//! (the CRC covering every preceding byte of the record), followed by a name
//! block `len u16 LE | UTF-8 bytes | CRC32` whose CRC covers the length and
//! the name bytes. The file closes with a footer `"AFPX" | entry count u32 LE
//! | CRC32 of the whole file so far`, so truncation at an entry boundary is
//! still detected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFPT";
pub const FOOTER: &[u8; 4] = b"AFPX";
pub const VERSION: u8 = 1;

/// Serializes named tensors at 32-bit precision.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in entries {
        if let Some(i) = t.data().iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::NumericDomain {
                op: "tensor_write",
                detail: format!("{name}[{i}] is not representable as a finite f32"),
            });
        }
        if t.rank() > usize::from(u8::MAX) || name.len() > usize::from(u16::MAX) {
            return Err(Error::Contract(format!("tensor {name} cannot be encoded")));
        }
        let start = out.len();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension {d} of {name} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());

        let start = out.len();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out.extend_from_slice(FOOTER);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption {
                path: self.path.into(),
                detail: format!("truncated at byte {}", self.bytes.len()),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn check_crc(&mut self, start: usize, what: &str) -> Result<()> {
        let want = crc32fast::hash(&self.bytes[start..self.pos]);
        if self.u32()? != want {
            return Err(Error::Corruption {
                path: self.path.into(),
                detail: format!("CRC mismatch in {what} at byte {start}"),
            });
        }
        Ok(())
    }
}

/// Parses the bytes produced by [`encode`]; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    loop {
        let start = cur.pos;
        let magic = cur.take(4)?;
        if magic == FOOTER {
            let count = cur.u32()? as usize;
            cur.check_crc(0, "footer")?;
            if count != entries.len() || cur.pos != bytes.len() {
                return Err(Error::Corruption {
                    path: path.into(),
                    detail: format!("footer promises {count} tensors, found {}", entries.len()),
                });
            }
            return Ok(entries);
        }
        if magic != MAGIC {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("bad magic at byte {start}"),
            });
        }
        let header = cur.take(2)?;
        if header[0] != VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: header[0],
            });
        }
        let rank = usize::from(header[1]);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let payload = cur.take(count.saturating_mul(4))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        cur.check_crc(start, "tensor record")?;

        let name_start = cur.pos;
        let len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        let name = cur.take(usize::from(len))?;
        cur.check_crc(name_start, "name block")?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Corruption {
            path: path.into(),
            detail: format!("name at byte {name_start} is not UTF-8"),
        })?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format {
                path: path.into(),
                detail: format!("duplicate tensor name {name}"),
            });
        }
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format {
            path: path.into(),
            detail: format!("tensor {name}: {e}"),
        })?;
        entries.push((name, tensor));
    }
}

pub fn tensor_write(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(entries)?).map_err(|e| Error::io(path, e))
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Looks up one tensor by name.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}
