//! Binary model container shared by base models and carry-on bundles.
//!
//! ```text
//! "CGPT" | version: u16 | json_len: u32 | json (UTF-8)
//! then, until end of file, one record per parameter:
//!     name_len: u32 | name (UTF-8) | ndim: u32 | dims: u32 × ndim | values: f64 × Π dims
//! ```
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::numcore::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"CGPT";
pub const FORMAT_VERSION: u16 = 1;

/// Serialise a value as canonical JSON: object keys sorted, no whitespace.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn encode(json: &str, params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let jl = c.u32()? as usize;
    let json = std::str::from_utf8(c.take(jl)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?
        .to_owned();
    let mut params = Vec::new();
    while c.pos < bytes.len() {
        let nl = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nl)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("parameter `{name}` has {ndim} dims")));
        }
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as Float)
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok((json, params))
}
