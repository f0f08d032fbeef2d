//! Shared binary layout for checkpoints and tokenizer files: 8-byte magic,
//! `u16` version, `u32`-length UTF-8 `key=value` block, `u32` tensor count,
//! tensor table (`u16` name length, name, dtype byte `0` for f32, rank byte,
//! `u32` extents, little-endian payload), trailing CRC32 of all prior bytes.

use std::collections::BTreeMap;

use crate::error::{bail, Error, Result};
use crate::numerics::Tensor;

const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub(crate) fn encode(magic: &[u8; 8], kv: &[(String, String)], tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in kv {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            bail!(Validation, "entry {k:?} cannot be stored as a key=value line");
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            bail!(Validation, "tensor {name} cannot be stored");
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parsed container: config entries and tensors in stored order.
pub(crate) struct Contents {
    pub kv: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Contents {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.kv
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("file lacks entry {key}")))
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("entry {key}={raw:?} is not a number")))
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        let p = format!("{prefix}.");
        self.kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
            .collect()
    }
}

pub(crate) fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Contents> {
    if bytes.len() < 8 + 2 + 4 + 4 + 4 || &bytes[..8] != magic {
        bail!(Format, "not a {} file", String::from_utf8_lossy(magic));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        bail!(Format, "CRC mismatch");
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u16()?;
    if version != VERSION {
        bail!(Format, "unsupported version {version}");
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if r.u8()? != DTYPE_F32 {
            bail!(Format, "tensor {name} has an unsupported dtype");
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} extents overflow")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != body.len() {
        bail!(Format, "{} trailing bytes after tensor table", body.len() - r.pos);
    }
    Ok(Contents { kv, tensors })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            bail!(Format, "file truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode(b"TESTFILE", &[("a".into(), "1".into())], &[("x".into(), &t)]).unwrap();
        let c = decode(b"TESTFILE", &bytes).unwrap();
        assert_eq!(c.get("a").unwrap(), "1");
        assert_eq!(c.tensors[0].1, t);
        assert!(decode(b"OTHERMAG", &bytes).is_err());
        assert!(decode(b"TESTFILE", &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_multiline_values() {
        assert!(encode(b"TESTFILE", &[("a".into(), "x\ny".into())], &[]).is_err());
    }
}
