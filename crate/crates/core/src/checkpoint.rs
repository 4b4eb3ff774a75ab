//! Binary container shared by generator/critic and classifier checkpoints:
//! magic, format version, a `key = value` header, then named f64 blobs.
//! Files are written to a temporary name and renamed into place.

use std::fs;
use std::path::Path;

use gwnet_tensor::{Shape, Tensor};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8] = b"GWN1";
pub const PERCEP_MAGIC: &[u8] = b"GWNP1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_container(magic: &[u8], header: &KeyValues, blobs: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = header.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for (name, t) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().0 {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_container(bytes: &[u8], magic: &[u8]) -> Result<(KeyValues, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(magic.len())? != magic {
        return Err(Error::Checkpoint(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let hlen = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let header = KeyValues::parse(text)?;
    let count = r.u64()?;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Checkpoint(format!("name: {e}")))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let shape = Shape(dims);
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflow")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        blobs.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, blobs))
}

pub fn write_container(path: &Path, magic: &[u8], header: &KeyValues, blobs: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode_container(magic, header, blobs)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path, magic: &[u8]) -> Result<(KeyValues, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, magic).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut kv = KeyValues::new();
        kv.set("variant", "adain");
        let t = Tensor::new(Shape::new(1, 2, 1, 2), vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let bytes = encode_container(MODEL_MAGIC, &kv, &[("a.w".into(), t.clone())]);
        let (h, blobs) = decode_container(&bytes, MODEL_MAGIC).unwrap();
        assert_eq!(h, kv);
        assert_eq!(blobs[0].0, "a.w");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&blobs[0].1), bits(&t));
    }

    #[test]
    fn rejects_wrong_magic_version_and_truncation() {
        let bytes = encode_container(MODEL_MAGIC, &KeyValues::new(), &[]);
        assert!(decode_container(&bytes, PERCEP_MAGIC).is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(decode_container(&v, MODEL_MAGIC).unwrap_err().to_string().contains("version"));
        assert!(decode_container(&bytes[..bytes.len() - 1], MODEL_MAGIC).is_err());
    }
}
