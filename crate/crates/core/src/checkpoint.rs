//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMDA"                      magic
//! u32                         format version
//! u32                         record count
//! per record:
//!   u32 + bytes               parameter name (UTF-8)
//!   u32 + bytes               group name (UTF-8)
//!   u32                       rank (always 2)
//!   u64 × rank                shape
//!   f64 × product(shape)      values, row-major
//! ```
//!
//! Encoding is a pure function of the parameter set, so equal parameters
//! produce byte-identical files on every platform.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"MMDA";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        write_str(&mut out, &p.name);
        write_str(&mut out, p.group.as_str());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Loads values into `params`. Names, groups, order and shapes must match exactly.
pub fn decode_into(bytes: &[u8], params: &mut ParamSet) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing MMDA magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {count} tensors, model has {}", params.len())));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = r.string()?;
        let group = r.string()?;
        let expected = params.get(id);
        if name != expected.name || group != expected.group.as_str() {
            return Err(Error::Checkpoint(format!(
                "record `{name}` ({group}) does not match model parameter `{}` ({})",
                expected.name, expected.group
            )));
        }
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("`{name}` has unsupported rank {rank}")));
        }
        let shape = (r.u64()? as usize, r.u64()? as usize);
        if shape != expected.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                expected.value.shape()
            )));
        }
        let raw = r.take(shape.0 * shape.1 * 8)?;
        let dst = params.value_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(())
}

pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_into(path: impl AsRef<Path>, params: &mut ParamSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(&bytes, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn small() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register("a", Group::Encoder, Some(0), Tensor::from_vec(1, 2, vec![1.5, -0.0]));
        ps.register("b", Group::VisualExperts, None, Tensor::from_vec(2, 1, vec![f64::MIN_POSITIVE, 3.0]));
        ps
    }

    #[test]
    fn golden_bytes() {
        let bytes = encode(&small());
        assert_eq!(&bytes[..12], b"MMDA\x01\0\0\0\x02\0\0\0");
        // name "a", group "encoder", rank 2, shape (1, 2)
        assert_eq!(&bytes[12..17], b"\x01\0\0\0a");
        assert_eq!(&bytes[17..28], b"\x07\0\0\0encoder");
        assert_eq!(&bytes[28..32], &2u32.to_le_bytes());
        assert_eq!(&bytes[32..48], [1u64.to_le_bytes(), 2u64.to_le_bytes()].concat().as_slice());
        assert_eq!(&bytes[48..56], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[56..64], &(-0.0f64).to_le_bytes());
    }

    #[test]
    fn mismatches_are_load_errors() {
        let bytes = encode(&small());
        let mut other = ParamSet::new();
        other.register("a", Group::Encoder, Some(0), Tensor::zeros(1, 3));
        other.register("b", Group::VisualExperts, None, Tensor::zeros(2, 1));
        assert!(matches!(decode_into(&bytes, &mut other), Err(Error::Checkpoint(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode_into(&bad_version, &mut small()).is_err());
        assert!(decode_into(&bytes[..bytes.len() - 1], &mut small()).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_into(&trailing, &mut small()).is_err());
        assert!(decode_into(b"NOPE", &mut small()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(values in prop::collection::vec(any::<f64>(), 6)) {
            let mut ps = ParamSet::new();
            ps.register("x", Group::DecoderCore, None, Tensor::from_vec(2, 3, values.clone()));
            let bytes = encode(&ps);
            let mut back = ParamSet::new();
            back.register("x", Group::DecoderCore, None, Tensor::zeros(2, 3));
            decode_into(&bytes, &mut back).unwrap();
            let bits: Vec<u64> = back.value(crate::params::ParamId(0)).data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
