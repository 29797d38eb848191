//! Binary checkpoint container.
//!
//! Layout: magic `AGDI`, format version (u32 LE), length-prefixed JSON arch
//! block, entry count (u32 LE), then per entry: length-prefixed UTF-8 name,
//! group tag byte (0 = encoder, 1 = llm), rank (u32 LE), dims (u32 LE each),
//! raw 64-bit little-endian float data. Trailing CRC-32 of all preceding
//! bytes. All length prefixes are u32 LE.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, Group, ParamSet};
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"AGDI";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch_json = serde_json::to_vec(&params.arch)?;
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(p.group.tag());
        let dims = p.tensor.dims();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < 8 {
        return Err(Error::Integrity("truncated header".into()));
    }
    // CRC covers everything before the trailing 4 bytes.
    if bytes.len() < 12 {
        return Err(Error::Integrity("file too short for checksum".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 4,
    };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch_len = cur.u32()? as usize;
    let arch_bytes = cur.take(arch_len)?;
    let arch: Arch = serde_json::from_slice(arch_bytes)
        .map_err(|e| Error::Format(format!("arch block: {e}")))?;
    let count = cur.u32()? as usize;
    let mut params = ParamSet::new(arch);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let group = Group::from_tag(cur.u8()?)?;
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("entry {name:?}: bad rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 8)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
        params
            .insert(&name, group, tensor)
            .map_err(|_| Error::Format(format!("duplicate entry {name:?}")))?;
    }
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last entry",
            body.len() - cur.pos
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pretrain::init_params;
    use crate::model::Arch;

    fn small_params() -> ParamSet {
        let mut arch = Arch::toy(16);
        arch.layers = 1;
        arch.width = 8;
        arch.heads = 2;
        arch.mlp_hidden = 16;
        arch.embed_dim = 4;
        arch.enc_hidden = 6;
        arch.image_h = 4;
        arch.image_w = 4;
        arch.max_seq = 12;
        init_params(&arch, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = small_params();
        let bytes = encode(&p).unwrap();
        let q = decode(&bytes).unwrap();
        assert!(p.bitwise_eq(&q));
        // save -> load -> save produces identical bytes
        let bytes2 = encode(&q).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let p = small_params();
        let mut bytes = encode(&p).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_version_error() {
        let p = small_params();
        let mut bytes = encode(&p).unwrap();
        bytes[4] = 9;
        // CRC must be fixed up so the version check is what fires.
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version {
                found: 9,
                expected: CHECKPOINT_VERSION
            })
        ));
    }

    #[test]
    fn truncation_and_bitflip_are_integrity_errors() {
        let p = small_params();
        let bytes = encode(&p).unwrap();
        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(decode(truncated), Err(Error::Integrity(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn tensor_bytes_match_independent_little_endian_dump() {
        let p = small_params();
        let bytes = encode(&p).unwrap();
        // Independent check: the raw bytes of the first tensor's data must
        // appear verbatim in the container.
        let (name, param) = p.iter().next().unwrap();
        let mut dump = Vec::new();
        for v in param.tensor.data() {
            dump.extend_from_slice(&v.to_le_bytes());
        }
        let pos = bytes
            .windows(dump.len())
            .position(|w| w == dump.as_slice());
        assert!(pos.is_some(), "raw dump of {name:?} not found");
    }
}
