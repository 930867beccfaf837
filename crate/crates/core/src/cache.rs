//! `.aecd` embedding cache files.
//!
//! Little-endian layout:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `AECD`                            |
//! | 4      | 2         | version (`u16`, 1)                      |
//! | 6      | 1         | dtype (`u8`, 0 = f32)                   |
//! | 7      | 2         | stride (`u16`)                          |
//! | 9      | 4         | D (`u32`)                               |
//! | 13     | 4         | h (`u32`)                               |
//! | 17     | 4         | w (`u32`)                               |
//! | 21     | 4·D·h·w   | payload, row-major cells, D contiguous  |
//! | end-4  | 4         | CRC-32 (IEEE) of the payload bytes      |

use std::path::Path;

use crate::embed::EmbeddingMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::TileSpec;

pub const MAGIC: &[u8; 4] = b"AECD";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 21;

pub fn cache_file_name(timestamp: &str, tile: &TileSpec) -> String {
    format!("{timestamp}_{}_{}.aecd", tile.x0, tile.y0)
}

/// Serializes an embedding map; values are stored as `f32`.
pub fn encode<T: Scalar>(emb: &EmbeddingMap<T>) -> Result<Vec<u8>> {
    let stride = u16::try_from(emb.stride()).map_err(|_| Error::InvalidParameter {
        field: "stride",
        reason: format!("{} does not fit in u16", emb.stride()),
    })?;
    let as_u32 = |v: usize, field: &'static str| {
        u32::try_from(v).map_err(|_| Error::InvalidParameter {
            field,
            reason: format!("{v} does not fit in u32"),
        })
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * emb.data().len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&stride.to_le_bytes());
    out.extend_from_slice(&as_u32(emb.dim(), "dim")?.to_le_bytes());
    out.extend_from_slice(&as_u32(emb.h(), "h")?.to_le_bytes());
    out.extend_from_slice(&as_u32(emb.w(), "w")?.to_le_bytes());
    for v in emb.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingMap<T>> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(Error::BadDtype(dtype));
    }
    let stride = u16_at(7) as usize;
    let dim = u32_at(9) as usize;
    let h = u32_at(13) as usize;
    let w = u32_at(17) as usize;
    let payload_len = dim
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DimensionMismatch(format!("header dims overflow D={dim} h={h} w={w}")))?;
    let expected = HEADER_LEN + payload_len + 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = u32_at(HEADER_LEN + payload_len);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| {
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            T::from_f32(v).unwrap_or_else(T::nan)
        })
        .collect();
    EmbeddingMap::new(dim, h, w, stride, data)
}

pub fn write_cache<T: Scalar>(emb: &EmbeddingMap<T>, path: &Path) -> Result<()> {
    let bytes = encode(emb)?;
    let tmp = path.with_extension("aecd.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache<T: Scalar>(path: &Path) -> Result<EmbeddingMap<T>> {
    decode(&std::fs::read(path)?)
}
