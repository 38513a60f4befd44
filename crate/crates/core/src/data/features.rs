//! Binary feature-grid container.
//!
//! ```text
//! "CMLF" | version u16 | G u32 | D u32 | count u32 |
//! count × ( id u64 | G·D × f32 ) | crc32(records) u32
//! ```
//! All integers and floats are little-endian. The checksum covers the record
//! section only (everything between the header and the checksum).

use std::path::Path;

use super::FeatureGrid;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CMLF";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

pub fn encode_features(grids: &[FeatureGrid]) -> Result<Vec<u8>> {
    let (g, d) = match grids.first() {
        Some(f) => (f.grid_size, f.dim),
        None => (0, 0),
    };
    if grids.iter().any(|f| f.grid_size != g || f.dim != d) {
        return Err(Error::Data("all feature grids in a file must share G and D".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + grids.len() * (8 + 4 * g * d) + 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(g as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    for f in grids {
        out.extend_from_slice(&f.id.to_le_bytes());
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("expected at least {HEADER_LEN} header bytes, found {}", bytes.len()),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", &bytes[..4], FEATURE_MAGIC),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let g = u32_at(bytes, 6) as usize;
    let d = u32_at(bytes, 10) as usize;
    let count = u32_at(bytes, 14) as usize;
    let record = 8 + 4 * g * d;
    let expected = HEADER_LEN + count * record + 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let crc_off = expected - 4;
    let stored = u32_at(bytes, crc_off);
    let actual = crc32fast::hash(&bytes[HEADER_LEN..crc_off]);
    if stored != actual {
        return Err(Error::Format {
            offset: crc_off as u64,
            message: format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        });
    }
    let mut grids = Vec::with_capacity(count);
    for r in 0..count {
        let off = HEADER_LEN + r * record;
        let id = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let data = bytes[off + 8..off + record]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grid = FeatureGrid::new(id, g, d, data).map_err(|e| Error::Format {
            offset: off as u64,
            message: e.to_string(),
        })?;
        grids.push(grid);
    }
    Ok(grids)
}

pub fn write_features(path: impl AsRef<Path>, grids: &[FeatureGrid]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(grids)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureGrid>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(id: u64, g: usize, d: usize, seed: f32) -> FeatureGrid {
        let data = (0..g * d).map(|i| seed * i as f32 - 0.25).collect();
        FeatureGrid::new(id, g, d, data).unwrap()
    }

    #[test]
    fn documented_length_for_single_value() {
        let f = FeatureGrid::new(0, 1, 1, vec![0.0]).unwrap();
        let bytes = encode_features(&[f]).unwrap();
        // 18-byte header + (8-byte id + 4-byte value) + 4-byte crc
        assert_eq!(bytes.len(), 34);
        assert_eq!(&bytes[..4], b"CMLF");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let grids: Vec<_> = (0..5).map(|i| grid(i * 11, 9, 4, 0.1 + i as f32)).collect();
        let bytes = encode_features(&grids).unwrap();
        assert_eq!(decode_features(&bytes).unwrap(), grids);
        assert!(decode_features(&encode_features(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_lengths() {
        let bytes = encode_features(&[grid(1, 3, 2, 0.5)]).unwrap();
        let err = decode_features(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("expected {} bytes", bytes.len())), "{msg}");
        assert!(msg.contains(&format!("found {}", bytes.len() - 3)), "{msg}");
    }

    #[test]
    fn bad_magic_and_checksum_report_offsets() {
        let mut bytes = encode_features(&[grid(1, 3, 2, 0.5)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { offset: 0, .. })));

        let n = bytes.len();
        bytes[HEADER_LEN + 9] ^= 0x40;
        match decode_features(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, n - 4),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn mixed_shapes_are_rejected() {
        assert!(encode_features(&[grid(0, 2, 2, 1.0), grid(1, 3, 2, 1.0)]).is_err());
    }
}
