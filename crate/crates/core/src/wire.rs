//! Bit-exact binary packet format.
//!
//! Layout (all integers little-endian, floats IEEE 754 binary64
//! little-endian, row-major):
//!
//! ```text
//! magic      4 bytes  "CEDP"
//! version    u16      currently 1
//! client_id  u32
//! round      u32
//! n_layers   u16
//! per layer:
//!   layer_id u16
//!   d_val    u32
//!   d_key    u32
//!   delta    f64 × d_val·d_key
//!   gram     f64 × d_key·d_key
//! crc32      u32      over every preceding byte
//! ```
//!
//! Decoding rejects bad magic, unsupported versions, truncation, trailing
//! bytes, non-finite floats, and checksum mismatches, each with its own
//! error.

use crc::{Crc, CRC_32_ISO_HDLC};
use thiserror::Error;

use crate::collab::EditPacket;
use crate::editor::LayerEdit;
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"CEDP";
pub const VERSION: u16 = 1;

const CRC32: Crc<u32> = Crc::<u32>::new(&CRC_32_ISO_HDLC);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {found:?}, expected \"CEDP\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported packet version {version}")]
    UnsupportedVersion { version: u16 },

    #[error("packet truncated: needed {needed} bytes, only {available} available")]
    Truncated { needed: u64, available: u64 },

    #[error("{extra} unexpected trailing byte(s) after the packet body")]
    TrailingBytes { extra: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },

    #[error("non-finite float in layer entry {entry}")]
    NonFinite { entry: usize },
}

pub fn encode_packet(packet: &EditPacket) -> Vec<u8> {
    let body: usize = packet
        .entries
        .iter()
        .map(|e| 2 + 4 + 4 + 8 * (e.delta.data().len() + e.gram.data().len()))
        .sum();
    let mut out = Vec::with_capacity(4 + 2 + 4 + 4 + 2 + body + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&packet.client_id.to_le_bytes());
    out.extend_from_slice(&packet.round.to_le_bytes());
    out.extend_from_slice(&(packet.entries.len() as u16).to_le_bytes());
    for entry in &packet.entries {
        out.extend_from_slice(&entry.layer_id.to_le_bytes());
        out.extend_from_slice(&(entry.delta.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(entry.delta.cols() as u32).to_le_bytes());
        for v in entry.delta.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in entry.gram.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC32.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(WireError::Truncated {
                needed: (self.pos + n) as u64,
                available: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, entry: usize) -> Result<Vec<f64>, WireError> {
        let raw = self.take(count * 8)?;
        let mut out = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(WireError::NonFinite { entry });
            }
            out.push(v);
        }
        Ok(out)
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<EditPacket, WireError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic { found: magic });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion { version });
    }
    let client_id = r.u32()?;
    let round = r.u32()?;
    let n_layers = r.u16()?;
    let mut entries = Vec::with_capacity(n_layers as usize);
    for entry_idx in 0..n_layers as usize {
        let layer_id = r.u16()?;
        let d_val = r.u32()? as u64;
        let d_key = r.u32()? as u64;
        // reject absurd dimensions before allocating; an honest packet of
        // this size could not fit in the buffer anyway
        let delta_len = d_val as u128 * d_key as u128;
        let gram_len = d_key as u128 * d_key as u128;
        let needed = r.pos as u128 + 8 * (delta_len + gram_len) + 4;
        if needed > bytes.len() as u128 {
            return Err(WireError::Truncated {
                needed: needed.min(u64::MAX as u128) as u64,
                available: bytes.len() as u64,
            });
        }
        let delta = r.f64s(delta_len as usize, entry_idx)?;
        let gram = r.f64s(gram_len as usize, entry_idx)?;
        entries.push(LayerEdit {
            layer_id,
            delta: Matrix::new(d_val as usize, d_key as usize, delta),
            gram: Matrix::new(d_key as usize, d_key as usize, gram),
        });
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(WireError::TrailingBytes {
            extra: bytes.len() - r.pos,
        });
    }
    let computed = CRC32.checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(WireError::BadCrc { stored, computed });
    }
    Ok(EditPacket {
        client_id,
        round,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_gaussian;
    use proptest::prelude::*;

    fn sample_packet(client_id: u32, round: u32, layers: &[(u16, usize, usize)]) -> EditPacket {
        let entries = layers
            .iter()
            .map(|&(layer_id, d_val, d_key)| LayerEdit {
                layer_id,
                delta: random_gaussian(d_val, d_key, layer_id as u64 + 1, &[1]),
                gram: random_gaussian(d_key, d_key, layer_id as u64 + 1, &[2]),
            })
            .collect();
        EditPacket {
            client_id,
            round,
            entries,
        }
    }

    #[test]
    fn empty_packet_round_trips() {
        let p = EditPacket {
            client_id: 7,
            round: 3,
            entries: vec![],
        };
        let bytes = encode_packet(&p);
        assert_eq!(decode_packet(&bytes).unwrap(), p);
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let p = sample_packet(1, 0, &[(0, 3, 4)]);
        let mut bytes = encode_packet(&p);
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x01;
        assert!(matches!(
            decode_packet(&bytes),
            Err(WireError::BadCrc { .. })
        ));
    }

    #[test]
    fn bad_magic_is_its_own_error() {
        let p = sample_packet(1, 0, &[(0, 2, 2)]);
        let mut bytes = encode_packet(&p);
        bytes[0] = b'X';
        assert!(matches!(
            decode_packet(&bytes),
            Err(WireError::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let p = sample_packet(1, 0, &[]);
        let mut bytes = encode_packet(&p);
        bytes[4] = 99;
        assert!(matches!(
            decode_packet(&bytes),
            Err(WireError::UnsupportedVersion { version: 99 })
        ));
    }

    #[test]
    fn truncation_is_reported_distinctly() {
        let p = sample_packet(1, 0, &[(0, 3, 4)]);
        let bytes = encode_packet(&p);
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            decode_packet(cut),
            Err(WireError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let p = sample_packet(1, 0, &[(0, 2, 2)]);
        let mut bytes = encode_packet(&p);
        bytes.push(0);
        assert!(matches!(
            decode_packet(&bytes),
            Err(WireError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn oversized_dims_cannot_force_allocation() {
        let p = sample_packet(1, 0, &[(0, 2, 2)]);
        let mut bytes = encode_packet(&p);
        // inflate d_val in the first entry header (offset: 16 header + 2 id)
        bytes[18] = 0xff;
        bytes[19] = 0xff;
        bytes[20] = 0xff;
        bytes[21] = 0x7f;
        assert!(matches!(
            decode_packet(&bytes),
            Err(WireError::Truncated { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn packets_round_trip_bit_exactly(
            client_id in any::<u32>(),
            round in any::<u32>(),
            layers in proptest::collection::vec((any::<u16>(), 1usize..5, 1usize..5), 0..3),
        ) {
            let p = sample_packet(client_id, round, &layers);
            let bytes = encode_packet(&p);
            let decoded = decode_packet(&bytes).unwrap();
            prop_assert_eq!(&decoded, &p);
            // bit-exactness: re-encoding reproduces the same bytes
            prop_assert_eq!(encode_packet(&decoded), bytes);
        }

        #[test]
        fn any_single_byte_corruption_is_rejected(
            flip_bit in 0u8..8,
            pos_frac in 0.0f64..1.0,
        ) {
            let p = sample_packet(3, 1, &[(0, 3, 2), (1, 3, 2)]);
            let mut bytes = encode_packet(&p);
            let idx = ((bytes.len() - 1) as f64 * pos_frac) as usize;
            bytes[idx] ^= 1 << flip_bit;
            prop_assert!(decode_packet(&bytes).is_err());
        }
    }
}
