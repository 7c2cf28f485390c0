//! GGE embedding-file format: a little-endian, versioned container for
//! 32-bit-float token-sequence records.
//!
//! Layout: magic `GGEM`; u32 version (= 1); u32 count; u32 tokens; u32 dim;
//! u32 flags (bit 0: ids present); `count` u64 ids when flagged; then
//! `count * tokens * dim` f32 values, record-major, token-row-major within
//! each record. All integers and floats little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::EmbeddingStore;

const MAGIC: [u8; 4] = *b"GGEM";
const VERSION: u32 = 1;
const FLAG_IDS: u32 = 1;
const HEADER_LEN: usize = 24;

/// Serialize a store to its exact GGE byte image.
pub fn encode_gge(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let count = store.count();
    for (what, v) in [("count", count), ("tokens", store.tokens()), ("dim", store.dim())] {
        if v > u32::MAX as usize {
            return Err(Error::Format {
                what: "overflow",
                detail: format!("{what} {v} exceeds the format's 32-bit limit"),
            });
        }
    }
    let flags = if store.ids().is_some() { FLAG_IDS } else { 0 };
    let mut bytes = Vec::with_capacity(
        HEADER_LEN + store.ids().map_or(0, |ids| ids.len() * 8) + store.raw().len() * 4,
    );
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(count as u32).to_le_bytes());
    bytes.extend_from_slice(&(store.tokens() as u32).to_le_bytes());
    bytes.extend_from_slice(&(store.dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&flags.to_le_bytes());
    if let Some(ids) = store.ids() {
        for id in ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
    }
    for v in store.raw() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Parse a GGE byte image. Strict: the input must be exactly the encoded
/// length, and every header field is checked with a distinct error.
pub fn decode_gge(bytes: &[u8]) -> Result<EmbeddingStore> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            what: "truncation",
            detail: format!("expected at least {HEADER_LEN} header bytes, got {}", bytes.len()),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format {
            what: "magic",
            detail: format!("expected GGEM, got {:?}", &bytes[0..4]),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format {
            what: "version",
            detail: format!("expected version {VERSION}, got {version}"),
        });
    }
    let count = u32_at(8) as u64;
    let tokens = u32_at(12) as u64;
    let dim = u32_at(16) as u64;
    let flags = u32_at(20);
    if flags & !FLAG_IDS != 0 {
        return Err(Error::Format {
            what: "flags",
            detail: format!("unknown flag bits 0x{:x}", flags & !FLAG_IDS),
        });
    }
    if tokens == 0 || dim == 0 {
        return Err(Error::Format {
            what: "extents",
            detail: format!("extents must be positive, got {tokens}x{dim}"),
        });
    }
    let has_ids = flags & FLAG_IDS != 0;
    let ids_bytes = if has_ids { count * 8 } else { 0 };
    let payload_values = count
        .checked_mul(tokens)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Format {
            what: "overflow",
            detail: format!("count {count} x {tokens}x{dim} overflows"),
        })?;
    let expected = HEADER_LEN as u64 + ids_bytes + payload_values * 4;
    if expected > usize::MAX as u64 {
        return Err(Error::Format {
            what: "overflow",
            detail: format!("file of {expected} bytes exceeds addressable memory"),
        });
    }
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            what: "truncation",
            detail: format!("expected {expected} bytes, got {}", bytes.len()),
        });
    }

    let mut off = HEADER_LEN;
    let ids = if has_ids {
        let mut ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            ids.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        Some(ids)
    } else {
        None
    };
    let mut data = Vec::with_capacity(payload_values as usize);
    for _ in 0..payload_values {
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    EmbeddingStore::new(tokens as usize, dim as usize, data, ids)
}

/// Write a store to disk in GGE format.
pub fn write_gge(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let bytes = encode_gge(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a GGE file from disk.
pub fn read_gge(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gge(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample_store(ids: bool) -> EmbeddingStore {
        let data: Vec<f32> = (0..18).map(|v| v as f32 * 0.25 - 2.0).collect();
        let ids = ids.then(|| vec![7, 42, 9000]);
        EmbeddingStore::new(2, 3, data, ids).unwrap()
    }

    #[test]
    fn round_trip_rewrites_identical_bytes() {
        for with_ids in [false, true] {
            let store = sample_store(with_ids);
            let bytes = encode_gge(&store).unwrap();
            let reread = decode_gge(&bytes).unwrap();
            assert_eq!(reread, store);
            assert_eq!(encode_gge(&reread).unwrap(), bytes);
        }
    }

    #[test]
    fn empty_store_is_a_bare_header() {
        let store = EmbeddingStore::new(4, 8, vec![], None).unwrap();
        let bytes = encode_gge(&store).unwrap();
        assert_eq!(bytes.len(), 24);
        let reread = decode_gge(&bytes).unwrap();
        assert_eq!(reread.count(), 0);
        assert_eq!((reread.tokens(), reread.dim()), (4, 8));
    }

    #[test]
    fn truncation_names_expected_and_actual_lengths() {
        let bytes = encode_gge(&sample_store(false)).unwrap();
        let want = bytes.len();
        let err = decode_gge(&bytes[..want - 1]).unwrap_err();
        match err {
            Error::Format { what: "truncation", detail } => {
                assert!(detail.contains(&want.to_string()), "{detail}");
                assert!(detail.contains(&(want - 1).to_string()), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_gge(&sample_store(true)).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_gge(&bytes),
            Err(Error::Format { what: "truncation", .. })
        ));
    }

    #[test]
    fn bad_magic_version_and_flags_are_distinct_errors() {
        let good = encode_gge(&sample_store(false)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_gge(&bad), Err(Error::Format { what: "magic", .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_gge(&bad), Err(Error::Format { what: "version", .. })));

        let mut bad = good.clone();
        bad[20] = 0xFE;
        assert!(matches!(decode_gge(&bad), Err(Error::Format { what: "flags", .. })));

        assert!(matches!(
            decode_gge(&good[..10]),
            Err(Error::Format { what: "truncation", .. })
        ));
    }

    #[test]
    fn header_count_overflow_is_reported() {
        let mut bytes = encode_gge(&sample_store(false)).unwrap();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_gge(&bytes), Err(Error::Format { what: "overflow", .. })));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.gge");
        let store = sample_store(true);
        write_gge(&store, &path).unwrap();
        assert_eq!(read_gge(&path).unwrap(), store);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("absent.gge");
        assert!(matches!(read_gge(&path), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn any_store_round_trips(
            tokens in 1usize..5,
            dim in 1usize..5,
            count in 0usize..6,
            with_ids in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let n = tokens * dim * count;
            let data: Vec<f32> = (0..n)
                .map(|i| {
                    let z = super::super::derive_seed(seed, i as u64);
                    (z % 1000) as f32 * 0.001 - 0.5
                })
                .collect();
            let ids = with_ids.then(|| (0..count as u64).map(|i| i * 3 + 1).collect());
            let store = EmbeddingStore::new(tokens, dim, data, ids).unwrap();
            let reread = decode_gge(&encode_gge(&store).unwrap()).unwrap();
            prop_assert_eq!(reread, store);
        }
    }
}
