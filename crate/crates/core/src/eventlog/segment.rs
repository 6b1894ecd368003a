//! Record framing inside segment files.
//!
//! ```text
//! +-------------+-------------+---------------------------------------------+
//! | len: u32 LE | crc: u32 LE | body: key_len u16 | key | ts_ms i64 | value |
//! +-------------+-------------+---------------------------------------------+
//! ```
//!
//! `len` counts body bytes; `crc` is CRC-32 (IEEE) of the body. All
//! integers little-endian.

use std::fs::File;
use std::io;
use std::os::unix::fs::FileExt;

pub const FRAME_HEADER: usize = 8;
const BODY_FIXED: usize = 2 + 8;
/// Frames larger than this are treated as garbage during recovery.
pub const MAX_FRAME_BODY: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameBody<'a> {
    pub key: &'a [u8],
    pub ingest_ts_ms: i64,
    pub value: &'a [u8],
}

pub fn frame_len(key: &[u8], value: &[u8]) -> usize {
    FRAME_HEADER + BODY_FIXED + key.len() + value.len()
}

/// Appends one framed record to `out`. The caller guarantees
/// `key.len() <= u16::MAX`.
pub fn put_frame(out: &mut Vec<u8>, key: &[u8], ingest_ts_ms: i64, value: &[u8]) {
    let body_len = BODY_FIXED + key.len() + value.len();
    let start = out.len();
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(&ingest_ts_ms.to_le_bytes());
    out.extend_from_slice(value);
    let crc = crc32fast::hash(&out[start + FRAME_HEADER..]);
    out[start + 4..start + 8].copy_from_slice(&crc.to_le_bytes());
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameError {
    /// Not enough bytes for the declared frame.
    Short,
    BadCrc,
    BadBody,
}

/// Parses the frame at the start of `buf`; returns the body and the total
/// frame length.
pub fn parse_frame(buf: &[u8]) -> Result<(FrameBody<'_>, usize), FrameError> {
    if buf.len() < FRAME_HEADER {
        return Err(FrameError::Short);
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if !(BODY_FIXED..=MAX_FRAME_BODY).contains(&len) {
        return Err(FrameError::BadBody);
    }
    if buf.len() < FRAME_HEADER + len {
        return Err(FrameError::Short);
    }
    let body = &buf[FRAME_HEADER..FRAME_HEADER + len];
    if crc32fast::hash(body) != crc {
        return Err(FrameError::BadCrc);
    }
    let key_len = u16::from_le_bytes(body[0..2].try_into().unwrap()) as usize;
    if BODY_FIXED + key_len > len {
        return Err(FrameError::BadBody);
    }
    let key = &body[2..2 + key_len];
    let ts = i64::from_le_bytes(body[2 + key_len..10 + key_len].try_into().unwrap());
    let value = &body[10 + key_len..];
    Ok((
        FrameBody {
            key,
            ingest_ts_ms: ts,
            value,
        },
        FRAME_HEADER + len,
    ))
}

/// Result of scanning a segment file from the start.
#[derive(Debug, Default)]
pub struct ScanResult {
    /// Byte position of each valid record.
    pub positions: Vec<u64>,
    /// Length of the valid prefix.
    pub valid_len: u64,
    /// Total file length; anything past `valid_len` is torn or corrupt.
    pub file_len: u64,
}

pub fn scan(file: &File) -> io::Result<ScanResult> {
    let file_len = file.metadata()?.len();
    let mut data = vec![0u8; file_len as usize];
    file.read_exact_at(&mut data, 0)?;
    let mut positions = Vec::new();
    let mut pos = 0usize;
    while pos < data.len() {
        match parse_frame(&data[pos..]) {
            Ok((_, n)) => {
                positions.push(pos as u64);
                pos += n;
            }
            Err(_) => break,
        }
    }
    Ok(ScanResult {
        positions,
        valid_len: pos as u64,
        file_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_bit_exact() {
        let mut out = Vec::new();
        put_frame(&mut out, b"S01", 1_000, b"{}");
        let body_len = 2 + 3 + 8 + 2;
        assert_eq!(out.len(), 8 + body_len);
        assert_eq!(&out[0..4], &(body_len as u32).to_le_bytes());
        assert_eq!(&out[8..10], &3u16.to_le_bytes());
        assert_eq!(&out[10..13], b"S01");
        assert_eq!(&out[13..21], &1_000i64.to_le_bytes());
        assert_eq!(&out[21..], b"{}");
        assert_eq!(&out[4..8], &crc32fast::hash(&out[8..]).to_le_bytes());
        let (body, n) = parse_frame(&out).unwrap();
        assert_eq!(n, out.len());
        assert_eq!(body.key, b"S01");
        assert_eq!(body.value, b"{}");
        assert_eq!(body.ingest_ts_ms, 1_000);
    }

    #[test]
    fn corruption_detected() {
        let mut out = Vec::new();
        put_frame(&mut out, b"k", 7, b"value");
        for i in 8..out.len() {
            let mut bad = out.clone();
            bad[i] ^= 0x01;
            assert_eq!(parse_frame(&bad).unwrap_err(), FrameError::BadCrc, "byte {i}");
        }
        for cut in 0..out.len() {
            assert!(parse_frame(&out[..cut]).is_err());
        }
    }
}
