//! `FPEB` embedding files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"FPEB"`                         |
//! | 4      | 2    | format version (`1`)                    |
//! | 6      | 2    | dtype code (`0` = f32 LE)               |
//! | 8      | 4    | frame count `F`                         |
//! | 12     | 4    | tokens per frame `N`                    |
//! | 16     | 4    | embedding dim `D`                       |
//! | 20     | 2    | CLS token index, `0xFFFF` = none        |
//! | 22     | 2    | reserved, must be zero                  |
//! | 24     | F·N·D·4 | payload, frame-major `[F][N][D]`     |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FPEB";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u16 = 0;
pub const NO_CLS: u16 = 0xFFFF;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub frame_count: u32,
    pub tokens: u32,
    pub dim: u32,
    pub cls_index: Option<u16>,
}

impl EmbeddingHeader {
    pub fn payload_len(&self) -> usize {
        self.frame_count as usize * self.tokens as usize * self.dim as usize
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&EMBEDDING_MAGIC);
        out[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[6..8].copy_from_slice(&DTYPE_F32_LE.to_le_bytes());
        out[8..12].copy_from_slice(&self.frame_count.to_le_bytes());
        out[12..16].copy_from_slice(&self.tokens.to_le_bytes());
        out[16..20].copy_from_slice(&self.dim.to_le_bytes());
        out[20..22].copy_from_slice(&self.cls_index.unwrap_or(NO_CLS).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; HEADER_LEN], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes[0..4] != EMBEDDING_MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dtype = u16_at(6);
        if dtype != DTYPE_F32_LE {
            return Err(bad(format!("unsupported dtype code {dtype}")));
        }
        if u16_at(22) != 0 {
            return Err(bad("reserved header bytes are not zero".into()));
        }
        let header = Self {
            frame_count: u32_at(8),
            tokens: u32_at(12),
            dim: u32_at(16),
            cls_index: match u16_at(20) {
                NO_CLS => None,
                idx => Some(idx),
            },
        };
        if header.frame_count == 0 || header.tokens == 0 || header.dim == 0 {
            return Err(bad("frame count, tokens and dim must be positive".into()));
        }
        if let Some(cls) = header.cls_index {
            if u32::from(cls) >= header.tokens {
                return Err(bad(format!(
                    "cls index {cls} out of range for {} tokens",
                    header.tokens
                )));
            }
        }
        Ok(header)
    }
}

/// Token embeddings of one video, `[F][N][D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub header: EmbeddingHeader,
    pub payload: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(header: EmbeddingHeader, payload: Vec<f32>) -> Result<Self> {
        if payload.len() != header.payload_len() {
            return Err(Error::Data(format!(
                "payload has {} values, header implies {}",
                payload.len(),
                header.payload_len()
            )));
        }
        if let Some(cls) = header.cls_index {
            if u32::from(cls) >= header.tokens {
                return Err(Error::Data(format!("cls index {cls} >= tokens {}", header.tokens)));
            }
        }
        Ok(Self { header, payload })
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let stride = self.header.tokens as usize * self.header.dim as usize;
        &self.payload[index * stride..][..stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * 4);
        out.extend_from_slice(&self.header.encode());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{} bytes is shorter than the header", bytes.len()),
            });
        }
        let header = EmbeddingHeader::decode(bytes[..HEADER_LEN].try_into().unwrap(), path)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != header.payload_len() * 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "payload is {} bytes, header implies {}",
                    body.len(),
                    header.payload_len() * 4
                ),
            });
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { header, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Reads only the header of an embedding file.
pub fn read_header(path: &Path) -> Result<EmbeddingHeader> {
    let mut buf = [0u8; HEADER_LEN];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    EmbeddingHeader::decode(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingFile {
        let header = EmbeddingHeader {
            frame_count: 2,
            tokens: 3,
            dim: 4,
            cls_index: Some(0),
        };
        EmbeddingFile::new(header, (0..24).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"FPEB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[0, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 24 * 4);
    }

    #[test]
    fn sentinel_means_no_cls() {
        let mut f = sample();
        f.header.cls_index = None;
        let bytes = f.to_bytes();
        assert_eq!(&bytes[20..22], &[0xFF, 0xFF]);
        let back = EmbeddingFile::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.header.cls_index, None);
    }

    #[test]
    fn rejects_truncated_payload_and_bad_magic() {
        let bytes = sample().to_bytes();
        assert!(EmbeddingFile::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(EmbeddingFile::from_bytes(&wrong, Path::new("x")).is_err());
    }

    #[test]
    fn rejects_cls_out_of_range() {
        let mut bytes = sample().to_bytes();
        bytes[20] = 3;
        assert!(EmbeddingFile::from_bytes(&bytes, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn write_read_round_trip_is_byte_identical(
            frames in 1u32..5, tokens in 1u32..4, dim in 1u32..6,
            cls in proptest::option::of(0u16..4),
            seed in any::<u64>(),
        ) {
            let cls = cls.filter(|c| u32::from(*c) < tokens);
            let header = EmbeddingHeader { frame_count: frames, tokens, dim, cls_index: cls };
            let payload = (0..header.payload_len())
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 40) as u32 | 0x3f00_0000))
                .collect();
            let file = EmbeddingFile::new(header, payload).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("e.fpeb");
            file.write(&path).unwrap();
            let first = std::fs::read(&path).unwrap();
            let back = EmbeddingFile::read(&path).unwrap();
            prop_assert_eq!(&back, &file);
            back.write(&path).unwrap();
            prop_assert_eq!(std::fs::read(&path).unwrap(), first);
            prop_assert_eq!(read_header(&path).unwrap(), header);
        }
    }
}
