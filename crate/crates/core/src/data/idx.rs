//! IDX file parsing (the standard MNIST distribution format), with
//! transparent gzip support.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub enum IdxData {
    /// `(N, rows, cols)` with pixel bytes rescaled to [0,1].
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Parse an IDX image file (magic 0x00000803, three big-endian dims) or
/// label file (magic 0x00000801, one dim). Image bytes map 0..255 → [0,1].
pub fn parse_idx(path: &Path) -> Result<IdxData> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 {
        return Err(Error::format(
            path,
            format!("header needs 8 bytes, file has {}", bytes.len()),
        ));
    }
    let magic = be_u32(&bytes, 0);
    let (ndims, is_images) = match magic {
        MAGIC_IMAGES => (3usize, true),
        MAGIC_LABELS => (1, false),
        other => {
            return Err(Error::format(
                path,
                format!("bad magic 0x{other:08x}, expected 0x{MAGIC_IMAGES:08x} (images) or 0x{MAGIC_LABELS:08x} (labels)"),
            ));
        }
    };
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::format(
            path,
            format!("header needs {header_len} bytes, file has {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(&bytes, 4 + 4 * i) as usize).collect();
    let payload: usize = dims.iter().product();
    let expected = header_len + payload;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {expected} bytes ({payload} after header), got {}",
                bytes.len()
            ),
        ));
    }
    let body = &bytes[header_len..];
    if is_images {
        let data: Vec<f64> = body.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(IdxData::Images(Tensor::new(dims, data)?))
    } else {
        Ok(IdxData::Labels(body.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn image_fixture() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        f.extend_from_slice(&1u32.to_be_bytes());
        f.extend_from_slice(&2u32.to_be_bytes());
        f.extend_from_slice(&2u32.to_be_bytes());
        f.extend_from_slice(&[0, 255, 0, 255]);
        f
    }

    #[test]
    fn parses_handcrafted_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        std::fs::write(&path, image_fixture()).unwrap();
        match parse_idx(&path).unwrap() {
            IdxData::Images(t) => {
                assert_eq!(t.shape(), &[1, 2, 2]);
                assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn parses_labels_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Vec::new();
        f.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        f.extend_from_slice(&2u32.to_be_bytes());
        f.extend_from_slice(&[7, 2]);
        let path = dir.path().join("labels.idx");
        std::fs::write(&path, &f).unwrap();
        match parse_idx(&path).unwrap() {
            IdxData::Labels(l) => assert_eq!(l, vec![7, 2]),
            _ => panic!("expected labels"),
        }

        let gz_path = dir.path().join("labels.idx.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&f).unwrap();
        std::fs::write(&gz_path, enc.finish().unwrap()).unwrap();
        match parse_idx(&gz_path).unwrap() {
            IdxData::Labels(l) => assert_eq!(l, vec![7, 2]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = image_fixture();
        f.pop();
        let path = dir.path().join("short.idx");
        std::fs::write(&path, &f).unwrap();
        let err = parse_idx(&path).unwrap_err().to_string();
        assert!(err.contains("expected 20"), "{err}");
        assert!(err.contains("got 19"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut bytes = 0xdeadbeefu32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&0u32.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = parse_idx(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }
}
