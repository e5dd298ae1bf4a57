//! Feature files: `"MMDF"`, `u32` version, `u32` header length, a UTF-8 JSON
//! header, then `rows x cols` little-endian `f64` values in row-major order.
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"MMDF";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureModality {
    Image,
    Lidar,
    Occ,
    Desc,
    Question,
    /// TMM output, written by `fuse`.
    Fused,
    /// CMA output, written by `fuse`.
    Abstract,
}

impl FeatureModality {
    pub fn file_stem(self) -> &'static str {
        match self {
            FeatureModality::Image => "image",
            FeatureModality::Lidar => "lidar",
            FeatureModality::Occ => "occ",
            FeatureModality::Desc => "desc",
            FeatureModality::Question => "question",
            FeatureModality::Fused => "fused",
            FeatureModality::Abstract => "abstract",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub dtype: String,
    pub shape: [usize; 2],
    pub modality: FeatureModality,
    pub sample_id: String,
}

impl FeatureHeader {
    pub fn new(modality: FeatureModality, sample_id: impl Into<String>, shape: (usize, usize)) -> Self {
        Self {
            dtype: "f64".into(),
            shape: [shape.0, shape.1],
            modality,
            sample_id: sample_id.into(),
        }
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode_feature(header: &FeatureHeader, m: &Matrix) -> Result<Vec<u8>> {
    if header.shape != [m.rows(), m.cols()] {
        return Err(Error::shape("feature header", (header.shape[0], header.shape[1]), m.shape()));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature(bytes: &[u8]) -> Result<(FeatureHeader, Matrix)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"MMDF\""));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(bytes.len(), "truncated prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = PREFIX_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: declared {header_len} bytes"),
        ));
    }
    let header: FeatureHeader = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| format_err(PREFIX_LEN, format!("bad header JSON: {e}")))?;
    if header.dtype != "f64" {
        return Err(format_err(PREFIX_LEN, format!("unsupported dtype {:?}", header.dtype)));
    }
    let [rows, cols] = header.shape;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format_err(PREFIX_LEN, "shape overflows"))?;
    let actual = bytes.len() - payload_start;
    if actual < expected {
        // the first value that cannot be read in full
        let at = payload_start + actual - actual % 8;
        return Err(format_err(
            at,
            format!("truncated payload: {actual} of {expected} bytes for shape {rows}x{cols}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            payload_start + expected,
            format!("{} trailing bytes after {rows}x{cols} payload", actual - expected),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[payload_start..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(format_err(payload_start + 8 * k, "non-finite value"));
        }
        data.push(v);
    }
    Ok((header, Matrix::from_vec(rows, cols, data)?))
}

pub fn write_feature(path: &Path, header: &FeatureHeader, m: &Matrix) -> Result<()> {
    std::fs::write(path, encode_feature(header, m)?)?;
    Ok(())
}

pub fn read_feature(path: &Path) -> Result<(FeatureHeader, Matrix)> {
    decode_feature(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (FeatureHeader, Matrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::random_normal(3, 4, 0.0, 1.0, &mut rng);
        let h = FeatureHeader::new(FeatureModality::Lidar, "scene-0001", m.shape());
        let bytes = encode_feature(&h, &m).unwrap();
        (h, m, bytes)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (h, m, bytes) = sample();
        let (h2, m2) = decode_feature(&bytes).unwrap();
        assert_eq!(h, h2);
        let bits = |x: &Matrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&m2));
    }

    #[test]
    fn header_json_layout() {
        let (_, _, bytes) = sample();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"dtype": "f64", "shape": [3, 4], "modality": "lidar", "sample_id": "scene-0001"})
        );
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let (_, _, bytes) = sample();
        let payload_start = bytes.len() - 96;
        // cut in the middle of the 6th value
        let cut = payload_start + 5 * 8 + 3;
        match decode_feature(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, payload_start + 40),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prefix_errors() {
        let (_, _, bytes) = sample();
        assert!(matches!(decode_feature(b"MMDX\x01\0\0\0"), Err(Error::Format { offset: 0, .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_feature(&v), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_feature(&bytes[..20]), Err(Error::Format { offset: 20, .. })));
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_feature(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn header_shape_must_match_matrix() {
        let h = FeatureHeader::new(FeatureModality::Image, "x", (2, 2));
        assert!(encode_feature(&h, &Matrix::zeros(2, 3)).is_err());
    }
}
