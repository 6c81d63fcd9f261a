//! On-disk sample format: one directory per sample holding a `meta.json`
//! sidecar and one `{modality}.tensor` file per modality. A tensor file is a
//! UTF-8 JSON header line `{"shape":[...],"dtype":"f32"}` followed by the
//! little-endian `f32` payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let header = serde_json::to_string(&TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 1 + 4 * t.len());
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            message: "empty tensor file".into(),
        });
    }
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
        offset: bytes.len() as u64,
        message: "header line is not terminated".into(),
    })?;
    let header: TensorHeader = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::Format {
        offset: e.column().saturating_sub(1) as u64,
        message: format!("malformed header: {e}"),
    })?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            offset: 0,
            message: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let payload = &bytes[newline + 1..];
    let count: usize = header.shape.iter().product();
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::Format {
            offset: (newline + 1) as u64,
            message: format!(
                "header shape {:?} expects {expected} payload bytes, found {}",
                header.shape,
                payload.len()
            ),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(header.shape, data)
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    sample_id: u64,
    label: usize,
    ground_truth_patterns: BTreeSet<String>,
    modalities: Vec<String>,
}

pub fn write_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SampleMeta {
        sample_id: sample.id,
        label: sample.label,
        ground_truth_patterns: sample.patterns.clone(),
        modalities: sample.modalities.keys().cloned().collect(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    for (name, t) in &sample.modalities {
        let path = dir.join(format!("{name}.tensor"));
        fs::write(&path, encode_tensor(t)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let path = dir.join("meta.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&bytes)?;
    let mut modalities = BTreeMap::new();
    for name in meta.modalities {
        let path = dir.join(format!("{name}.tensor"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        modalities.insert(name, decode_tensor(&bytes)?);
    }
    Ok(Sample {
        id: meta.sample_id,
        label: meta.label,
        patterns: meta.ground_truth_patterns,
        modalities,
    })
}

/// Writes a sample to `dir` and reads it back.
pub fn persist_roundtrip(sample: &Sample, dir: &Path) -> Result<Sample> {
    write_sample(sample, dir)?;
    read_sample(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_format_error() {
        assert!(matches!(decode_tensor(&[]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32; 6]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes.truncate(bytes.len() - 5);
        match decode_tensor(&bytes) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("expects 24"), "{message}");
                assert!(message.contains("found 19"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_header_reports_offset() {
        let bytes = b"{\"shape\":[2,,3],\"dtype\":\"f32\"}\n".to_vec();
        match decode_tensor(&bytes) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset < 20),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode_tensor(b"{\"shape\":[1]"), Err(Error::Format { .. })));
    }

    #[test]
    fn header_is_json_line() {
        let t = Tensor::new(vec![1, 2], vec![1.5f32, -2.0]).unwrap();
        let bytes = encode_tensor(&t);
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        assert_eq!(line, br#"{"shape":[1,2],"dtype":"f32"}"#);
        assert_eq!(&bytes[line.len() + 1..line.len() + 5], &1.5f32.to_le_bytes());
    }
}
