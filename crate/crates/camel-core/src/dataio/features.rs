//! Binary feature files: magic "CAMELFEAT1", u32 frame count, u32 feature
//! dim, float32 little-endian row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 10] = b"CAMELFEAT1";

/// A `T x F` matrix of acoustic-like frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                shape: vec![frames, dim],
                detail: "frames and dim must be >= 1".into(),
            });
        }
        if data.len() != frames * dim {
            return Err(Error::InvalidShape {
                op: "feature_sequence",
                shape: vec![frames, dim],
                detail: format!("payload length {}", data.len()),
            });
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.dim], self.data.clone()).unwrap()
    }
}

pub fn save_features(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + feats.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(feats.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    for &v in &feats.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ferr = |offset: u64, detail: String| Error::Format {
        path: path.display().to_string(),
        offset,
        detail,
    };
    if bytes.len() < FEATURE_MAGIC.len() + 8 {
        return Err(ferr(
            bytes.len() as u64,
            format!("header truncated: {} bytes", bytes.len()),
        ));
    }
    if &bytes[..FEATURE_MAGIC.len()] != FEATURE_MAGIC {
        return Err(ferr(0, "bad magic, not a feature file".into()));
    }
    let t = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(ferr(10, format!("dimensions {t} x {f}: frames and dim must be >= 1")));
    }
    let expected = 18 + t * f * 4;
    if bytes.len() != expected {
        return Err(ferr(
            bytes.len().min(expected) as u64,
            format!("payload length mismatch: expected {expected} bytes, got {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[18..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSequence::new(t, f, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        let feats = FeatureSequence::new(5, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        save_features(&path, &feats).unwrap();
        assert_eq!(load_features(&path).unwrap(), feats);
        // Second write is byte-identical.
        let path2 = dir.path().join("y.feat");
        save_features(&path2, &load_features(&path).unwrap()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_names_lengths() {
        let feats = FeatureSequence::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.feat");
        save_features(&path, &feats).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        match load_features(&path) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("expected 34 bytes"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.feat");
        let mut buf = Vec::new();
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        fs::write(&path, buf).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format { .. })));
    }
}
