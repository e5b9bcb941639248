//! Binary feature files.
//!
//! Layout (little-endian): `b"TMF1"`, u32 version (=1), u32 T, u32 D,
//! u32 d_global, f32 feature_fps, f32 duration_s, then T*D f32 values
//! row-major. Anything else is rejected.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TMF1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 4 * 2;

pub fn encode_feature_bytes(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.features().len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, seq.len() as u32, seq.dim() as u32, seq.global_dim() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(seq.feature_fps() as f32).to_le_bytes());
    out.extend_from_slice(&(seq.duration_s() as f32).to_le_bytes());
    for v in seq.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_bytes(video_id: &str, bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TMF1".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let d_global = u32_at(16) as usize;
    let fps = f32_at(20);
    let duration = f32_at(24);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("payload size overflow for {t}x{d}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header ({t}x{d}) requires {expected}",
            payload.len()
        )));
    }
    if t == 0 || d == 0 {
        return Err(Error::Format(format!("empty shape {t}x{d}")));
    }
    let features = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(video_id, t, d, d_global, features, fps as f64, duration as f64)
}

/// Reads a feature file; the video id is the file stem.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_bytes(&id, &bytes)
}

pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_bytes(seq)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> FeatureSequence {
        let values = (0..8).map(|i| i as f32 * 0.5 - 1.0).collect();
        FeatureSequence::new("v", 4, 2, 1, values, 0.9375, 4.0).unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tmf");
        let seq = sample();
        write_feature_file(&seq, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, seq);
        assert_eq!((back.len(), back.dim()), (4, 2));
        assert_eq!(back.feature_fps(), 0.9375);
    }

    #[test]
    fn minimal_sequence() {
        let seq = FeatureSequence::new("m", 1, 1, 0, vec![0.0], 1.0, 0.0).unwrap();
        let bytes = encode_feature_bytes(&seq);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(decode_feature_bytes("m", &bytes).unwrap(), seq);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = encode_feature_bytes(&sample());
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_feature_bytes("v", &bytes), Err(Error::Format(_))));
        assert!(matches!(decode_feature_bytes("v", &bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_feature_bytes(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_feature_bytes("v", &bytes), Err(Error::Format(_))));
        let mut bytes = encode_feature_bytes(&sample());
        bytes[4] = 2;
        assert!(matches!(decode_feature_bytes("v", &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_is_data_error() {
        let mut bytes = encode_feature_bytes(&sample());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_feature_bytes("v", &bytes), Err(Error::Data(_))));
    }

    #[test]
    fn seeded_random_round_trips_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t = rng.gen_range(1..40);
            let d = rng.gen_range(1..12);
            let d_g = rng.gen_range(0..=d);
            let fps: f32 = rng.gen_range(0.1..4.0);
            let duration = t as f32 / fps + rng.gen_range(0.0..10.0f32);
            let values: Vec<f32> = (0..t * d)
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff))
                .map(|v| if v.is_finite() { v } else { 1.5 })
                .collect();
            let seq = FeatureSequence::new("r", t, d, d_g, values, fps as f64, duration as f64).unwrap();
            let bytes = encode_feature_bytes(&seq);
            let back = decode_feature_bytes("r", &bytes).unwrap();
            assert_eq!(encode_feature_bytes(&back), bytes);
            assert!(back
                .features()
                .iter()
                .zip(seq.features())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
