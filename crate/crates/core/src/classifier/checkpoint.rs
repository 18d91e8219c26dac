//! Checkpoint file, little-endian:
//!
//! ```text
//! "MQCK" | version u32 | K u32 | D u32 | t u64 | config_hash u64
//! W (K*D) | b (K) | m_W (K*D) | v_W (K*D) | m_b (K) | v_b (K)    all f64
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ClassifierError, ClassifierState};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub classes: usize,
    pub dim: usize,
    pub step: u64,
    pub config_hash: u64,
}

pub fn save_checkpoint<T: Scalar>(
    state: &ClassifierState<T>,
    config_hash: u64,
    path: impl AsRef<Path>,
) -> Result<(), ClassifierError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&encode(state, config_hash))?;
    out.flush()?;
    Ok(())
}

pub(crate) fn encode<T: Scalar>(state: &ClassifierState<T>, config_hash: u64) -> Vec<u8> {
    let (k, d) = state.weights.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + (3 * k * d + 3 * k) * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    let values = state
        .weights
        .iter()
        .chain(&state.bias)
        .chain(&state.m_weights)
        .chain(&state.v_weights)
        .chain(&state.m_bias)
        .chain(&state.v_bias);
    for v in values {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    buf
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(ClassifierState<T>, CheckpointHeader), ClassifierError> {
    decode(&fs::read(path)?)
}

pub(crate) fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ClassifierState<T>, CheckpointHeader), ClassifierError> {
    if bytes.len() < 4 {
        return Err(ClassifierError::ShapeHeaderMismatch(format!(
            "{} byte file",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(ClassifierError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ClassifierError::ShapeHeaderMismatch("header truncated".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(ClassifierError::VersionUnsupported(version));
    }
    let header = CheckpointHeader {
        classes: u32_at(8) as usize,
        dim: u32_at(12) as usize,
        step: u64_at(16),
        config_hash: u64_at(24),
    };
    let (k, d) = (header.classes, header.dim);
    let expected = HEADER_LEN as u64 + (3 * k as u64 * d as u64 + 3 * k as u64) * 8;
    if bytes.len() as u64 != expected {
        return Err(ClassifierError::ShapeHeaderMismatch(format!(
            "header says K={k}, D={d} ({expected} bytes), file has {} bytes",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())));
    let mut next = || values.next().expect("length checked");
    let weights = Array2::from_shape_simple_fn((k, d), &mut next);
    let bias = Array1::from_shape_simple_fn(k, &mut next);
    let m_weights = Array2::from_shape_simple_fn((k, d), &mut next);
    let v_weights = Array2::from_shape_simple_fn((k, d), &mut next);
    let m_bias = Array1::from_shape_simple_fn(k, &mut next);
    let v_bias = Array1::from_shape_simple_fn(k, &mut next);
    Ok((
        ClassifierState {
            weights,
            bias,
            m_weights,
            v_weights,
            m_bias,
            v_bias,
            step: header.step,
        },
        header,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(k: usize, d: usize, seed: u64) -> ClassifierState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.gen_range(-1.0..1.0);
        ClassifierState {
            weights: Array2::from_shape_simple_fn((k, d), &mut g),
            bias: Array1::from_shape_simple_fn(k, &mut g),
            m_weights: Array2::from_shape_simple_fn((k, d), &mut g),
            v_weights: Array2::from_shape_simple_fn((k, d), || 0.5),
            m_bias: Array1::from_shape_simple_fn(k, &mut g),
            v_bias: Array1::from_shape_simple_fn(k, || 0.25),
            step: 1234,
        }
    }

    #[test]
    fn roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.mqck");
        let state = random_state(3, 5, 1);
        save_checkpoint(&state, 0xdead_beef, &path).unwrap();
        let (back, header) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(
            header,
            CheckpointHeader {
                classes: 3,
                dim: 5,
                step: 1234,
                config_hash: 0xdead_beef
            }
        );
        assert_eq!(encode(&back, 0xdead_beef), fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_dim_detected_at_use_site() {
        let state = random_state(2, 4, 2);
        let (back, _) = decode::<f64>(&encode(&state, 0)).unwrap();
        assert!(matches!(
            back.check_dim(8),
            Err(ClassifierError::ShapeHeaderMismatch(_))
        ));
        assert!(back.check_dim(4).is_ok());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode(&random_state(2, 2, 3), 0);
        let short = &bytes[..bytes.len() - 8];
        assert!(matches!(
            decode::<f64>(short),
            Err(ClassifierError::ShapeHeaderMismatch(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode::<f64>(&bytes), Err(ClassifierError::BadMagic(_))));
        assert!(matches!(
            load_checkpoint::<f64>("/nonexistent/head.mqck"),
            Err(ClassifierError::Io(_))
        ));
    }

    #[test]
    fn f32_state_survives_roundtrip() {
        let s64 = random_state(2, 3, 4);
        let s32 = ClassifierState {
            weights: s64.weights.mapv(|v| v as f32),
            bias: s64.bias.mapv(|v| v as f32),
            m_weights: s64.m_weights.mapv(|v| v as f32),
            v_weights: s64.v_weights.mapv(|v| v as f32),
            m_bias: s64.m_bias.mapv(|v| v as f32),
            v_bias: s64.v_bias.mapv(|v| v as f32),
            step: 9,
        };
        let (back, _) = decode::<f32>(&encode(&s32, 1)).unwrap();
        assert_eq!(back, s32);
    }
}
