use ndarray::Array3;

use super::{EncoderBackend, EncoderError, EncoderOutput};
use crate::tokenizer::TokenBatch;

/// Weight of the position component; the token component gets
/// `sqrt(1 - POSITION_WEIGHT^2)` so each coordinate keeps unit variance.
const POSITION_WEIGHT: f64 = 0.3;

const TOKEN_TAG: u64 = 0x746f_6b65_6e00_0001;
const POSITION_TAG: u64 = 0x706f_7369_7400_0002;

/// Deterministic stand-in encoder.
///
/// The hidden state of token `v` at position `t` mixes a token vector and
/// a position vector, both pseudorandom functions of the seed with i.i.d.
/// coordinates uniform on `[-sqrt(3), sqrt(3)]`. Only integer hashing and
/// correctly rounded IEEE operations are involved, so outputs are
/// bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    dim: usize,
    seed: u64,
}

pub fn reference_backend(dim: usize, seed: u64) -> ReferenceBackend {
    assert!(dim >= 1, "reference backend needs dim >= 1");
    ReferenceBackend { dim, seed }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ReferenceBackend {
    fn unit_vector(&self, tag: u64, key: u64, out: &mut [f64]) {
        let base = splitmix64(splitmix64(self.seed ^ tag) ^ key);
        let half_width = 3f64.sqrt();
        for (d, slot) in out.iter_mut().enumerate() {
            let bits = splitmix64(base ^ (d as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
            let unit = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *slot = (2.0 * unit - 1.0) * half_width;
        }
    }

    /// Hidden state for one (token, position) pair.
    pub fn token_state(&self, token: u32, position: usize) -> Vec<f32> {
        let mut u = vec![0.0; self.dim];
        let mut w = vec![0.0; self.dim];
        self.unit_vector(TOKEN_TAG, token as u64, &mut u);
        self.unit_vector(POSITION_TAG, position as u64, &mut w);
        let a = (1.0 - POSITION_WEIGHT * POSITION_WEIGHT).sqrt();
        u.iter()
            .zip(&w)
            .map(|(&u, &w)| (a * u + POSITION_WEIGHT * w) as f32)
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EncoderBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("reference:dim={}:seed={}", self.dim, self.seed)
    }

    fn thread_safe(&self) -> bool {
        true
    }

    fn evaluate(&self, batch: &TokenBatch) -> Result<EncoderOutput<f32>, EncoderError> {
        let (b, l) = batch.ids.dim();
        let mut hidden = Array3::zeros((b, l, self.dim));
        for i in 0..b {
            for t in 0..l {
                let state = self.token_state(batch.ids[[i, t]], t);
                for (d, v) in state.into_iter().enumerate() {
                    hidden[[i, t, d]] = v;
                }
            }
        }
        Ok(EncoderOutput {
            hidden_states: hidden,
            attention_mask: batch.attention_mask.clone(),
            dim: self.dim,
        })
    }
}
