//! The generative models, all behind one object-safe trait so the registry
//! can hand any of them to the training loop and the sampling command.

pub mod autograd;
pub mod checkpoint;
pub mod folk_rnn;
pub mod gpt2;
pub mod music_vae;
pub mod nn;
pub mod tensor;

use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ComponentSpec;
use crate::data::Batch;
use crate::tokenize::Vocabulary;
use nn::{Adam, ParamSet};

/// Hard cap on generation length, independent of what a config requests.
pub const MAX_SAMPLE_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("batch contains id {id} but the vocabulary has {vocab_size} entries")]
    VocabOverflow { id: u32, vocab_size: usize },
    #[error("input length {len} exceeds the model context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("operation {operation} needs a {required} model, this is {actual}")]
    WrongModelType { operation: &'static str, required: &'static str, actual: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// Scalar loss plus named metrics from one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
}

/// Posterior parameters and a reparameterized draw for one sequence.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub sample: Vec<f64>,
    /// The noise used for `sample`, recorded so the draw is reproducible.
    pub noise: Vec<f64>,
}

impl LatentCode {
    pub fn from_noise(mean: Vec<f64>, log_variance: Vec<f64>, noise: Vec<f64>) -> Self {
        let sample = mean
            .iter()
            .zip(&log_variance)
            .zip(&noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Self { mean, log_variance, sample, noise }
    }
}

/// Closed-form KL divergence between the diagonal Gaussian posterior and the
/// standard-normal prior: `0.5 * sum(mean^2 + exp(logvar) - logvar - 1)`.
pub fn kl_divergence(code: &LatentCode) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (m, lv) in code.mean.iter().zip(&code.log_variance) {
        if !m.is_finite() || !lv.is_finite() {
            return Err(ModelError::NonFinite("latent code".into()));
        }
        total += m * m + lv.exp() - lv - 1.0;
    }
    Ok(0.5 * total)
}

/// Serializable ChaCha rng state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// The common model interface: one training step, deterministic validation
/// loss, autoregressive sampling, and access to everything a checkpoint
/// archive needs. The latent-space operations default to a type error and
/// are overridden by models that have a latent space.
pub trait GenerativeModel: Send {
    fn type_name(&self) -> &str;
    /// The component spec this model was built from.
    fn spec(&self) -> &ComponentSpec;
    fn vocab(&self) -> &Arc<Vocabulary>;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    fn parameters(&self) -> &ParamSet;
    fn parameters_mut(&mut self) -> &mut ParamSet;
    fn optimizer(&self) -> &Adam;
    fn optimizer_mut(&mut self) -> &mut Adam;
    fn rng_state(&self) -> RngState;
    fn set_rng_state(&mut self, state: RngState);

    /// Run one optimization step on a batch, returning the loss and metrics.
    fn training_step(&mut self, batch: &Batch, global_step: u64) -> Result<StepOutput, ModelError>;

    /// Loss on a batch without updating parameters; deterministic (no
    /// dropout, no posterior sampling).
    fn validation_loss(&self, batch: &Batch, global_step: u64) -> Result<f64, ModelError>;

    /// Generate `n` id sequences, each up to `max_len` tokens (capped at
    /// [`MAX_SAMPLE_LEN`]). Outputs contain no special ids.
    fn sample(
        &self,
        n: usize,
        max_len: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<u32>>;

    fn encode_latent(&self, _ids: &[u32], _rng: &mut ChaCha8Rng) -> Result<LatentCode, ModelError> {
        Err(ModelError::WrongModelType {
            operation: "encode_latent",
            required: "music_vae",
            actual: self.type_name().to_string(),
        })
    }

    fn decode_latent(
        &self,
        _z: &[f64],
        _temperature: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>, ModelError> {
        Err(ModelError::WrongModelType {
            operation: "decode_latent",
            required: "music_vae",
            actual: self.type_name().to_string(),
        })
    }

    /// Decode along the spherical path between the posterior means of two
    /// sequences; endpoints decode the means themselves.
    fn interpolate(
        &self,
        _seq_a: &[u32],
        _seq_b: &[u32],
        _steps: usize,
    ) -> Result<Vec<Vec<u32>>, ModelError> {
        Err(ModelError::WrongModelType {
            operation: "interpolate",
            required: "music_vae",
            actual: self.type_name().to_string(),
        })
    }
}

pub(crate) fn check_batch(batch: &Batch, vocab_size: usize) -> Result<(), ModelError> {
    let max = batch.max_id();
    if max as usize >= vocab_size {
        return Err(ModelError::VocabOverflow { id: max, vocab_size });
    }
    Ok(())
}

/// Spherical linear interpolation; falls back to linear for nearly
/// parallel or nearly zero vectors.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-9 || nb < 1e-9 {
        return a.iter().zip(b).map(|(x, y)| x + (y - x) * t).collect();
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega.abs() < 1e-6 {
        return a.iter().zip(b).map(|(x, y)| x + (y - x) * t).collect();
    }
    let sin = omega.sin();
    let wa = ((1.0 - t) * omega).sin() / sin;
    let wb = (t * omega).sin() / sin;
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

pub(crate) fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::data::mix_seed(&[seed, salt]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_zero_for_standard_normal_posterior() {
        let code = LatentCode::from_noise(vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        assert_eq!(kl_divergence(&code).unwrap(), 0.0);
    }

    #[test]
    fn kl_half_for_unit_mean() {
        let code = LatentCode::from_noise(vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]);
        assert!((kl_divergence(&code).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_elementwise_oracle() {
        let mut rng_state: u64 = 42;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..100 {
            let mean: Vec<f64> = (0..8).map(|_| next()).collect();
            let logvar: Vec<f64> = (0..8).map(|_| next()).collect();
            let code =
                LatentCode::from_noise(mean.clone(), logvar.clone(), vec![0.0; 8]);
            // independent elementwise sum
            let mut oracle = 0.0;
            for d in 0..8 {
                oracle += 0.5 * (mean[d].powi(2) + logvar[d].exp() - logvar[d] - 1.0);
            }
            let got = kl_divergence(&code).unwrap();
            assert!((got - oracle).abs() < 1e-9);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn kl_rejects_non_finite() {
        let code = LatentCode::from_noise(vec![f64::NAN], vec![0.0], vec![0.0]);
        assert!(kl_divergence(&code).is_err());
    }

    #[test]
    fn slerp_endpoints_exact() {
        let a = vec![1.0, 0.0, 2.0];
        let b = vec![0.0, -1.0, 1.0];
        assert_eq!(slerp(&a, &b, 0.0), a);
        let end = slerp(&a, &b, 1.0);
        for (x, y) in end.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let _ = rng.gen::<f64>();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
    }
}
