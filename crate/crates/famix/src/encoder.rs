//! Joint vision/language embedding encoders.
//!
//! Style mining only needs three things from a vision-language model: a
//! low-level visual stage producing stride-4 features, the remaining visual
//! stages projected into the joint space, and a text encoder into the same
//! space. [`JointEncoder`] captures exactly that, so any model with a
//! splittable visual stem satisfies the contract. Two implementations ship:
//!
//! - [`StubEncoder`]: global-average-pool plus one linear projection. Its
//!   Jacobian is simple enough to double-check analytically, which is what
//!   gradient tests use it for.
//! - [`TinyJointEncoder`]: an actual convolutional trunk (the same structure
//!   as the segmentation backbone) with a projection head and a hashed
//!   bag-of-tokens text pathway, deterministically initialized. It is the
//!   smallest real encoder the toolkit ships and the default for mining.
//!
//! Encoders are frozen: nothing here ever writes to parameters, and
//! [`JointEncoder::parameter_checksum`] lets callers prove it.

use crate::model::{ModelConfig, RestCache, Trunk};
use crate::nn::{self, Linear, Params, Stage};
use crate::stats::FeatureMap;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("feature map has {got} channels, encoder expects {expected}")]
    FeatureChannels { expected: usize, got: usize },
    #[error("image has {got} channels, encoder expects {expected}")]
    ImageChannels { expected: usize, got: usize },
    #[error("upstream gradient has length {got}, embedding dim is {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("unknown encoder id `{0}`")]
    UnknownEncoder(String),
}

/// Vector-Jacobian product of the visual pathway, to be fed the gradient of
/// some scalar loss with respect to the embedding.
pub type VisualVjp<'a> = Box<dyn FnOnce(&[f64]) -> Result<Array3<f64>, EncoderError> + 'a>;

pub trait JointEncoder {
    fn id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    /// Channel count of the low-level (stride 4) feature stage.
    fn feature_channels(&self) -> usize;
    /// Low-level visual stage: image (h x w x 3, values around [0, 1]) to
    /// stride-4 features.
    fn encode_low(&self, image: &Array3<f64>) -> Result<FeatureMap, EncoderError>;
    /// Remaining visual stages plus projection into the joint space.
    fn embed_visual(&self, features: &FeatureMap) -> Result<Vec<f64>, EncoderError>;
    /// Same as [`Self::embed_visual`], also returning the VJP closure.
    fn embed_visual_with_grad<'a>(
        &'a self,
        features: &FeatureMap,
    ) -> Result<(Vec<f64>, VisualVjp<'a>), EncoderError>;
    /// Text pathway into the joint space.
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>, EncoderError>;
    /// Stable hash over every parameter; mining must leave it unchanged.
    fn parameter_checksum(&self) -> u64;
    /// Parameter arena holding a segmentation-compatible trunk, when the
    /// encoder has one to donate as pretrained initialization.
    fn trunk_donor(&self) -> Option<&Params> {
        None
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn tokenize(prompt: &str) -> Vec<u64> {
    prompt
        .split_whitespace()
        .map(|t| fnv1a(t.to_lowercase().as_bytes()))
        .collect()
}

/// Minimal joint-embedding encoder: pooled features through one linear map,
/// text through a seeded hash. Used for gradient checks and fast tests.
pub struct StubEncoder {
    params: Params,
    channel_proj: Linear,
    visual_proj: Linear,
    feature_channels: usize,
    embed_dim: usize,
    text_seed: u64,
}

impl StubEncoder {
    pub fn new(feature_channels: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let channel_proj = Linear::new(&mut params, "stub.channel", Stage::Encoder, 3, feature_channels, &mut rng);
        let visual_proj = Linear::new(
            &mut params,
            "stub.visual",
            Stage::Encoder,
            feature_channels,
            embed_dim,
            &mut rng,
        );
        Self {
            params,
            channel_proj,
            visual_proj,
            feature_channels,
            embed_dim,
            text_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }
}

impl JointEncoder for StubEncoder {
    fn id(&self) -> &str {
        "stub"
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    fn encode_low(&self, image: &Array3<f64>) -> Result<FeatureMap, EncoderError> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(EncoderError::ImageChannels { expected: 3, got: c });
        }
        // 4x average pooling then a per-pixel channel projection
        let (oh, ow) = (h.div_euclid(4).max(1), w.div_euclid(4).max(1));
        let mut out = Array3::zeros((oh, ow, self.feature_channels));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut pooled = [0.0f64; 3];
                let mut count = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        let (iy, ix) = (oy * 4 + dy, ox * 4 + dx);
                        if iy < h && ix < w {
                            for ch in 0..3 {
                                pooled[ch] += image[[iy, ix, ch]];
                            }
                            count += 1.0;
                        }
                    }
                }
                let pooled: Vec<f64> = pooled.iter().map(|v| v / count).collect();
                let projected = self.channel_proj.forward(&self.params, &pooled);
                for (ch, v) in projected.into_iter().enumerate() {
                    out[[oy, ox, ch]] = v;
                }
            }
        }
        Ok(crate::stats::FeatureMap::new(out).expect("finite stub features"))
    }

    fn embed_visual(&self, features: &FeatureMap) -> Result<Vec<f64>, EncoderError> {
        if features.channels() != self.feature_channels {
            return Err(EncoderError::FeatureChannels {
                expected: self.feature_channels,
                got: features.channels(),
            });
        }
        let pooled = nn::global_avg_pool(features.data());
        Ok(self.visual_proj.forward(&self.params, &pooled))
    }

    fn embed_visual_with_grad<'a>(
        &'a self,
        features: &FeatureMap,
    ) -> Result<(Vec<f64>, VisualVjp<'a>), EncoderError> {
        let embedding = self.embed_visual(features)?;
        let (h, w, _) = features.data().dim();
        let vjp: VisualVjp<'a> = Box::new(move |upstream: &[f64]| {
            if upstream.len() != self.embed_dim {
                return Err(EncoderError::EmbeddingDim {
                    expected: self.embed_dim,
                    got: upstream.len(),
                });
            }
            let dpooled = self.visual_proj.backward_input(&self.params, upstream);
            Ok(nn::global_avg_pool_backward(&dpooled, h, w))
        });
        Ok((embedding, vjp))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>, EncoderError> {
        // deterministic pseudo-random direction derived from the text
        let mut rng = ChaCha8Rng::seed_from_u64(self.text_seed ^ fnv1a(prompt.as_bytes()));
        let mut v: Vec<f64> = (0..self.embed_dim)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    fn parameter_checksum(&self) -> u64 {
        self.params.checksum(|_| true)
    }
}

/// Deterministically initialized convolutional joint encoder.
///
/// The visual trunk mirrors the segmentation backbone, so a segmentation
/// model can be initialized from these weights; the projection head and the
/// hashed-token text pathway live in the same parameter arena.
pub struct TinyJointEncoder {
    params: Params,
    trunk: Trunk,
    visual_proj: Linear,
    text_embed: nn::BlockId,
    text_proj: Linear,
    vocab: usize,
    embed_dim: usize,
}

/// Default weight seed for the shipped tiny encoder.
pub const TINY_ENCODER_SEED: u64 = 0x11f0_57a7;

impl TinyJointEncoder {
    pub fn new(config: ModelConfig, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let trunk = Trunk::new(&mut params, config, &mut rng);
        let visual_proj = Linear::new(
            &mut params,
            "enc.visual_proj",
            Stage::Encoder,
            config.c4,
            embed_dim,
            &mut rng,
        );
        let vocab = 4096;
        let table: Vec<f64> = (0..vocab * embed_dim)
            .map(|_| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                z * 0.5
            })
            .collect();
        let text_embed = params.add(
            "enc.text_embed",
            Stage::Encoder,
            &[vocab, embed_dim],
            table,
        );
        let text_proj = Linear::new(
            &mut params,
            "enc.text_proj",
            Stage::Encoder,
            embed_dim,
            embed_dim,
            &mut rng,
        );
        Self {
            params,
            trunk,
            visual_proj,
            text_embed,
            text_proj,
            vocab,
            embed_dim,
        }
    }

    /// The shipped default: desk-scale trunk, 32-d joint space.
    pub fn default_tiny(num_classes_hint: usize) -> Self {
        Self::new(ModelConfig::desk(num_classes_hint.max(1)), 32, TINY_ENCODER_SEED)
    }

    /// Trunk weights, for initializing a segmentation model.
    pub fn trunk_params(&self) -> &Params {
        &self.params
    }

    fn check_features(&self, features: &FeatureMap) -> Result<(), EncoderError> {
        if features.channels() != self.trunk.config.c1 {
            return Err(EncoderError::FeatureChannels {
                expected: self.trunk.config.c1,
                got: features.channels(),
            });
        }
        Ok(())
    }

    fn forward_tail(&self, features: &FeatureMap) -> (Vec<f64>, RestCache, (usize, usize)) {
        let (f4, cache) = self.trunk.forward_rest(&self.params, features.data());
        let pooled = nn::global_avg_pool(&f4);
        let embedding = self.visual_proj.forward(&self.params, &pooled);
        let (h4, w4, _) = f4.dim();
        (embedding, cache, (h4, w4))
    }
}

impl JointEncoder for TinyJointEncoder {
    fn id(&self) -> &str {
        "tiny"
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn feature_channels(&self) -> usize {
        self.trunk.config.c1
    }

    fn encode_low(&self, image: &Array3<f64>) -> Result<FeatureMap, EncoderError> {
        let (_, _, c) = image.dim();
        if c != self.trunk.config.in_channels {
            return Err(EncoderError::ImageChannels {
                expected: self.trunk.config.in_channels,
                got: c,
            });
        }
        let (f1, _) = self.trunk.forward_low(&self.params, image);
        Ok(FeatureMap::new(f1).expect("finite trunk output"))
    }

    fn embed_visual(&self, features: &FeatureMap) -> Result<Vec<f64>, EncoderError> {
        self.check_features(features)?;
        Ok(self.forward_tail(features).0)
    }

    fn embed_visual_with_grad<'a>(
        &'a self,
        features: &FeatureMap,
    ) -> Result<(Vec<f64>, VisualVjp<'a>), EncoderError> {
        self.check_features(features)?;
        let (embedding, cache, (h4, w4)) = self.forward_tail(features);
        let vjp: VisualVjp<'a> = Box::new(move |upstream: &[f64]| {
            if upstream.len() != self.embed_dim {
                return Err(EncoderError::EmbeddingDim {
                    expected: self.embed_dim,
                    got: upstream.len(),
                });
            }
            let dpooled = self.visual_proj.backward_input(&self.params, upstream);
            let df4 = nn::global_avg_pool_backward(&dpooled, h4, w4);
            Ok(self.trunk.backward_rest_input(&self.params, &cache, &df4))
        });
        Ok((embedding, vjp))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>, EncoderError> {
        let tokens = tokenize(prompt);
        let table = self.params.data(self.text_embed);
        let mut pooled = vec![0.0; self.embed_dim];
        if tokens.is_empty() {
            return Ok(self.text_proj.forward(&self.params, &pooled));
        }
        for tok in &tokens {
            let row = (tok % self.vocab as u64) as usize;
            let slice = &table[row * self.embed_dim..(row + 1) * self.embed_dim];
            for (p, &v) in pooled.iter_mut().zip(slice) {
                *p += v;
            }
        }
        let n = tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(self.text_proj.forward(&self.params, &pooled))
    }

    fn parameter_checksum(&self) -> u64 {
        self.params.checksum(|_| true)
    }

    fn trunk_donor(&self) -> Option<&Params> {
        Some(&self.params)
    }
}

/// Instantiates a shipped encoder by id (`tiny` or `stub`).
pub fn create(id: &str) -> Result<Box<dyn JointEncoder>, EncoderError> {
    match id {
        "tiny" => Ok(Box::new(TinyJointEncoder::default_tiny(4))),
        "stub" => Ok(Box::new(StubEncoder::new(16, 32, 7))),
        other => Err(EncoderError::UnknownEncoder(other.to_string())),
    }
}
