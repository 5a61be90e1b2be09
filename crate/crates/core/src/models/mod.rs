//! The networks and the bundle that holds them together with the projections,
//! the contrastive temperature and the trainability mask.

pub mod lm;
pub mod nn;
pub mod text_encoder;
pub mod vision;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use lm::{argmax, extract_ret_embedding, EXTEND_NOISE, LanguageModel, LmOutput, Projections, VisualInput};
pub use text_encoder::TextEncoder;
pub use vision::VisionEncoder;

use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::params::{hash_tensor, ParamAccess, ParamSet, TrainableMask};
use crate::tensor::{Scalar, Tensor};
use crate::text::{Tokenizer, LM_CONTEXT};

/// Lower bound on the contrastive temperature.
pub const MIN_TAU: f64 = 1e-3;
pub const INIT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub context: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Dimension `d` of the shared retrieval space.
    pub embed_dim: usize,
    pub vision: EncoderConfig,
    pub text: EncoderConfig,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = EncoderConfig {
            width: 64,
            layers: 2,
            heads: 4,
            ff: 128,
        };
        ModelConfig {
            embed_dim: 64,
            vision: enc,
            text: enc,
            lm: LmConfig {
                width: 128,
                layers: 2,
                heads: 4,
                ff: 256,
                context: LM_CONTEXT,
            },
        }
    }
}

impl ModelConfig {
    /// Much narrower layers, with a deeper language model than the default so
    /// gradient checks cover a longer residual chain; used where finite
    /// differences need many forward passes.
    pub fn tiny() -> Self {
        let enc = EncoderConfig {
            width: 8,
            layers: 2,
            heads: 2,
            ff: 16,
        };
        ModelConfig {
            embed_dim: 8,
            vision: enc,
            text: enc,
            lm: LmConfig {
                width: 16,
                layers: 4,
                heads: 4,
                ff: 32,
                context: LM_CONTEXT,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, width: usize, heads: usize| {
            if width == 0 || heads == 0 || width % heads != 0 {
                Err(Error::invalid(format!("{what}: width {width} not divisible into {heads} heads")))
            } else {
                Ok(())
            }
        };
        check("vision", self.vision.width, self.vision.heads)?;
        check("text", self.text.width, self.text.heads)?;
        check("lm", self.lm.width, self.lm.heads)?;
        if self.embed_dim == 0 || self.lm.context == 0 {
            return Err(Error::invalid("embedding dimension and context must be positive"));
        }
        Ok(())
    }
}

/// All parameters of the system plus the per-element trainability mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Scalar> {
    pub config: ModelConfig,
    pub vision: VisionEncoder<T>,
    pub text: TextEncoder<T>,
    pub lm: LanguageModel<T>,
    pub proj: Projections<T>,
    /// Holds the single `log_tau` scalar.
    pub temperature: ParamSet<T>,
    pub mask: TrainableMask,
}

pub const LOG_TAU: &str = "log_tau";

impl<T: Scalar> ModelBundle<T> {
    /// Randomly initialized bundle over the tokenizer's base vocabulary,
    /// with every parameter frozen.
    pub fn new(config: ModelConfig, tok: &Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = VisionEncoder::new(config.vision, config.embed_dim, &mut rng);
        let text = TextEncoder::new(config.text, tok.base_size(), config.embed_dim, &mut rng);
        let lm = LanguageModel::new(config.lm, tok.base_size(), &mut rng);
        let proj = Projections::new(config.lm.width, config.embed_dim, &mut rng);
        let mut temperature = ParamSet::new("");
        temperature.insert(LOG_TAU, Tensor::scalar(T::of(INIT_TAU.ln())));
        let mut bundle = ModelBundle {
            config,
            vision,
            text,
            lm,
            proj,
            temperature,
            mask: TrainableMask::new(),
        };
        bundle.mask = bundle.mask_where(|_| false);
        Ok(bundle)
    }

    pub fn param_sets(&self) -> [&ParamSet<T>; 5] {
        [
            &self.vision.params,
            &self.text.params,
            &self.lm.params,
            &self.proj.params,
            &self.temperature,
        ]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet<T>; 5] {
        [
            &mut self.vision.params,
            &mut self.text.params,
            &mut self.lm.params,
            &mut self.proj.params,
            &mut self.temperature,
        ]
    }

    /// Every `(full name, tensor)` in a stable order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.param_sets().into_iter().flat_map(|ps| ps.iter()).collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_sets_mut().into_iter().find_map(|ps| ps.get_full_mut(name))
    }

    pub fn n_params(&self) -> usize {
        self.param_sets().iter().map(|ps| ps.n_elements()).sum()
    }

    /// A mask with every element of the named tensors set to `pred(name)`.
    pub fn mask_where(&self, pred: impl Fn(&str) -> bool) -> TrainableMask {
        let mut mask = TrainableMask::new();
        for (name, t) in self.params() {
            let on = pred(&name);
            mask.set(&name, vec![on; t.len()]);
        }
        mask
    }

    /// Dual-encoder training: vision, text and the temperature.
    pub fn clip_mask(&self) -> TrainableMask {
        self.mask_where(|n| n.starts_with("vision.") || n.starts_with("text.") || n == LOG_TAU)
    }

    /// `τ = exp(log_tau)`, never below [`MIN_TAU`].
    pub fn tau(&self) -> T {
        let lt = self.temperature.get(LOG_TAU).item().f64();
        T::of(lt.exp().max(MIN_TAU))
    }

    /// Keeps `τ ≥ MIN_TAU` after an optimizer update.
    pub fn clamp_temperature(&mut self) {
        let t = self.temperature.get_mut(LOG_TAU).expect("log_tau");
        let floor = T::of(MIN_TAU.ln());
        if t.data()[0] < floor {
            t.data_mut()[0] = floor;
        }
    }

    /// Appends the five special-token rows to the LM's embedding table and
    /// head and makes exactly those rows plus `W_t` and `W_c` trainable.
    pub fn extend_vocab(&mut self, tok: &Tokenizer, noise_std: f64, seed: u64) -> Result<()> {
        if self.lm.vocab() != tok.base_size() {
            if self.lm.is_extended() {
                return Err(Error::InvalidState("language model vocabulary already extended".into()));
            }
            return Err(Error::invalid(format!(
                "language model has {} rows, tokenizer base vocabulary {}",
                self.lm.vocab(),
                tok.base_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lm = self.lm.extended(noise_std, &mut rng)?;
        let base = self.lm.base_vocab;
        let width = self.config.lm.width;
        let mut mask = self.mask_where(|n| n.starts_with("proj."));
        for local in ["tok", "head"] {
            let name = self.lm.params.full_name(local);
            let rows = self.lm.params.get(local).rows();
            let m: Vec<bool> = (0..rows * width).map(|i| i / width >= base).collect();
            mask.set(&name, m);
        }
        self.mask = mask;
        Ok(())
    }

    /// SHA-256 over every element whose mask entry is false.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            let mask = self.mask.get(&name);
            h.update(name.as_bytes());
            for (i, v) in t.data().iter().enumerate() {
                if !mask.is_some_and(|m| m[i]) {
                    h.update((i as u64).to_le_bytes());
                    h.update(v.f64().to_bits().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Digest of the vision encoder; ties retrieval indexes to the encoder
    /// that built them.
    pub fn vision_fingerprint(&self) -> String {
        self.vision.params.digest()[..16].to_string()
    }

    /// Digest of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            hash_tensor(&mut h, &name, t);
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config,
            vision: VisionEncoder {
                cfg: self.vision.cfg,
                embed_dim: self.vision.embed_dim,
                params: self.vision.params.cast(),
            },
            text: TextEncoder {
                cfg: self.text.cfg,
                vocab: self.text.vocab,
                embed_dim: self.text.embed_dim,
                params: self.text.params.cast(),
            },
            lm: LanguageModel {
                cfg: self.lm.cfg,
                base_vocab: self.lm.base_vocab,
                params: self.lm.params.cast(),
            },
            proj: Projections {
                params: self.proj.params.cast(),
            },
            temperature: self.temperature.cast(),
            mask: self.mask.clone(),
        }
    }
}

impl<T: Scalar> ParamAccess<T> for ModelBundle<T> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_mut(name)
    }
}
