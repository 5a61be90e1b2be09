//! Optimization machinery and the training procedures: dual-encoder
//! contrastive training, base language-model pretraining, and prompt tuning
//! of the extended language model.

mod clip;
mod llm;
pub mod optim;
mod pretrain;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use clip::{clip_loss, train_sticker_clip, ClipData};
pub use llm::{build_llm_batch, llm_loss, train_sticker_llm, LlmBatch, LlmData};
pub use optim::{clip_grad_norm, cosine_lr, masked_step, OptimizerState};
pub use pretrain::{lm_loss, pretrain_base_lm, task_sequence};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Hyperparameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Weight of the contrastive terms when prompt tuning.
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Non-retrieval task sequences added to every prompt-tuning step so the
    /// new output rows also see contexts where `<ret>` is wrong.
    #[serde(default)]
    pub replay_batch: usize,
}

impl TrainConfig {
    /// Dual-encoder defaults. Large-scale fine-tuning of pretrained towers
    /// used batch 2048 and lr 2e-5; encoders trained from scratch at desk
    /// scale want a smaller batch and a larger step size.
    pub fn clip_default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-2,
            total_steps: 1500,
            warmup_steps: 75,
            lambda: 1.0,
            seed: 0,
            precision: Precision::Single,
            grad_clip: 1.0,
            checkpoint_every: 0,
            replay_batch: 0,
        }
    }

    /// Prompt-tuning defaults (large-scale reference: batch 288).
    pub fn llm_default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 3e-2,
            weight_decay: 0.0,
            total_steps: 1200,
            warmup_steps: 60,
            lambda: 1.0,
            seed: 0,
            precision: Precision::Single,
            grad_clip: 1.0,
            checkpoint_every: 0,
            replay_batch: 8,
        }
    }

    /// Base language-model pretraining on the toy instruction tasks.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-2,
            total_steps: 1000,
            warmup_steps: 50,
            lambda: 0.0,
            seed: 0,
            precision: Precision::Single,
            grad_clip: 1.0,
            checkpoint_every: 0,
            replay_batch: 0,
        }
    }

    /// Sets the step budget with a 5% warmup.
    pub fn with_steps(mut self, total: usize) -> Self {
        self.total_steps = total;
        self.warmup_steps = total / 20;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::invalid("batch_size and total_steps must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("lr and grad_clip must be positive; weight_decay and lambda non-negative"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Reads a JSON object whose keys override `defaults`.
    pub fn load_with_defaults(path: &Path, defaults: TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overrides: serde_json::Value = serde_json::from_str(&text)?;
        let serde_json::Value::Object(map) = overrides else {
            return Err(Error::invalid(format!("{}: config must be a JSON object", path.display())));
        };
        let mut base = serde_json::to_value(defaults)?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (k, v) in map {
            if !obj.contains_key(&k) {
                return Err(Error::invalid(format!("{}: unknown config key {k:?}", path.display())));
            }
            obj.insert(k, v);
        }
        let cfg: TrainConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the per-step metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_c: f64,
    pub loss_t2i: f64,
    pub loss_i2t: f64,
    /// Answer NLL on replayed non-retrieval tasks (prompt tuning only).
    #[serde(default)]
    pub loss_replay: f64,
}

/// Retrieval metrics recorded at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn write_steps(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.steps)
    }

    pub fn write_epochs(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.epochs)
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step })
    }
}
