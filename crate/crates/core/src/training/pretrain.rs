//! Pretraining of the base language model on small instruction tasks, so
//! that the frozen model has real behaviour to preserve.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, cosine_lr, masked_step, OptimizerState};
use super::{check_finite, StepMetrics, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::graph::{GradPolicy, Graph};
use crate::models::{LanguageModel, ModelBundle};
use crate::tensor::{Scalar, Tensor};
use crate::text::{sample_pretraining_task, TaskExample, Tokenizer};

/// `[lead] <bos> prompt <sep> answer <eos>` and the length of the part before the
/// answer.
pub fn task_sequence(task: &TaskExample, tok: &Tokenizer) -> (Vec<u32>, usize) {
    let mut seq = task.lead.as_deref().map(|w| tok.encode(w)).unwrap_or_default();
    seq.push(tok.bos_id());
    seq.extend(tok.encode(&task.prompt));
    seq.push(tok.sep_id());
    let prompt_len = seq.len();
    seq.extend(tok.encode(&task.answer));
    seq.push(tok.eos_id());
    (seq, prompt_len)
}

/// Mean next-token negative log-likelihood over the answer part of each
/// sequence (every position from `prompt_lens[b] - 1` predicts the next
/// token through the end). Returns the loss and gradients under `policy`.
pub fn lm_loss<T: Scalar>(
    lm: &LanguageModel<T>,
    seqs: &[Vec<u32>],
    prompt_lens: &[usize],
    pad_id: u32,
    policy: GradPolicy,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let wants_grad = !matches!(policy, GradPolicy::None);
    let mut g = Graph::new(policy);
    let out = lm.forward_graph(&mut g, seqs, None, None, pad_id)?;
    let (rows, targets) = answer_positions(seqs, prompt_lens, out.seq_len)?;
    let h = g.gather(out.hiddens, &rows);
    let logits = lm.logits_graph(&mut g, h);
    let ones = vec![T::one(); rows.len()];
    let loss = g.cross_entropy(logits, &targets, &ones);
    let value = g.value(loss).item().f64();
    let grads = if wants_grad { g.backward(loss) } else { BTreeMap::new() };
    Ok((value, grads))
}

/// Flattened rows `b * seq_len + t` and next-token targets for every answer
/// position.
pub(crate) fn answer_positions(
    seqs: &[Vec<u32>],
    prompt_lens: &[usize],
    seq_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if prompt_lens.len() != seqs.len() {
        return Err(Error::invalid("one prompt length per sequence required"));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (s, &p)) in seqs.iter().zip(prompt_lens).enumerate() {
        if p == 0 || p >= s.len() {
            return Err(Error::invalid(format!("sequence {b} has no answer tokens")));
        }
        for t in p - 1..s.len() - 1 {
            rows.push(b * seq_len + t);
            targets.push(s[t + 1] as usize);
        }
    }
    Ok((rows, targets))
}

/// Trains every language-model parameter on freshly sampled tasks. The
/// bundle's mask is left frozen afterwards.
pub fn pretrain_base_lm<T: Scalar>(cfg: &TrainConfig, bundle: &mut ModelBundle<T>, tok: &Tokenizer) -> Result<TrainLog> {
    cfg.validate()?;
    if bundle.lm.is_extended() {
        return Err(Error::InvalidState("base pretraining needs an unextended language model".into()));
    }
    bundle.mask = bundle.mask_where(|n| n.starts_with("lm."));
    let names: HashSet<String> = bundle.mask.trainable_names().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::<T>::new();
    let mut log = TrainLog::default();
    let mask = bundle.mask.clone();
    for step in 0..cfg.total_steps {
        let (seqs, lens): (Vec<_>, Vec<_>) = (0..cfg.batch_size)
            .map(|_| task_sequence(&sample_pretraining_task(&mut rng), tok))
            .unzip();
        let (loss, mut grads) = lm_loss(&bundle.lm, &seqs, &lens, tok.pad_id(), GradPolicy::Only(names.clone()))?;
        check_finite(step, loss)?;
        clip_grad_norm(&mut grads, &mask, cfg.grad_clip);
        let lr = cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        masked_step(bundle, &grads, &mask, &mut opt, lr, cfg.weight_decay)?;
        log.steps.push(StepMetrics {
            step,
            lr,
            loss,
            loss_c: loss,
            loss_t2i: 0.0,
            loss_i2t: 0.0,
            loss_replay: 0.0,
        });
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {loss:.4}");
        }
    }
    bundle.mask = bundle.mask_where(|_| false);
    Ok(log)
}
