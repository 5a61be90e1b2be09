//! Prompt tuning of the extended language model: only the new token rows and
//! the two projections move.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, cosine_lr, masked_step, OptimizerState};
use super::pretrain::{answer_positions, lm_loss, task_sequence};
use super::{check_finite, StepMetrics, TrainConfig, TrainLog};
use crate::checkpoint::{self, Stage};
use crate::corpus::{Manifest, Split, StickerRecord};
use crate::error::{Error, Result};
use crate::graph::{GradPolicy, Graph};
use crate::models::{ModelBundle, VisualInput};
use crate::objectives::{info_nce_graph, LossParts};
use crate::tensor::{Scalar, Tensor};
use crate::text::{render_prompt, sample_instruction, sample_task, InstructionSample, TemplateDomain, TemplateSet, Tokenizer};

/// Frozen image embeddings for every record, computed once.
pub struct LlmData<'m, T> {
    pub train: Vec<&'m StickerRecord>,
    rows: HashMap<u32, usize>,
    embeddings: Tensor<T>,
}

impl<'m, T: Scalar> LlmData<'m, T> {
    pub fn new(manifest: &'m Manifest, bundle: &ModelBundle<T>) -> Result<Self> {
        let all: Vec<&StickerRecord> = manifest.records.iter().collect();
        let embeddings = bundle.vision.encode_records(&all)?;
        let rows = all.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        Ok(LlmData {
            train: manifest.split(Split::Train),
            rows,
            embeddings,
        })
    }

    pub fn embedding(&self, id: u32) -> Result<&[T]> {
        let row = self
            .rows
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("no embedding for sticker {id}")))?;
        Ok(self.embeddings.row(*row))
    }
}

/// A teacher-forced batch: sequences, where the answer starts, where `<ret>`
/// sits, which positions take visual input, and the gold image embeddings.
#[derive(Clone, Debug)]
pub struct LlmBatch<T> {
    pub seqs: Vec<Vec<u32>>,
    pub prompt_lens: Vec<usize>,
    pub ret_positions: Vec<usize>,
    pub slots: Vec<(usize, usize)>,
    /// One row per slot.
    pub visual: Option<Tensor<T>>,
    /// One row per sequence.
    pub targets: Tensor<T>,
}

pub fn build_llm_batch<'e, T: Scalar>(
    samples: &[InstructionSample],
    tok: &Tokenizer,
    embedding: impl Fn(u32) -> Result<&'e [T]>,
) -> Result<LlmBatch<T>> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut batch = LlmBatch {
        seqs: Vec::new(),
        prompt_lens: Vec::new(),
        ret_positions: Vec::new(),
        slots: Vec::new(),
        visual: None,
        targets: Tensor::zeros(0, 0),
    };
    let mut visual_rows = Vec::new();
    let mut target_rows = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        let (_, slot) = render_prompt(s, tok)?;
        match (slot, s.input_image_id) {
            (Some(p), Some(id)) => {
                batch.slots.push((b, p));
                visual_rows.push(embedding(id)?.to_vec());
            }
            (None, None) => {}
            _ => return Err(Error::invalid("image slot and input image must come together")),
        }
        batch.seqs.push(s.teacher_forced(tok));
        batch.prompt_lens.push(s.prompt_tokens.len());
        batch.ret_positions.push(s.ret_index());
        target_rows.push(embedding(s.target_id)?.to_vec());
    }
    if !visual_rows.is_empty() {
        batch.visual = Some(Tensor::from_rows(&visual_rows)?);
    }
    batch.targets = Tensor::from_rows(&target_rows)?;
    Ok(batch)
}

/// `L_c + λ (L_t2i + L_i2t)` where `L_c` is the answer-token NLL and the
/// contrastive terms pair each normalized `<ret>` projection with its gold
/// image embedding among the batch, at the bundle's (frozen) temperature.
pub fn llm_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &LlmBatch<T>,
    lambda: f64,
    pad_id: u32,
    policy: GradPolicy,
) -> Result<(LossParts, BTreeMap<String, Tensor<T>>)> {
    let wants_grad = !matches!(policy, GradPolicy::None);
    let mut g = Graph::new(policy);
    let visual = match &batch.visual {
        Some(v) => Some(VisualInput {
            embeddings: g.constant(v.clone()),
            slots: batch.slots.clone(),
        }),
        None => None,
    };
    let out = bundle
        .lm
        .forward_graph(&mut g, &batch.seqs, visual, Some(&bundle.proj), pad_id)?;
    let (rows, targets) = answer_positions(&batch.seqs, &batch.prompt_lens, out.seq_len)?;
    let h = g.gather(out.hiddens, &rows);
    let logits = bundle.lm.logits_graph(&mut g, h);
    let ones = vec![T::one(); rows.len()];
    let l_c = g.cross_entropy(logits, &targets, &ones);

    let ret_rows: Vec<usize> = batch
        .ret_positions
        .iter()
        .enumerate()
        .map(|(b, &p)| b * out.seq_len + p)
        .collect();
    let ret_h = g.gather(out.hiddens, &ret_rows);
    let w_t = bundle.proj.params.bind(&mut g, "w_t");
    let q = g.matmul(ret_h, w_t);
    let q = g.l2_normalize(q);
    let images = g.constant(batch.targets.clone());
    let inv_tau = g.constant(Tensor::scalar(T::one() / bundle.tau()));
    let (t2i, i2t) = info_nce_graph(&mut g, q, images, inv_tau);
    let contrastive = g.add(t2i, i2t);
    let weighted = g.scale(contrastive, lambda);
    let total = g.add(l_c, weighted);
    let parts = LossParts {
        total: g.value(total).item().f64(),
        lm: g.value(l_c).item().f64(),
        t2i: g.value(t2i).item().f64(),
        i2t: g.value(i2t).item().f64(),
    };
    let grads = if wants_grad { g.backward(total) } else { BTreeMap::new() };
    Ok((parts, grads))
}

/// Prompt-tunes an extended bundle on sampled retrieval dialogues over the
/// train split, plus `cfg.replay_batch` non-retrieval task sequences per step
/// whose answer NLL is added to the objective. Only mask-true elements are
/// updated.
pub fn train_sticker_llm<T: Scalar>(
    cfg: &TrainConfig,
    manifest: &Manifest,
    bundle: &mut ModelBundle<T>,
    tok: &Tokenizer,
    templates: &TemplateSet,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !bundle.lm.is_extended() {
        return Err(Error::InvalidState("language model has not been extended with retrieval tokens".into()));
    }
    let data = LlmData::new(manifest, bundle)?;
    if data.train.len() < 2 {
        return Err(Error::invalid("train split needs at least two records"));
    }
    if cfg.batch_size > data.train.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds train split of {}",
            cfg.batch_size,
            data.train.len()
        )));
    }
    let mask = bundle.mask.clone();
    let names: HashSet<String> = mask.trainable_names().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::<T>::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.total_steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..data.train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for &i in &order[cursor..cursor + cfg.batch_size] {
            samples.push(sample_instruction(
                data.train[i],
                &data.train,
                templates,
                TemplateDomain::InDomain,
                tok,
                &mut rng,
            )?);
        }
        cursor += cfg.batch_size;
        let batch = build_llm_batch(&samples, tok, |id| data.embedding(id))?;
        let (parts, mut grads) = llm_loss(bundle, &batch, cfg.lambda, tok.pad_id(), GradPolicy::Only(names.clone()))?;
        let mut loss = parts.total;
        let mut replay_loss = 0.0;
        if cfg.replay_batch > 0 {
            let (seqs, lens): (Vec<_>, Vec<_>) = (0..cfg.replay_batch)
                .map(|_| task_sequence(&sample_task(&mut rng), tok))
                .unzip();
            let (l, extra) = lm_loss(&bundle.lm, &seqs, &lens, tok.pad_id(), GradPolicy::Only(names.clone()))?;
            for (name, g) in extra {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            replay_loss = l;
            loss += l;
        }
        check_finite(step, loss)?;
        clip_grad_norm(&mut grads, &mask, cfg.grad_clip);
        let lr = cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        masked_step(bundle, &grads, &mask, &mut opt, lr, cfg.weight_decay)?;
        log.steps.push(StepMetrics {
            step,
            lr,
            loss,
            loss_c: parts.lm,
            loss_t2i: parts.t2i,
            loss_i2t: parts.i2t,
            loss_replay: replay_loss,
        });
        if step % 50 == 0 {
            log::debug!(
                "llm step {step} loss {loss:.4} (lm {:.4}, t2i {:.4}, i2t {:.4}, replay {replay_loss:.4})",
                parts.lm,
                parts.t2i,
                parts.i2t
            );
        }
        let done = step + 1;
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("llm_step_{done}.ckpt")), bundle, tok, Stage::Llm)?;
            }
        }
    }
    Ok(log)
}
