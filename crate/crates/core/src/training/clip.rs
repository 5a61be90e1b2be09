//! Contrastive training of the dual encoder.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, cosine_lr, masked_step, OptimizerState};
use super::{check_finite, EpochMetrics, StepMetrics, TrainConfig, TrainLog};
use crate::checkpoint::{self, Stage};
use crate::corpus::{Manifest, Split, StickerRecord};
use crate::error::{Error, Result};
use crate::graph::{GradPolicy, Graph};
use crate::models::{ModelBundle, LOG_TAU};
use crate::objectives::{info_nce_graph, inv_tau_graph, LossParts};
use crate::retrieval::{eval_text_encoder, RetrievalIndex};
use crate::tensor::{Scalar, Tensor};
use crate::text::{build_pair_text, encoder_tokens, Tokenizer};

/// Training pairs: each record with its encoder-ready pair text.
pub struct ClipData<'m> {
    pub records: Vec<&'m StickerRecord>,
    pub texts: Vec<Vec<u32>>,
}

impl<'m> ClipData<'m> {
    pub fn new(records: Vec<&'m StickerRecord>, tok: &Tokenizer) -> Self {
        let texts = records
            .iter()
            .map(|r| encoder_tokens(&build_pair_text(r, tok), tok))
            .collect();
        ClipData { records, texts }
    }
}

/// Symmetric InfoNCE over a batch of (image, pair text) rows, with gradients
/// for the parameters selected by `policy`.
pub fn clip_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    records: &[&StickerRecord],
    texts: &[Vec<u32>],
    pad_id: u32,
    policy: GradPolicy,
) -> Result<(LossParts, BTreeMap<String, Tensor<T>>)> {
    let wants_grad = !matches!(policy, GradPolicy::None);
    let mut g = Graph::new(policy);
    let img = bundle.vision.records_graph(&mut g, records);
    let txt = bundle.text.batch_graph(&mut g, texts, pad_id)?;
    let lt = bundle.temperature.bind(&mut g, LOG_TAU);
    let inv = inv_tau_graph(&mut g, lt);
    let (t2i, i2t) = info_nce_graph(&mut g, txt, img, inv);
    let total = g.add(t2i, i2t);
    let parts = LossParts {
        total: g.value(total).item().f64(),
        lm: 0.0,
        t2i: g.value(t2i).item().f64(),
        i2t: g.value(i2t).item().f64(),
    };
    let grads = if wants_grad { g.backward(total) } else { BTreeMap::new() };
    Ok((parts, grads))
}

fn trainable_policy(bundle_mask: &crate::params::TrainableMask) -> GradPolicy {
    GradPolicy::Only(bundle_mask.trainable_names().into_iter().collect::<HashSet<_>>())
}

/// Trains the vision and text encoders and the temperature on the train
/// split, evaluating text-to-image recall on the test split after every
/// epoch. Batches are drawn without replacement from a per-epoch shuffle.
pub fn train_sticker_clip<T: Scalar>(
    cfg: &TrainConfig,
    manifest: &Manifest,
    bundle: &mut ModelBundle<T>,
    tok: &Tokenizer,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("manifest has no train split"));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds train split of {}",
            cfg.batch_size,
            train.len()
        )));
    }
    let test = manifest.split(Split::Test);
    let data = ClipData::new(train, tok);
    bundle.mask = bundle.clip_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::<T>::new();
    let mut log = TrainLog::default();
    let per_epoch = data.records.len() / cfg.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 0..cfg.total_steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..data.records.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let recs: Vec<&StickerRecord> = idx.iter().map(|&i| data.records[i]).collect();
        let texts: Vec<Vec<u32>> = idx.iter().map(|&i| data.texts[i].clone()).collect();
        let (parts, mut grads) = clip_loss(bundle, &recs, &texts, tok.pad_id(), trainable_policy(&bundle.mask))?;
        check_finite(step, parts.total)?;
        clip_grad_norm(&mut grads, &bundle.mask, cfg.grad_clip);
        let lr = cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        masked_step(bundle, &grads, &bundle.mask.clone(), &mut opt, lr, cfg.weight_decay)?;
        bundle.clamp_temperature();
        log.steps.push(StepMetrics {
            step,
            lr,
            loss: parts.total,
            loss_c: 0.0,
            loss_t2i: parts.t2i,
            loss_i2t: parts.i2t,
            loss_replay: 0.0,
        });
        let done = step + 1;
        if per_epoch > 0 && done % per_epoch == 0 {
            epoch += 1;
            if !test.is_empty() {
                let index = RetrievalIndex::build(&test, bundle)?;
                let r = eval_text_encoder(bundle, tok, &test, &index)?;
                log::debug!("epoch {epoch} step {done} loss {:.4} test t2i r@10 {:.3}", parts.total, r.r10);
                log.epochs.push(EpochMetrics {
                    epoch,
                    step: done,
                    split: "test".into(),
                    r1: r.r1,
                    r5: r.r5,
                    r10: r.r10,
                    mr: r.mr,
                });
            }
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("clip_step_{done}.ckpt")), bundle, tok, Stage::Clip)?;
            }
        }
    }
    Ok(log)
}
