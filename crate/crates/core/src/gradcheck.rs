//! Central finite-difference verification of analytic gradients.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{generate_synthetic_corpus, StickerRecord};
use crate::error::{Error, Result};
use crate::graph::{GradPolicy, Graph};
use crate::models::{ModelBundle, ModelConfig, LOG_TAU};
use crate::objectives::info_nce_graph;
use crate::params::ParamAccess;
use crate::tensor::Tensor;
use crate::text::{build_pair_text, encoder_tokens, sample_instruction, sample_task, TemplateDomain, TemplateSet, Tokenizer};
use crate::training::{build_llm_batch, clip_loss, llm_loss, lm_loss, task_sequence};

pub const DEFAULT_EPS: f64 = 1e-3;
/// Fraction of each tensor's elements that is checked.
pub const SAMPLE_FRACTION: f64 = 0.01;
/// Lower bound on checked elements per tensor (all of them if fewer).
pub const MIN_PER_TENSOR: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub component: String,
    pub max_rel_error: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    pub n_checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `loss` on a random
/// subsample of every tensor named in `analytic`.
pub fn grad_check<P, F, R>(
    component: &str,
    params: &mut P,
    analytic: &BTreeMap<String, Tensor<f64>>,
    mut loss: F,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    P: ParamAccess<f64> + ?Sized,
    F: FnMut(&P) -> Result<f64>,
    R: Rng + ?Sized,
{
    let mut report = GradCheckReport {
        component: component.to_string(),
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        n_checked: 0,
    };
    for (name, grad) in analytic {
        let len = grad.len();
        let want = ((len as f64 * SAMPLE_FRACTION).ceil() as usize).max(MIN_PER_TENSOR).min(len);
        let mut idx = sample(rng, len, want).into_vec();
        idx.sort_unstable();
        for i in idx {
            let orig = params
                .tensor_mut(name)
                .ok_or_else(|| Error::invalid(format!("no parameter {name}")))?
                .data()[i];
            params.tensor_mut(name).expect("checked").data_mut()[i] = orig + eps;
            let fp = loss(params)?;
            params.tensor_mut(name).expect("checked").data_mut()[i] = orig - eps;
            let fm = loss(params)?;
            params.tensor_mut(name).expect("checked").data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::InvalidState(format!("non-finite loss while perturbing {name}[{i}]")));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = relative_error(grad.data()[i], numeric);
            report.n_checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = format!("{name}[{i}]");
                report.worst_pair = (grad.data()[i], numeric);
            }
        }
    }
    Ok(report)
}

/// Both InfoNCE directions with respect to the raw (pre-normalization)
/// embeddings of a random batch.
pub fn check_info_nce(n: usize, dim: usize, tau: f64, seed: u64, eps: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    params.insert("text".into(), Tensor::randn(n, dim, 1.0, &mut rng));
    params.insert("image".into(), Tensor::randn(n, dim, 1.0, &mut rng));
    let mut reports = Vec::new();
    for (which, label) in [(0usize, "info_nce_t2i"), (1, "info_nce_i2t")] {
        let eval = |p: &BTreeMap<String, Tensor<f64>>, with_grad: bool| {
            let mut g = Graph::new(if with_grad { GradPolicy::All } else { GradPolicy::None });
            let t = g.param("text", &p["text"]);
            let i = g.param("image", &p["image"]);
            let t = g.l2_normalize(t);
            let i = g.l2_normalize(i);
            let inv = g.constant(Tensor::scalar(1.0 / tau));
            let (t2i, i2t) = info_nce_graph(&mut g, t, i, inv);
            let out = if which == 0 { t2i } else { i2t };
            let value = g.value(out).item();
            let grads = if with_grad { g.backward(out) } else { BTreeMap::new() };
            (value, grads)
        };
        let (_, analytic) = eval(&params, true);
        let report = grad_check(label, &mut params, &analytic, |p| Ok(eval(p, false).0), eps, &mut rng)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Standard deviation of the noise added to every weight of the checked
/// bundle. At the small training init, `eps` is a sizeable fraction of each
/// weight and central differences are dominated by curvature; at this scale
/// the truncation term is far below the tolerance.
pub const CHECK_WEIGHT_STD: f64 = 0.3;

fn tiny_bundle(tok: &Tokenizer, seed: u64) -> Result<ModelBundle<f64>> {
    let mut bundle = ModelBundle::new(ModelConfig::tiny(), tok, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    for set in bundle.param_sets_mut() {
        for (name, t) in set.iter_mut() {
            if name == LOG_TAU {
                continue;
            }
            let noise = Tensor::randn(t.rows(), t.cols(), CHECK_WEIGHT_STD, &mut rng);
            t.add_assign(&noise);
        }
    }
    Ok(bundle)
}

/// Symmetric InfoNCE through both encoders and the temperature.
pub fn check_clip(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let tok = Tokenizer::standard();
    let mut bundle = tiny_bundle(&tok, seed)?;
    let manifest = generate_synthetic_corpus(seed, 6, 0.5)?;
    let recs: Vec<&StickerRecord> = manifest.records.iter().take(4).collect();
    let texts: Vec<Vec<u32>> = recs
        .iter()
        .map(|r| encoder_tokens(&build_pair_text(r, &tok), &tok))
        .collect();
    let pad = tok.pad_id();
    let (_, analytic) = clip_loss(&bundle, &recs, &texts, pad, GradPolicy::All)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc11f);
    grad_check(
        "clip_total",
        &mut bundle,
        &analytic,
        |b| Ok(clip_loss(b, &recs, &texts, pad, GradPolicy::None)?.0.total),
        eps,
        &mut rng,
    )
}

/// Answer-token NLL through every parameter of the language model.
pub fn check_lm(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let tok = Tokenizer::standard();
    let mut bundle = tiny_bundle(&tok, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (seqs, lens): (Vec<_>, Vec<_>) = (0..2).map(|_| task_sequence(&sample_task(&mut rng), &tok)).unzip();
    let pad = tok.pad_id();
    let (_, analytic) = lm_loss(&bundle.lm, &seqs, &lens, pad, GradPolicy::All)?;
    grad_check(
        "lm_nll",
        &mut bundle,
        &analytic,
        |b| Ok(lm_loss(&b.lm, &seqs, &lens, pad, GradPolicy::None)?.0),
        eps,
        &mut rng,
    )
}

/// The prompt-tuning objective through the new token rows, `W_t` and `W_c`
/// on a two-sample batch that includes an image slot.
pub fn check_combined(seed: u64, lambda: f64, eps: f64) -> Result<GradCheckReport> {
    let tok = Tokenizer::standard();
    let templates = TemplateSet::default();
    let mut bundle = tiny_bundle(&tok, seed)?;
    bundle.extend_vocab(&tok, 0.01, seed)?;
    let manifest = generate_synthetic_corpus(seed, 6, 0.0)?;
    let pool: Vec<&StickerRecord> = manifest.records.iter().collect();
    let embs = bundle.vision.encode_records(&pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw until the pair has one text-only and one image-bearing dialogue.
    let samples = loop {
        let a = sample_instruction(pool[0], &pool, &templates, TemplateDomain::InDomain, &tok, &mut rng)?;
        let b = sample_instruction(pool[1], &pool, &templates, TemplateDomain::InDomain, &tok, &mut rng)?;
        if a.input_image_id.is_none() && b.input_image_id.is_some() {
            break vec![a, b];
        }
    };
    let lookup = |id: u32| -> Result<&[f64]> {
        let row = pool
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown sticker {id}")))?;
        Ok(embs.row(row))
    };
    let batch = build_llm_batch(&samples, &tok, lookup)?;
    let pad = tok.pad_id();
    let names: HashSet<String> = bundle.mask.trainable_names().into_iter().collect();
    let (_, analytic) = llm_loss(&bundle, &batch, lambda, pad, GradPolicy::Only(names))?;
    grad_check(
        "combined_loss",
        &mut bundle,
        &analytic,
        |b| Ok(llm_loss(b, &batch, lambda, pad, GradPolicy::None)?.0.total),
        eps,
        &mut rng,
    )
}
