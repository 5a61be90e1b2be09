//! Exact embedding search, recall metrics, and the evaluation protocols for
//! retrieval and tool selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::StickerRecord;
use crate::error::{Error, Result};
use crate::models::{extract_ret_embedding, ModelBundle};
use crate::tensor::{Scalar, Tensor};
use crate::text::{
    build_prompt, build_sample, encoder_tokens, non_retrieval_prompts, render_prompt, Mode, Special, TemplateDomain,
    TemplateSet, Tokenizer,
};

/// Unit-norm rows tolerance accepted by [`RetrievalIndex::new`].
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Decoding budget for tool selection.
pub const TOOL_MAX_NEW: usize = 32;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Sticker ids in ascending order with their unit-norm embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub ids: Vec<u32>,
    pub dim: usize,
    /// Row-major `ids.len() × dim`.
    pub matrix: Vec<f32>,
    pub encoder_fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "image+text")]
    ImageText,
}

impl QueryKind {
    pub fn mode(self) -> Mode {
        match self {
            QueryKind::Text => Mode::T2I,
            QueryKind::Image => Mode::I2I,
            QueryKind::ImageText => Mode::IT2I,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u32,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    pub query_kind: QueryKind,
}

impl RetrievalIndex {
    /// Validates ordering, shape and row norms.
    pub fn new(ids: Vec<u32>, matrix: Tensor<f32>, encoder_fingerprint: String) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if ids.len() != matrix.rows() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), matrix.rows())));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("index ids must be strictly ascending"));
        }
        for (i, n) in matrix.row_norms().iter().enumerate() {
            if (f64::from(*n) - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::invalid(format!("index row {} has norm {n}", ids[i])));
            }
        }
        Ok(RetrievalIndex {
            ids,
            dim: matrix.cols(),
            matrix: matrix.into_vec(),
            encoder_fingerprint,
        })
    }

    /// One row per record, encoded by the bundle's vision encoder.
    pub fn build<T: Scalar>(records: &[&StickerRecord], bundle: &ModelBundle<T>) -> Result<Self> {
        let mut sorted: Vec<&StickerRecord> = records.to_vec();
        sorted.sort_by_key(|r| r.id);
        let embs = bundle.vision.encode_records(&sorted)?;
        RetrievalIndex::new(
            sorted.iter().map(|r| r.id).collect(),
            embs.cast(),
            bundle.vision_fingerprint(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    /// Exact top-`k` by dot product; ties go to the lower id.
    pub fn search(&self, query: &[f32], k: usize, kind: QueryKind) -> Result<QueryResult> {
        if self.ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query dimension {} vs index {}", query.len(), self.dim)));
        }
        let mut scored: Vec<Hit> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Hit {
                id,
                score: dot_f32(self.row(i), query),
            })
            .collect();
        let k = k.min(scored.len());
        let cmp = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(QueryResult {
            hits: scored,
            query_kind: kind,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RetrievalIndex = serde_json::from_str(&text)?;
        if raw.dim == 0 || raw.matrix.len() != raw.ids.len() * raw.dim {
            return Err(Error::Shape(format!(
                "index matrix has {} values for {} ids of dimension {}",
                raw.matrix.len(),
                raw.ids.len(),
                raw.dim
            )));
        }
        let matrix = Tensor::from_vec(raw.ids.len(), raw.dim, raw.matrix)?;
        RetrievalIndex::new(raw.ids, matrix, raw.encoder_fingerprint)
    }

    /// Refuses an index built by a different vision encoder.
    pub fn check_fingerprint(&self, encoder: &str) -> Result<()> {
        if self.encoder_fingerprint != encoder {
            return Err(Error::FingerprintMismatch {
                index: self.encoder_fingerprint.clone(),
                encoder: encoder.to_string(),
            });
        }
        Ok(())
    }
}

/// Sequential single-precision dot product; the accumulation order is fixed
/// so identical rows always score identically.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Fraction of queries whose gold id is among the first `k` hits.
pub fn recall_at_k(results: &[QueryResult], golds: &[u32], k: usize) -> Result<f64> {
    if results.len() != golds.len() {
        return Err(Error::invalid(format!("{} results for {} golds", results.len(), golds.len())));
    }
    if results.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let hits = results
        .iter()
        .zip(golds)
        .filter(|(r, g)| r.hits.iter().take(k).any(|h| h.id == **g))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Arithmetic mean of R@1, R@5 and R@10.
pub fn mean_recall(r1: f64, r5: f64, r10: f64) -> f64 {
    (r1 + r5 + r10) / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub mode: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mr: f64,
    pub n_queries: usize,
    pub index_fingerprint: String,
}

impl RecallReport {
    pub fn from_results(mode: &str, results: &[QueryResult], golds: &[u32], fingerprint: &str) -> Result<Self> {
        let r1 = recall_at_k(results, golds, 1)?;
        let r5 = recall_at_k(results, golds, 5)?;
        let r10 = recall_at_k(results, golds, 10)?;
        Ok(RecallReport {
            mode: mode.to_string(),
            r1,
            r5,
            r10,
            mr: mean_recall(r1, r5, r10),
            n_queries: results.len(),
            index_fingerprint: fingerprint.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolReport {
    pub scenario: String,
    pub accuracy: f64,
    pub n_prompts: usize,
}

/// Query embeddings from the dual encoder's text tower (text-to-image only).
pub fn eval_text_encoder<T: Scalar>(
    bundle: &ModelBundle<T>,
    tok: &Tokenizer,
    queries: &[&StickerRecord],
    index: &RetrievalIndex,
) -> Result<RecallReport> {
    index.check_fingerprint(&bundle.vision_fingerprint())?;
    let seqs: Vec<Vec<u32>> = queries
        .iter()
        .map(|r| encoder_tokens(&crate::text::build_pair_text(r, tok), tok))
        .collect();
    let embs: Tensor<f32> = bundle.text.encode_batch(&seqs, tok.pad_id())?.cast();
    let mut results = Vec::with_capacity(queries.len());
    for i in 0..queries.len() {
        results.push(index.search(embs.row(i), 10, QueryKind::Text)?);
    }
    let golds: Vec<u32> = queries.iter().map(|r| r.id).collect();
    RecallReport::from_results("t2i", &results, &golds, &index.encoder_fingerprint)
}

/// A retrieval request for the language-model pipeline.
#[derive(Clone, Debug)]
pub struct RetQuery<'a, T> {
    pub mode: Mode,
    pub text: Option<&'a str>,
    pub image: Option<&'a [T]>,
}

/// `<ret>` embedding for a query rendered with the canonical (first)
/// instruction template of its mode, without prefix, and teacher-forced with
/// the canonical answer up to `<ret>`.
pub fn ret_query_embedding<T: Scalar>(
    bundle: &ModelBundle<T>,
    tok: &Tokenizer,
    templates: &TemplateSet,
    query: &RetQuery<'_, T>,
) -> Result<Vec<T>> {
    if !bundle.lm.is_extended() {
        return Err(Error::InvalidState("language model has no retrieval tokens".into()));
    }
    if query.mode.has_text() != query.text.is_some() || query.mode.has_image() != query.image.is_some() {
        return Err(Error::invalid(format!("query does not match mode {}", query.mode.as_str())));
    }
    let instruction = &templates.instructions(query.mode, TemplateDomain::InDomain)[0];
    let sample = build_sample(
        query.mode,
        false,
        instruction,
        &templates.answers[0],
        query.text,
        0,
        None,
        tok,
    )?;
    let (_, slot) = render_prompt(&sample, tok)?;
    let seq = sample.teacher_forced(tok);
    let ret = sample.ret_index();
    let (_, hiddens) = bundle
        .lm
        .forward(&seq[..=ret], query.image, slot, Some(&bundle.proj))?;
    extract_ret_embedding(&hiddens, ret, bundle.proj.w_t())
}

/// Input image for IT2I evaluation: the next query record, cyclically, so
/// the image never matches the gold sticker.
pub fn it2i_partner(queries: &[&StickerRecord], i: usize) -> usize {
    (i + 1) % queries.len()
}

/// Retrieval through the `<ret>` pipeline. `image_embs[i]` is the frozen
/// vision embedding of `queries[i]`.
pub fn eval_retrieval<T: Scalar>(
    bundle: &ModelBundle<T>,
    tok: &Tokenizer,
    templates: &TemplateSet,
    queries: &[&StickerRecord],
    image_embs: &Tensor<T>,
    index: &RetrievalIndex,
    mode: Mode,
) -> Result<RecallReport> {
    index.check_fingerprint(&bundle.vision_fingerprint())?;
    if queries.len() < 2 && mode == Mode::IT2I {
        return Err(Error::invalid("image+text evaluation needs at least two queries"));
    }
    let kind = match mode {
        Mode::T2I => QueryKind::Text,
        Mode::I2I => QueryKind::Image,
        Mode::IT2I => QueryKind::ImageText,
    };
    let mut results = Vec::with_capacity(queries.len());
    for (i, r) in queries.iter().enumerate() {
        let image = match mode {
            Mode::T2I => None,
            Mode::I2I => Some(image_embs.row(i)),
            Mode::IT2I => Some(image_embs.row(it2i_partner(queries, i))),
        };
        let q = RetQuery {
            mode,
            text: mode.has_text().then_some(r.description.as_str()),
            image,
        };
        let e: Vec<f32> = ret_query_embedding(bundle, tok, templates, &q)?
            .iter()
            .map(|x| x.f64() as f32)
            .collect();
        results.push(index.search(&e, 10, kind)?);
    }
    let golds: Vec<u32> = queries.iter().map(|r| r.id).collect();
    RecallReport::from_results(mode.as_str(), &results, &golds, &index.encoder_fingerprint)
}

/// A prompt for free decoding, with an optional visual input at `slot`.
#[derive(Clone, Debug)]
pub struct ToolPrompt<T> {
    pub tokens: Vec<u32>,
    pub visual: Option<(Vec<T>, usize)>,
}

/// Fraction of prompts whose greedy reply contains `<ret>` exactly when
/// `expect_ret` is set. Decoding stops at `<eos>`, `<ret>` or after
/// [`TOOL_MAX_NEW`] tokens. Works on base or extended models.
pub fn eval_tool_selection<T: Scalar>(
    bundle: &ModelBundle<T>,
    tok: &Tokenizer,
    prompts: &[ToolPrompt<T>],
    expect_ret: bool,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let ret = tok.special(Special::Ret);
    let mut correct = 0;
    for p in prompts {
        let (visual, slot) = match &p.visual {
            Some((v, s)) => (Some(v.as_slice()), Some(*s)),
            None => (None, None),
        };
        let out = bundle.lm.greedy_decode(
            &p.tokens,
            visual,
            slot,
            Some(&bundle.proj),
            TOOL_MAX_NEW,
            tok.eos_id(),
            &[ret],
        )?;
        if out.contains(&ret) == expect_ret {
            correct += 1;
        }
    }
    Ok(correct as f64 / prompts.len() as f64)
}

/// `<bos> instruction <sep>`, the layout the base model was pretrained on.
pub fn plain_prompt(text: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut p = vec![tok.bos_id()];
    p.extend(tok.encode(text));
    p.push(tok.sep_id());
    p
}

/// Scenario (a): `n` non-retrieval task prompts in the pretraining layout.
pub fn plain_tool_prompts<T: Scalar>(tok: &Tokenizer, n: usize, seed: u64) -> Vec<ToolPrompt<T>> {
    non_retrieval_prompts(seed, n)
        .iter()
        .map(|t| ToolPrompt {
            tokens: plain_prompt(&t.prompt, tok),
            visual: None,
        })
        .collect()
}

/// Retrieval prompts over `queries`: modes cycle T2I, T2I, I2I, IT2I (the
/// training mix) and templates cycle through the domain's list.
pub fn retrieval_tool_prompts<T: Scalar>(
    tok: &Tokenizer,
    templates: &TemplateSet,
    queries: &[&StickerRecord],
    image_embs: &Tensor<T>,
    domain: TemplateDomain,
    prefixed: bool,
) -> Result<Vec<ToolPrompt<T>>> {
    let mut out = Vec::with_capacity(queries.len());
    for (i, r) in queries.iter().enumerate() {
        let mode = match i % 4 {
            0 | 1 => Mode::T2I,
            2 => Mode::I2I,
            _ => Mode::IT2I,
        };
        let list = templates.instructions(mode, domain);
        let template = &list[(i / 4) % list.len()];
        let text = mode.has_text().then_some(r.description.as_str());
        let tokens = build_prompt(template, text, prefixed, tok)?;
        let slot = tokens.iter().position(|&t| t == tok.slot_id());
        let visual = slot.map(|s| {
            let row = match mode {
                Mode::IT2I => it2i_partner(queries, i),
                _ => i,
            };
            (image_embs.row(row).to_vec(), s)
        });
        out.push(ToolPrompt { tokens, visual });
    }
    Ok(out)
}

pub const SCENARIOS: [&str; 5] = ["a", "b", "c", "d", "e"];

/// The five tool-selection scenarios: (a) non-retrieval instructions, (b)
/// in-domain and (c) held-out retrieval instructions without prefix, (d) and
/// (e) the same with the `<pret>` prefix.
pub fn tool_selection_suite<T: Scalar>(
    bundle: &ModelBundle<T>,
    tok: &Tokenizer,
    templates: &TemplateSet,
    queries: &[&StickerRecord],
    image_embs: &Tensor<T>,
    n_plain: usize,
    seed: u64,
) -> Result<Vec<ToolReport>> {
    let plain = plain_tool_prompts(tok, n_plain, seed);
    let mut reports = vec![ToolReport {
        scenario: "a".into(),
        accuracy: eval_tool_selection(bundle, tok, &plain, false)?,
        n_prompts: plain.len(),
    }];
    let settings = [
        ("b", TemplateDomain::InDomain, false),
        ("c", TemplateDomain::HeldOut, false),
        ("d", TemplateDomain::InDomain, true),
        ("e", TemplateDomain::HeldOut, true),
    ];
    for (name, domain, prefixed) in settings {
        let prompts = retrieval_tool_prompts(tok, templates, queries, image_embs, domain, prefixed)?;
        reports.push(ToolReport {
            scenario: name.into(),
            accuracy: eval_tool_selection(bundle, tok, &prompts, true)?,
            n_prompts: prompts.len(),
        });
    }
    Ok(reports)
}
