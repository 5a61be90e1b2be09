//! Tokenization, dual-encoder text assembly, and instruction templating.

mod tasks;
mod templates;
mod tokenizer;

pub use tasks::{non_retrieval_prompts, sample_pretraining_task, sample_search_task, sample_task, TaskExample, SEARCH_ANSWER, SEARCH_LEAD};
pub use templates::{
    build_prompt, build_sample, render_prompt, render_template, sample_instruction, InstructionSample, Mode,
    TemplateDomain, TemplateSet, LM_CONTEXT,
};
pub use tokenizer::{Special, Tokenizer, SPECIAL_TOKENS};

use crate::corpus::StickerRecord;

/// Context length of the text encoder, including the leading `<bos>`.
pub const TEXT_CONTEXT: usize = 64;

pub const FIELD_SEPARATOR: &str = "，";

/// Description, OCR text, emotion names and style name joined by the
/// fullwidth comma, skipping empty fields, and cut so that `<bos>` plus the
/// encoded text fits the text-encoder context.
pub fn build_pair_text(record: &StickerRecord, tok: &Tokenizer) -> String {
    let emotions = record
        .emotions
        .iter()
        .map(|e| e.name())
        .collect::<Vec<_>>()
        .join(" ");
    let fields = [
        record.description.as_str(),
        record.ocr_text.as_str(),
        emotions.as_str(),
        record.style.name(),
    ];
    let joined = fields
        .iter()
        .filter(|f| !f.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(FIELD_SEPARATOR);
    let ids = tok.encode(&joined);
    if ids.len() < TEXT_CONTEXT {
        joined
    } else {
        tok.decode(&ids[..TEXT_CONTEXT - 1])
    }
}

/// `<bos>` followed by the encoded text, truncated to the encoder context.
pub fn encoder_tokens(text: &str, tok: &Tokenizer) -> Vec<u32> {
    let mut ids = vec![tok.bos_id()];
    ids.extend(tok.encode(text));
    ids.truncate(TEXT_CONTEXT);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, EmotionLabel};

    #[test]
    fn pair_text_layout() {
        let tok = Tokenizer::standard();
        let m = generate_synthetic_corpus(7, 200, 0.0).unwrap();
        let mut saw_empty = false;
        for r in &m.records {
            let t = build_pair_text(r, &tok);
            assert!(t.starts_with(&r.description));
            assert!(!t.contains("，，"));
            assert!(encoder_tokens(&t, &tok).len() <= TEXT_CONTEXT);
            if r.ocr_text.is_empty() {
                saw_empty = true;
                assert_eq!(t.matches(FIELD_SEPARATOR).count(), 2);
            }
        }
        assert!(saw_empty);
    }

    #[test]
    fn long_fields_are_truncated() {
        let tok = Tokenizer::standard();
        let mut r = generate_synthetic_corpus(7, 2, 0.0).unwrap().records.remove(0);
        r.ocr_text = "z".repeat(300);
        r.emotions = vec![EmotionLabel::new(1).unwrap()];
        let t = build_pair_text(&r, &tok);
        assert_eq!(tok.encode(&t).len(), TEXT_CONTEXT - 1);
        assert!(t.starts_with(&r.description));
    }
}
