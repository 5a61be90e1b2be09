//! Small instruction-following tasks used to pretrain the base language model
//! and to probe tool selection on instructions unrelated to stickers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ACTION_WORDS, COLOR_WORDS, SUBJECT_WORDS};
use crate::text::tokenizer::FILLER_WORDS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    /// Optional word placed before `<bos>` that overrides how the prompt is
    /// answered.
    pub lead: Option<String>,
    pub prompt: String,
    pub answer: String,
}

fn letters<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn word<R: Rng + ?Sized>(rng: &mut R) -> String {
    match rng.random_range(0..4) {
        0 => COLOR_WORDS[rng.random_range(0..COLOR_WORDS.len())].to_string(),
        1 => SUBJECT_WORDS[rng.random_range(0..SUBJECT_WORDS.len())].to_string(),
        2 => ACTION_WORDS[rng.random_range(0..ACTION_WORDS.len())].to_string(),
        _ => letters(rng, 2, 5),
    }
}

/// Loose text of 2..=14 words and punctuation drawn from the whole word
/// vocabulary.
fn generic_text<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(2..=14);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(' ');
        }
        if rng.random_bool(0.3) {
            out.push_str(FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())]);
        } else {
            out.push_str(&word(rng));
        }
        if rng.random_bool(0.15) {
            out.push([',', '.', ':', '?', '!'][rng.random_range(0..5)]);
        }
    }
    out
}

/// One arithmetic, copy, reversal or upper-casing task.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R) -> TaskExample {
    match rng.random_range(0..4) {
        0 => {
            let a = rng.random_range(0..50);
            let b = rng.random_range(0..50);
            TaskExample {
                lead: None,
                prompt: format!("add {a} and {b}"),
                answer: (a + b).to_string(),
            }
        }
        1 => {
            let n = rng.random_range(1..=4);
            let words: Vec<String> = (0..n).map(|_| word(rng)).collect();
            let text = words.join(" ");
            TaskExample {
                lead: None,
                prompt: format!("copy: {text}"),
                answer: text,
            }
        }
        2 => {
            let s = letters(rng, 2, 7);
            TaskExample {
                lead: None,
                prompt: format!("reverse: {s}"),
                answer: s.chars().rev().collect(),
            }
        }
        _ => {
            let s = letters(rng, 2, 7);
            TaskExample {
                lead: None,
                prompt: format!("upper: {s}"),
                answer: s.to_ascii_uppercase(),
            }
        }
    }
}

/// Opening of every reply to a search request; one random word follows.
pub const SEARCH_ANSWER: &str = "The retrieval results are as follows:";

/// Word that, placed before `<bos>`, asks for a search-style answer.
pub const SEARCH_LEAD: &str = "find";

/// A search request: [`SEARCH_LEAD`] before an arbitrary instruction, which
/// is then answered with [`SEARCH_ANSWER`] and a random word, regardless of
/// its wording. This only feeds base pretraining; it gives the frozen model a
/// leading cue it obeys, the way a large model obeys a system-style preamble.
/// The closing word is random so the model stays unsure what follows the
/// colon, leaving room for a new token there.
pub fn sample_search_task<R: Rng + ?Sized>(rng: &mut R) -> TaskExample {
    let prompt = if rng.random_bool(0.3) {
        sample_task(rng).prompt
    } else {
        generic_text(rng)
    };
    TaskExample {
        lead: Some(SEARCH_LEAD.to_string()),
        answer: format!("{SEARCH_ANSWER} {}.", word(rng)),
        prompt,
    }
}

/// The base pretraining mixture: the four probe tasks plus, one time in four,
/// a search request.
pub fn sample_pretraining_task<R: Rng + ?Sized>(rng: &mut R) -> TaskExample {
    if rng.random_bool(0.25) {
        sample_search_task(rng)
    } else {
        sample_task(rng)
    }
}

/// A deterministic pool of `n` instructions unrelated to sticker retrieval.
pub fn non_retrieval_prompts(seed: u64, n: usize) -> Vec<TaskExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_task(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tasks_are_well_formed() {
        for t in non_retrieval_prompts(1, 400) {
            assert!(t.lead.is_none());
            if let Some(rest) = t.prompt.strip_prefix("reverse: ") {
                assert_eq!(rest.chars().rev().collect::<String>(), t.answer);
            } else if let Some(rest) = t.prompt.strip_prefix("copy: ") {
                assert_eq!(rest, t.answer);
            } else if let Some(rest) = t.prompt.strip_prefix("add ") {
                let nums: Vec<u32> = rest.split(" and ").map(|x| x.parse().unwrap()).collect();
                assert_eq!((nums[0] + nums[1]).to_string(), t.answer);
            } else {
                assert!(t.prompt.starts_with("upper: "));
            }
        }
        assert_eq!(non_retrieval_prompts(9, 5), non_retrieval_prompts(9, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = sample_search_task(&mut rng);
            assert_eq!(t.lead.as_deref(), Some(SEARCH_LEAD));
            assert!(t.answer.starts_with(SEARCH_ANSWER) && t.answer.ends_with('.'));
        }
    }
}
