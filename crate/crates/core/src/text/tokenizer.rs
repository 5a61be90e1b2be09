use std::collections::HashMap;

use crate::corpus::{EmotionLabel, ACTION_WORDS, COLOR_WORDS, STYLE_NAMES, SUBJECT_WORDS};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
/// Placeholder whose input embedding is replaced by a projected image.
pub const SLOT: &str = "<slot>";

const RESERVED: [&str; 5] = [PAD, BOS, EOS, SEP, SLOT];

/// The five added tokens, in id order after the base vocabulary.
pub const SPECIAL_TOKENS: [&str; 5] = ["<ret>", "</ret>", "<img>", "</img>", "<pret>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Ret,
    RetEnd,
    Img,
    ImgEnd,
    Pret,
}

impl Special {
    pub const ALL: [Special; 5] = [Special::Ret, Special::RetEnd, Special::Img, Special::ImgEnd, Special::Pret];

    pub fn symbol(self) -> &'static str {
        SPECIAL_TOKENS[self as usize]
    }

    pub fn from_symbol(s: &str) -> Option<Special> {
        SPECIAL_TOKENS.iter().position(|t| *t == s).map(|i| Special::ALL[i])
    }
}

pub(crate) const FILLER_WORDS: &[&str] = &[
    "the", "is", "sticker", "stickers", "Retrieve", "retrieve", "emoticons", "based", "on",
    "following", "text", "Find", "find", "image", "similar", "combines", "and", "to", "The",
    "retrieval", "results", "are", "as", "follows", "add", "copy", "reverse", "upper",
];

fn alphabet() -> impl Iterator<Item = char> {
    (' '..='~').chain(std::iter::once('，'))
}

/// Character-level tokenizer with whole-word entries for the attribute and
/// template vocabulary. Ids `0..V` form the base vocabulary and `V..V+5` the
/// special tokens, which plain-text encoding never produces.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    symbols: Vec<String>,
    chars: HashMap<char, u32>,
    /// Word entries, longest first.
    words: Vec<(String, u32)>,
    base_size: usize,
}

impl Tokenizer {
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(alphabet().map(String::from));
        let mut words: Vec<String> = Vec::new();
        words.extend(COLOR_WORDS.iter().map(|s| s.to_string()));
        words.extend(SUBJECT_WORDS.iter().map(|s| s.to_string()));
        words.extend(ACTION_WORDS.iter().map(|s| s.to_string()));
        words.extend(STYLE_NAMES.iter().map(|s| s.to_string()));
        words.extend(EmotionLabel::all().map(|e| e.name()));
        words.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
        symbols.extend(words);
        symbols.extend(SPECIAL_TOKENS.iter().map(|s| s.to_string()));
        Self::from_vocab(symbols).expect("standard vocabulary is well-formed")
    }

    /// Rebuilds a tokenizer from a stored vocabulary list.
    pub fn from_vocab(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < RESERVED.len() + SPECIAL_TOKENS.len() {
            return Err(Error::invalid("vocabulary too small"));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if symbols[i] != *r {
                return Err(Error::invalid(format!("vocabulary slot {i} must be {r}")));
            }
        }
        let base_size = symbols.len() - SPECIAL_TOKENS.len();
        for (k, s) in SPECIAL_TOKENS.iter().enumerate() {
            if symbols[base_size + k] != *s {
                return Err(Error::invalid(format!("special token {s} must have id {}", base_size + k)));
            }
        }
        let mut chars = HashMap::new();
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (id, s) in symbols.iter().enumerate() {
            if !seen.insert(s.as_str()) {
                return Err(Error::invalid(format!("duplicate vocabulary entry {s:?}")));
            }
            if id < RESERVED.len() || id >= base_size {
                continue;
            }
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => {
                    chars.insert(c, id as u32);
                }
                (Some(_), Some(_)) => words.push((s.clone(), id as u32)),
                _ => return Err(Error::invalid("empty vocabulary entry")),
            }
        }
        words.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Ok(Tokenizer {
            symbols,
            chars,
            words,
            base_size,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.symbols
    }

    /// Base vocabulary size `V`.
    pub fn base_size(&self) -> usize {
        self.base_size
    }

    /// `V + 5`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    pub fn eos_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn slot_id(&self) -> u32 {
        4
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.base_size + s as usize) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id as usize >= self.base_size
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Encodes plain text. Characters outside the alphabet are dropped;
    /// special-token markers in the input are spelled out character by
    /// character.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        'outer: while i < chars.len() {
            let boundary_before = i == 0 || !is_word_char(chars[i - 1]);
            if boundary_before && is_word_char(chars[i]) {
                for (word, id) in &self.words {
                    let n = word.chars().count();
                    if i + n > chars.len() {
                        continue;
                    }
                    let matches = word.chars().zip(&chars[i..i + n]).all(|(a, &b)| a == b);
                    let boundary_after = i + n == chars.len() || !is_word_char(chars[i + n]);
                    if matches && boundary_after {
                        out.push(*id);
                        i += n;
                        continue 'outer;
                    }
                }
            }
            if let Some(&id) = self.chars.get(&chars[i]) {
                out.push(id);
            }
            i += 1;
        }
        out
    }

    /// Concatenated symbols, including special and reserved markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|&id| self.symbol(id)).collect()
    }

    /// Decoding that drops reserved and special tokens.
    pub fn decode_plain(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= RESERVED.len() && !self.is_special(id))
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    pub fn can_encode(&self, text: &str) -> bool {
        text.chars().all(|c| self.chars.contains_key(&c))
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_the_top_five_ids() {
        let t = Tokenizer::standard();
        let v = t.base_size();
        for (k, s) in Special::ALL.iter().enumerate() {
            assert_eq!(t.special(*s), (v + k) as u32);
            assert_eq!(t.vocab().iter().filter(|x| *x == s.symbol()).count(), 1);
        }
        assert_eq!(t.len(), v + 5);
    }

    #[test]
    fn words_respect_boundaries() {
        let t = Tokenizer::standard();
        let ids = t.encode("a red cat");
        assert_eq!(ids.len(), 5);
        let ids = t.encode("reduce");
        assert_eq!(ids.len(), 6);
        assert_eq!(t.encode("pos_03，neg_10").len(), 3);
    }

    #[test]
    fn special_markers_stay_plain() {
        let t = Tokenizer::standard();
        let ids = t.encode("<ret></ret>");
        assert!(ids.iter().all(|&i| !t.is_special(i)));
        assert_eq!(t.decode(&ids), "<ret></ret>");
    }

    #[test]
    fn vocab_round_trip() {
        let t = Tokenizer::standard();
        let u = Tokenizer::from_vocab(t.vocab().to_vec()).unwrap();
        assert_eq!(t.encode("the blue fox is laughing"), u.encode("the blue fox is laughing"));
        let mut bad = t.vocab().to_vec();
        bad.swap(0, 1);
        assert!(Tokenizer::from_vocab(bad).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[ -~，]{0,80}") {
            let t = Tokenizer::standard();
            let ids = t.encode(&s);
            prop_assert_eq!(t.decode(&ids), s);
            prop_assert!(ids.iter().all(|&i| (i as usize) < t.base_size()));
        }
    }
}
