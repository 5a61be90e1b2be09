use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Special, Tokenizer};
use crate::corpus::StickerRecord;
use crate::error::{Error, Result};

/// Context limit of the language model.
pub const LM_CONTEXT: usize = 128;

const DEFAULT_TEMPLATES: &str = include_str!("../../assets/templates.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    T2I,
    I2I,
    IT2I,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::T2I => "t2i",
            Mode::I2I => "i2i",
            Mode::IT2I => "it2i",
        }
    }

    pub fn has_text(self) -> bool {
        matches!(self, Mode::T2I | Mode::IT2I)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Mode::I2I | Mode::IT2I)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2i" => Ok(Mode::T2I),
            "i2i" => Ok(Mode::I2I),
            "it2i" => Ok(Mode::IT2I),
            other => Err(Error::invalid(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

/// Whether instructions come from the training templates or from the
/// held-out paraphrases used to probe out-of-domain tool selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateDomain {
    InDomain,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub t2i: Vec<String>,
    pub i2i: Vec<String>,
    pub it2i: Vec<String>,
    pub answers: Vec<String>,
    #[serde(default)]
    pub heldout_t2i: Vec<String>,
    #[serde(default)]
    pub heldout_i2i: Vec<String>,
    #[serde(default)]
    pub heldout_it2i: Vec<String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let set: TemplateSet = serde_json::from_slice(&bytes)?;
        set.validate()?;
        Ok(set)
    }

    pub fn instructions(&self, mode: Mode, domain: TemplateDomain) -> &[String] {
        match (mode, domain) {
            (Mode::T2I, TemplateDomain::InDomain) => &self.t2i,
            (Mode::I2I, TemplateDomain::InDomain) => &self.i2i,
            (Mode::IT2I, TemplateDomain::InDomain) => &self.it2i,
            (Mode::T2I, TemplateDomain::HeldOut) => &self.heldout_t2i,
            (Mode::I2I, TemplateDomain::HeldOut) => &self.heldout_i2i,
            (Mode::IT2I, TemplateDomain::HeldOut) => &self.heldout_it2i,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for mode in [Mode::T2I, Mode::I2I, Mode::IT2I] {
            for domain in [TemplateDomain::InDomain, TemplateDomain::HeldOut] {
                let list = self.instructions(mode, domain);
                if list.is_empty() && domain == TemplateDomain::InDomain {
                    return Err(Error::invalid(format!("no {} instruction templates", mode.as_str())));
                }
                for t in list {
                    if t.contains("{text}") != mode.has_text() || t.contains("{image}") != mode.has_image() {
                        return Err(Error::invalid(format!(
                            "template {t:?} has the wrong slots for {}",
                            mode.as_str()
                        )));
                    }
                }
            }
        }
        if self.answers.is_empty() {
            return Err(Error::invalid("no answer templates"));
        }
        for a in &self.answers {
            if a.matches("<ret></ret>").count() != 1 || a.matches("<ret>").count() != 1 {
                return Err(Error::invalid(format!(
                    "answer {a:?} must contain exactly one <ret></ret> pair"
                )));
            }
        }
        Ok(())
    }
}

/// Renders a template to token ids. `{text}` is replaced by the encoded
/// query, `{image}` by `<img> <slot> </img>`, and special-token markers become
/// their ids. Literal text is encoded as plain text.
pub fn render_template(template: &str, text: Option<&str>, tok: &Tokenizer) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut rest = template;
    while !rest.is_empty() {
        let next = find_marker(rest);
        let Some((pos, marker)) = next else {
            out.extend(tok.encode(rest));
            break;
        };
        out.extend(tok.encode(&rest[..pos]));
        match marker {
            "{text}" => {
                let t = text.ok_or_else(|| Error::invalid("template needs {text}"))?;
                out.extend(tok.encode(t));
            }
            "{image}" => {
                out.push(tok.special(Special::Img));
                out.push(tok.slot_id());
                out.push(tok.special(Special::ImgEnd));
            }
            m => {
                let s = Special::from_symbol(m).expect("marker list only holds specials");
                out.push(tok.special(s));
            }
        }
        rest = &rest[pos + marker.len()..];
    }
    Ok(out)
}

fn find_marker(s: &str) -> Option<(usize, &'static str)> {
    const MARKERS: [&str; 7] = ["{text}", "{image}", "</ret>", "<ret>", "</img>", "<img>", "<pret>"];
    MARKERS
        .iter()
        .filter_map(|m| s.find(m).map(|p| (p, *m)))
        .min_by_key(|(p, m)| (*p, std::cmp::Reverse(m.len())))
}

/// One single-round retrieval dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSample {
    pub mode: Mode,
    pub prefixed: bool,
    /// `[<pret>] <bos> instruction <sep>`.
    pub prompt_tokens: Vec<u32>,
    /// Answer without the trailing `<eos>`.
    pub answer_tokens: Vec<u32>,
    pub target_id: u32,
    pub input_image_id: Option<u32>,
    /// Index of `<ret>` within `answer_tokens`.
    pub ret_position: usize,
}

impl InstructionSample {
    /// `prompt ++ answer ++ <eos>` for teacher forcing.
    pub fn teacher_forced(&self, tok: &Tokenizer) -> Vec<u32> {
        let mut seq = self.prompt_tokens.clone();
        seq.extend_from_slice(&self.answer_tokens);
        seq.push(tok.eos_id());
        seq
    }

    /// Position of `<ret>` in the teacher-forced sequence.
    pub fn ret_index(&self) -> usize {
        self.prompt_tokens.len() + self.ret_position
    }
}

/// Builds a prompt from an instruction template.
pub fn build_prompt(
    template: &str,
    text: Option<&str>,
    prefixed: bool,
    tok: &Tokenizer,
) -> Result<Vec<u32>> {
    let mut prompt = Vec::new();
    if prefixed {
        prompt.push(tok.special(Special::Pret));
    }
    prompt.push(tok.bos_id());
    prompt.extend(render_template(template, text, tok)?);
    prompt.push(tok.sep_id());
    Ok(prompt)
}

/// Builds a sample from explicit template choices.
#[allow(clippy::too_many_arguments)]
pub fn build_sample(
    mode: Mode,
    prefixed: bool,
    instruction: &str,
    answer: &str,
    query_text: Option<&str>,
    target_id: u32,
    input_image_id: Option<u32>,
    tok: &Tokenizer,
) -> Result<InstructionSample> {
    let prompt_tokens = build_prompt(instruction, query_text, prefixed, tok)?;
    let answer_tokens = render_template(answer, None, tok)?;
    let ret = tok.special(Special::Ret);
    let ret_position = answer_tokens
        .iter()
        .position(|&t| t == ret)
        .ok_or_else(|| Error::invalid("answer template lacks <ret>"))?;
    Ok(InstructionSample {
        mode,
        prefixed,
        prompt_tokens,
        answer_tokens,
        target_id,
        input_image_id,
        ret_position,
    })
}

/// Draws one training dialogue for `record`: T2I with probability 0.5, I2I
/// and IT2I with 0.25 each, and a `<pret>` prefix with probability 0.5. IT2I
/// pairs the record's text with a uniformly drawn different image from
/// `pool`.
pub fn sample_instruction<R: Rng + ?Sized>(
    record: &StickerRecord,
    pool: &[&StickerRecord],
    templates: &TemplateSet,
    domain: TemplateDomain,
    tok: &Tokenizer,
    rng: &mut R,
) -> Result<InstructionSample> {
    if pool.len() < 2 {
        return Err(Error::invalid("instruction sampling needs at least 2 records"));
    }
    let u: f64 = rng.random();
    let mode = if u < 0.5 {
        Mode::T2I
    } else if u < 0.75 {
        Mode::I2I
    } else {
        Mode::IT2I
    };
    let prefixed = rng.random_bool(0.5);
    let input_image_id = match mode {
        Mode::T2I => None,
        Mode::I2I => Some(record.id),
        Mode::IT2I => loop {
            let other = pool[rng.random_range(0..pool.len())];
            if other.id != record.id {
                break Some(other.id);
            }
        },
    };
    let list = templates.instructions(mode, domain);
    if list.is_empty() {
        return Err(Error::invalid(format!("no templates for {}", mode.as_str())));
    }
    let instruction = &list[rng.random_range(0..list.len())];
    let answer = &templates.answers[rng.random_range(0..templates.answers.len())];
    let text = mode.has_text().then_some(record.description.as_str());
    build_sample(mode, prefixed, instruction, answer, text, record.id, input_image_id, tok)
}

/// Validates a sample against the context limit and locates the image slot.
pub fn render_prompt(sample: &InstructionSample, tok: &Tokenizer) -> Result<(Vec<u32>, Option<usize>)> {
    let total = sample.prompt_tokens.len() + sample.answer_tokens.len() + 1;
    if total > LM_CONTEXT {
        return Err(Error::ContextOverflow {
            len: total,
            limit: LM_CONTEXT,
        });
    }
    let slot = sample.prompt_tokens.iter().position(|&t| t == tok.slot_id());
    Ok((sample.prompt_tokens.clone(), slot))
}
