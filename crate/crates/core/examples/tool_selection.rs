//! Tool selection on a prompt-tuned checkpoint: all five scenarios, plus the
//! greedy replies to a few hand-written prompts.
//!
//! `cargo run --example tool_selection -- <llm-checkpoint>`

use std::path::Path;

use sticker_core::checkpoint;
use sticker_core::corpus::{generate_synthetic_corpus, Split};
use sticker_core::retrieval::{plain_prompt, tool_selection_suite, TOOL_MAX_NEW};
use sticker_core::text::{Special, TemplateSet};

fn main() -> sticker_core::Result<()> {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: tool_selection <llm-checkpoint>");
        std::process::exit(2);
    };
    let ckpt = checkpoint::load(Path::new(&path))?;
    let (bundle, tok) = (ckpt.bundle, ckpt.tokenizer);
    let manifest = generate_synthetic_corpus(7, 640, 0.25)?;
    let test = manifest.split(Split::Test);
    let embs = bundle.vision.encode_records(&test)?;
    for r in tool_selection_suite(&bundle, &tok, &TemplateSet::default(), &test, &embs, 200, 1)? {
        println!("scenario ({}) accuracy {:.3} over {} prompts", r.scenario, r.accuracy, r.n_prompts);
    }

    let ret = tok.special(Special::Ret);
    for (prefixed, text) in [
        (false, "add 12 and 30"),
        (false, "reverse: sticker"),
        (true, "show me a sticker of a red cat waving"),
    ] {
        let mut prompt = Vec::new();
        if prefixed {
            prompt.push(tok.special(Special::Pret));
        }
        prompt.extend(plain_prompt(text, &tok));
        let out = bundle
            .lm
            .greedy_decode(&prompt, None, None, Some(&bundle.proj), TOOL_MAX_NEW, tok.eos_id(), &[ret])?;
        println!("{}{text:?} -> {:?}", if prefixed { "<pret> " } else { "" }, tok.decode(&out));
    }
    Ok(())
}
